#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gnnb/tape.hpp"
#include "gnnb/util.hpp"

namespace gnnb {

using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double>;
using NodePair = std::pair<int, int>;  // unordered pair stored as i < j

/// Undirected graph with binary adjacency, node features and labels.
/// Immutable after construction; shared freely across tasks.
struct Graph {
    int n = 0;
    int64_t m = 0;
    int num_classes = 0;
    SparseMatrix adj;       // n x n, symmetric, zero diagonal, entries in {0,1}
    Matrix features;        // n x d
    std::vector<int> labels;
    std::string checksum;   // sha256 of the canonical serialization

    int feature_dim() const { return static_cast<int>(features.cols()); }
    int degree(int v) const;
    std::vector<int> neighbors(int v) const;
    std::vector<NodePair> edge_list() const;
    Matrix dense_adj() const { return Matrix(adj); }
    bool has_edge(int i, int j) const;

    /// Validates all invariants and fills in m and the checksum.
    static Graph build(int n, int num_classes, std::vector<NodePair> edges, Matrix features,
                       std::vector<int> labels);
};

struct DataSplit {
    std::vector<int> train, val, test;  // sorted, pairwise disjoint
};

/// Discrete symmetric edge toggles; the unit of attack output.
struct EdgeFlipSet {
    std::vector<NodePair> pairs;  // i < j, no duplicates

    size_t size() const { return pairs.size(); }
    bool empty() const { return pairs.empty(); }
    void validate(int n) const;
};

/// Upper-triangular flip probabilities addressed by a fixed candidate-pair
/// list; the optimization state of PGD and Meta-PGD.
struct RelaxedPerturbation {
    int n = 0;
    std::vector<NodePair> pairs;
    Eigen::VectorXd weights;  // same length as pairs, each in [0, 1]

    /// Symmetric dense n x n matrix with weights mirrored across the diagonal.
    Matrix symmetric() const;
};

/// Parameters of the synthetic stochastic-block-model fixture generator.
struct SbmFeatureModel {
    int dims_per_class = 8;
    double p_on = 0.6;   // P(bit = 1) inside the node's class band
    double p_off = 0.02; // P(bit = 1) elsewhere
};

Graph load_dataset(const std::string& path, const std::string& format = "json");
void save_dataset(const Graph& g, const std::string& path);
std::string canonical_dataset_json(const Graph& g);

Graph generate_sbm(const std::vector<int>& block_sizes, double p_in, double p_out,
                   const SbmFeatureModel& fm, uint64_t seed);

DataSplit make_split(const Graph& g, double train_ratio, double val_ratio, double test_ratio,
                     uint64_t seed);

Graph apply_flips(const Graph& g, const EdgeFlipSet& flips);

/// (D+I)^(-1/2) (A+I) (D+I)^(-1/2)
Matrix gcn_normalize(const Matrix& adj, bool clamp_degrees = false);
SparseMatrix gcn_normalize_sparse(const SparseMatrix& adj);
ad::Var gcn_normalize(ad::Tape& t, ad::Var adj, bool clamp_degrees = false);

/// (D+I)^(-1) (A+I) (D+I)^(-1), the variance-propagation normalization.
Matrix rw_square_normalize(const Matrix& adj);
SparseMatrix rw_square_normalize_sparse(const SparseMatrix& adj);
ad::Var rw_square_normalize(ad::Tape& t, ad::Var adj);

}  // namespace gnnb
