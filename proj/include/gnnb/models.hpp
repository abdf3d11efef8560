#pragma once

#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gnnb/graph.hpp"
#include "gnnb/losses.hpp"
#include "gnnb/tape.hpp"

namespace gnnb {

enum class ModelKind { Gcn, Mlp, JaccardGcn, SvdGcn, Rgcn, GnnGuard, SoftMedianGdc };

ModelKind model_kind_from_string(const std::string& s);
std::string to_string(ModelKind k);

struct TrainConfig {
    std::string optimizer = "adam";  // "adam" or "sgd"
    double lr = 0.01;
    double l2 = 1e-3;
    int max_epochs = 3000;
    int patience = 50;  // 0 disables early stopping
    void validate() const;
};

struct ModelConfig {
    ModelKind kind = ModelKind::Gcn;
    std::vector<int> hidden{64};
    double dropout = 0.9;

    double jaccard_eps = 0.0;
    int svd_rank = 50;
    double rgcn_gamma = 1.0;
    double rgcn_beta = 5e-4;
    double rgcn_eps_var = 1e-8;
    double guard_eps_stab = 1e-6;
    double guard_rho_init = 0.0;
    double sm_temperature = 0.5;
    double ppr_alpha = 0.15;
    int ppr_topk = 64;

    TrainConfig train;

    void validate() const;
    std::vector<int> layer_dims(int in_dim, int num_classes) const;
};

/// Tuned / commonly-used hyperparameter sets per model family.
ModelConfig tuned_config(ModelKind kind);
ModelConfig untuned_config(ModelKind kind);

/// Frozen preprocessing state derived from one specific graph.
struct Preprocess {
    Matrix jaccard_mask;  // JaccardGcn: n x n 0/1 pair mask
    Matrix lra;           // SvdGcn: rank-r reconstruction of the raw adjacency
    Matrix svd_weights;   // SvdGcn: per-pair subspace alignment weights
    Matrix ppr;           // SoftMedianGdc: top-k sparsified PPR propagation
};

struct TrainedModel {
    ModelConfig config;
    std::vector<std::string> names;
    std::vector<Matrix> params;
    Preprocess prep;             // state of the graph the model was trained on
    std::string graph_checksum;  // that graph's identity
    uint64_t seed = 0;
    double train_accuracy = 0.0;
    double val_accuracy = 0.0;
    std::vector<double> val_losses;  // per epoch actually run
};

// --- standalone defense building blocks ---------------------------------------

/// Per-pair Jaccard coefficients of the binarized features thresholded at eps:
/// mask(i,j) = 1 iff J_ij > eps. All-zero feature rows get J = 0 to everyone.
Matrix jaccard_mask(const Matrix& features, double eps);

/// Rank-r reconstruction from the top-r singular triplets of the raw adjacency.
Matrix low_rank_approx(const Matrix& adj, int rank);

/// W(i,j) = (P(i,i) + P(j,j)) / 2 for the projector P onto the top-r subspace.
Matrix svd_subspace_weights(const Matrix& adj, int rank);

/// Exact personalized PageRank alpha*(I - (1-alpha)*N)^-1, row-wise top-k
/// sparsified, rows rescaled to their pre-truncation sums.
Matrix ppr_topk(const Matrix& norm_adj, double alpha, int k);

/// One aggregation row of the soft-median estimator (plain reference used by
/// tests; the model forward records the same computation on the tape).
Eigen::RowVectorXd soft_median_aggregate(const Eigen::RowVectorXd& weights, const Matrix& h,
                                         double temperature);

/// GNNGuard's per-layer reweighting, steps (1)-(4). Pass prev_omega = nullptr
/// in the first layer.
Matrix gnnguard_reweight(const Matrix& hidden, const Matrix& adj, const Matrix* prev_omega,
                         double rho, double eps_stab);

// --- forward pass --------------------------------------------------------------

enum class Mode { Train, Eval };

struct ForwardOptions {
    Mode mode = Mode::Eval;
    /// Attack relaxations: SVD surrogate, raised stability epsilons, median
    /// distances against all nodes, gradient-transparent filter placement.
    bool adaptive = false;
    std::mt19937_64* rng = nullptr;     // dropout / sampling source (Train)
    ad::Var* reg_out = nullptr;         // receives e.g. RGCN's KL term (Train)
};

Preprocess make_preprocess(const ModelConfig& cfg, const Graph& g);
std::vector<std::string> param_names(const ModelConfig& cfg, int in_dim, int num_classes);
std::vector<Matrix> init_params(const ModelConfig& cfg, int in_dim, int num_classes,
                                uint64_t seed);

/// Records the forward pass with a dense adjacency var (relaxed or constant).
/// For SvdGcn with opts.adaptive pass the clean adjacency so the surrogate can
/// split off the delta.
ad::Var model_forward(ad::Tape& t, const ModelConfig& cfg, const Preprocess& prep,
                      std::span<const ad::Var> params, ad::Var adjacency, ad::Var features,
                      const ForwardOptions& opts, const Matrix* clean_adj = nullptr);

/// Fixed-graph path: propagation baked into sparse/factored constants.
ad::Var model_forward(ad::Tape& t, const ModelConfig& cfg, const Preprocess& prep,
                      std::span<const ad::Var> params, const Graph& g,
                      const ForwardOptions& opts);

/// Reference-semantics logits of a trained model on an arbitrary graph.
/// Preprocessing is recomputed when g differs from the training graph.
Matrix eval_logits(const TrainedModel& m, const Graph& g);

/// Records the adaptive attack-mode forward for a symmetric relaxed
/// perturbation leaf; returns the logits var. The relaxed adjacency is
/// A + (1-2A) o P. The graph must be the one the model was trained on.
ad::Var attack_forward(ad::Tape& t, const TrainedModel& m, const Graph& g, ad::Var pert_sym);

}  // namespace gnnb
