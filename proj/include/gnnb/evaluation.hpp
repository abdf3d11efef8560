#pragma once

#include <map>

#include "gnnb/attacks.hpp"

namespace gnnb {

enum class CurveScope { Global, Local };

/// Piecewise-linear budget -> accuracy map; budget 0 holds the clean value.
struct RobustnessCurve {
    std::vector<std::pair<double, double>> points;  // strictly increasing budgets
    CurveScope scope = CurveScope::Global;

    void validate() const;
    double value_at(double budget) const;  // linear interpolation, clamped ends
};

/// Pointwise minimum across curves on the union budget grid, then the running
/// minimum over budgets.
RobustnessCurve envelope(const std::vector<RobustnessCurve>& curves);

/// Area between the curve and the MLP line up to their first crossing,
/// normalized so that c == mlp_accuracy scores 0 and c == 1 scores 1.
double rauc(const RobustnessCurve& curve, double mlp_accuracy);

/// Trapezoidal area of the local fraction-correct curve over its budget span.
double local_auc(const RobustnessCurve& curve);

struct AttackCharacteristics {
    double mean_degree = 0.0;     // flip endpoints, clean graph
    double mean_closeness = 0.0;  // Wasserman-Faust scaled on disconnected graphs
    double homophily = 0.0;       // fraction of same-class pairs
    double mean_jaccard = 0.0;    // feature Jaccard coefficient of the pairs
    double removal_ratio = 0.0;   // fraction of flips that delete an edge
    size_t flips = 0;
};
AttackCharacteristics attack_characteristics(const Graph& g, const EdgeFlipSet& flips);

double closeness_centrality(const Graph& g, int node);

struct SpectrumComparison {
    Eigen::VectorXd clean;      // singular values, descending
    Eigen::VectorXd perturbed;
    Eigen::VectorXd difference;
};
SpectrumComparison spectrum_compare(const Matrix& clean_adj, const Matrix& perturbed_adj);

struct DegreeBreakdown {
    std::vector<std::pair<int, int>> degree_buckets;
    std::vector<double> budgets;
    std::vector<std::vector<double>> rows;  // normalized per budget
    std::vector<char> row_empty;            // nothing broken yet at this budget
};

/// Distribution over degree buckets of the nodes misclassified within each
/// budget. broken_at maps node -> smallest budget at which it broke.
DegreeBreakdown degree_breakdown(const Graph& g, const std::vector<double>& budgets,
                                 const std::map<int, double>& broken_at, bool local_scope);

/// One stored perturbation: the robustness unit test's atom.
struct ArchiveRecord {
    std::string dataset;
    std::string checksum;
    std::string scope;    // "global" or "local"
    std::string setting;  // "evasion" or "poisoning" (provenance)
    std::string source_model;
    std::string attack;
    double budget = 0.0;  // fraction
    uint64_t split_seed = 0;
    int target = -1;  // local records carry their target node
    EdgeFlipSet flips;
    double clean_accuracy = 0.0;
    double perturbed_accuracy = 0.0;
};

struct TransferMatrix {
    std::vector<std::string> sources;  // columns
    std::vector<std::string> targets;  // rows
    Matrix rauc_matrix;                // NaN marks a missing combination
    std::vector<double> verdicts;      // per target: min RAUC across sources
    std::vector<int> adaptive_column;  // per target: its own source column, -1 if absent
};

/// Scores every archived source against every target model. Evasion applies
/// the flips to a clean-trained model; poisoning retrains on the flipped
/// graph. Records whose checksum does not match the graph are refused.
TransferMatrix transfer_matrix(const std::vector<ArchiveRecord>& records,
                               const std::vector<std::pair<std::string, ModelConfig>>& targets,
                               const Graph& g,
                               const std::vector<std::pair<uint64_t, DataSplit>>& splits,
                               const std::string& setting, double mlp_accuracy);

/// Per budget the strongest (lowest accuracy) perturbation among the sources,
/// applied to the target. Requires at least two sources.
RobustnessCurve ensemble_transfer(const std::vector<ArchiveRecord>& records,
                                  const std::vector<std::string>& source_subset,
                                  const std::string& target_name, const ModelConfig& target,
                                  const Graph& g,
                                  const std::vector<std::pair<uint64_t, DataSplit>>& splits,
                                  const std::string& setting);

/// Accuracy of one record's flips against a concrete model, shared by the
/// transfer machinery and the archive scorer.
double score_record_against(const ArchiveRecord& rec, const ModelConfig& cfg, const Graph& g,
                            const DataSplit& split, const std::string& setting,
                            const TrainedModel* pretrained);

}  // namespace gnnb
