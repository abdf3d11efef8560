#pragma once

#include <json.hpp>

#include "gnnb/checkpoint.hpp"
#include "gnnb/evaluation.hpp"

namespace gnnb {

struct ModelSpec {
    std::string name;
    ModelConfig config;
};

/// One experiment: a (model x attack x budget x split) matrix plus transfer
/// contributions, envelopes, RAUC summaries and the perturbation archive.
struct ExperimentConfig {
    std::string name = "experiment";
    std::string dataset_name = "dataset";
    std::string dataset_path;  // empty when an inline SBM is configured
    bool sbm = false;
    std::vector<int> sbm_blocks;
    double sbm_p_in = 0.1;
    double sbm_p_out = 0.01;
    SbmFeatureModel sbm_features;
    uint64_t sbm_seed = 0;

    std::vector<uint64_t> split_seeds{1, 2, 3, 4, 5};
    double train_ratio = 0.1, val_ratio = 0.1, test_ratio = 0.8;

    std::vector<ModelSpec> models;
    std::vector<AttackAlgo> attacks{AttackAlgo::Fga, AttackAlgo::Pgd};
    std::string scope = "global";    // "global" or "local"
    std::string setting = "evasion"; // "evasion", "poisoning" or "both"
    std::vector<double> budgets{0.01, 0.025, 0.05, 0.075, 0.10, 0.15};
    std::vector<double> local_budgets{0.25, 0.5, 1.0, 1.5, 2.0};

    AttackConfig pgd_options;   // also used for fga's loss choice
    AttackConfig meta_options;  // greedy_meta / meta_pgd
    int aux_models = 0;         // extra auxiliary models for multi-model pgd
    uint64_t target_seed = 0;   // local target selection

    bool include_transfers = true;
    bool non_adaptive_baseline = true;
    bool local_poisoning = false;
    int workers = 1;
    std::string out_dir = "runs/out";

    void validate() const;
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);

struct ResultRow {
    std::string dataset, scope, setting, model, attack;
    double budget = 0.0;
    uint64_t split_seed = 0;
    std::string metric;
    double value = 0.0;

    auto key() const {
        return std::tie(dataset, scope, setting, model, attack, budget, split_seed, metric);
    }
};

struct ExperimentResult {
    std::vector<ResultRow> rows;
    std::vector<ArchiveRecord> archive;
    std::vector<std::string> failures;
    int cells = 0;
    int cache_hits = 0;
};

Graph load_experiment_graph(const ExperimentConfig& cfg);

/// Executes the matrix; resumable through per-cell caches and model
/// checkpoints under out_dir. Failed cells are recorded, never fatal.
/// Writes results.csv and archive.json into out_dir.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

std::string results_to_csv(const std::vector<ResultRow>& rows);

void export_archive(const std::vector<ArchiveRecord>& records, const std::string& path);
std::vector<ArchiveRecord> import_archive(const std::string& path);

struct SourceScore {
    std::string source;
    std::string setting;
    double rauc_value = 1.0;
};

struct ScoreOutcome {
    std::vector<SourceScore> scores;
    double min_rauc = 1.0;
    bool fail = false;  // some source undercuts the claimed threshold
};

/// The robustness unit test: applies every archived perturbation to the
/// candidate model in evasion and poisoning mode and compares the weakest
/// resulting RAUC against the claimed threshold.
ScoreOutcome import_and_score(const std::string& archive_path, const TrainedModel& candidate,
                              const Graph& g,
                              const std::vector<std::pair<uint64_t, DataSplit>>& splits,
                              double mlp_accuracy, double threshold);

/// Strongest per-budget global perturbations found against an untuned GCN,
/// tagged source "gcn-untuned"; the non-adaptive comparison source.
std::vector<ArchiveRecord> non_adaptive_baseline(
    const Graph& g, const std::vector<std::pair<uint64_t, DataSplit>>& splits,
    const std::vector<double>& budgets, const AttackConfig& options,
    const std::string& dataset_name);

}  // namespace gnnb
