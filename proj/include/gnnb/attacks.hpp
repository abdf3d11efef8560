#pragma once

#include <functional>

#include "gnnb/train.hpp"

namespace gnnb {

enum class AttackAlgo { Fga, Pgd, GreedyMeta, MetaPgd, GreedyBruteForce };

AttackAlgo attack_algo_from_string(const std::string& s);
std::string to_string(AttackAlgo a);

struct AttackConfig {
    AttackAlgo algorithm = AttackAlgo::Pgd;
    LossKind loss = LossKind::TLM;
    int iterations = 200;   // E
    double base_step = 0.1; // step_t = base_step * delta / sqrt(t)
    int samples = 100;      // K
    double grad_clip = 0.0; // global l2 clip; 0 disables
    EdgeFlipSet init_flips; // warm start; empty means zero init
    std::vector<uint64_t> aux_seeds;  // extra auxiliary-model training seeds
    double meta_lr = 1.0;
    int meta_epochs = 100;
    bool meta_dropout = true;
    uint64_t seed = 0;

    void validate() const;
};

struct Budget {
    enum class Scope { Global, Local };
    Scope scope = Scope::Global;
    double fraction = 0.05;
    int target = -1;

    static Budget global(double fraction);
    static Budget local(double fraction, int target);
    /// round(fraction * m) for global, round(fraction * deg(target)) local.
    int delta(const Graph& g) const;
};

/// Candidate pair universe. Global: every off-diagonal pair. Local: pairs with
/// an endpoint in the target's closed neighborhood. Pairs a defense declares
/// dead (Jaccard coefficient <= eps) are excluded when a model is given.
struct CandidateSet {
    std::vector<NodePair> pairs;
};
CandidateSet global_candidates(const Graph& g, const TrainedModel* model = nullptr);
CandidateSet local_candidates(const Graph& g, int target, const TrainedModel* model = nullptr);

/// Clips to [0,1] and, if the total exceeds delta, shifts by the bisection
/// solution mu so that sum(clip(w - mu, 0, 1)) = delta.
Eigen::VectorXd project_budget(Eigen::VectorXd weights, int delta);

using FlipLoss = std::function<double(const EdgeFlipSet&)>;

/// K Bernoulli draws from the relaxed perturbation plus the top-delta
/// expectation rounding and the empty set; returns the best by `loss`.
EdgeFlipSet sample_discrete(const RelaxedPerturbation& pert, int delta, int k,
                            const FlipLoss& loss, std::mt19937_64& rng);

/// Single-gradient attack: flips the delta candidates with the largest
/// positive gradient in the flip direction.
EdgeFlipSet fga(const TrainedModel& model, const Graph& g, const std::vector<int>& mask,
                int delta, LossKind loss, const CandidateSet& cands);

struct AttackResult {
    EdgeFlipSet flips;
    double relaxed_loss = 0.0;
    bool stalled = false;
};

/// L0-PGD over the relaxed perturbation. With several models, each iteration
/// draws one uniformly (the multi-auxiliary-model variant).
AttackResult pgd(const std::vector<const TrainedModel*>& models, const Graph& g,
                 const std::vector<int>& mask, int delta, const AttackConfig& cfg,
                 const CandidateSet& cands);

/// Metattack-style greedy poisoning: delta rounds of one meta-gradient flip
/// each, never un-flipping. Pairs are returned in flip order so any prefix is
/// the lower-budget attack.
EdgeFlipSet greedy_meta(const ModelConfig& model_cfg, const Graph& g, const DataSplit& split,
                        const std::vector<int>& mask, int delta, const AttackConfig& cfg,
                        const CandidateSet& cands);

/// PGD on meta-gradients through unrolled SGD training.
AttackResult meta_pgd(const ModelConfig& model_cfg, const Graph& g, const DataSplit& split,
                      const std::vector<int>& mask, int delta, const AttackConfig& cfg,
                      const CandidateSet& cands);

/// Local gradient-free attack: each round evaluates the true model once per
/// candidate flip and keeps the best; stops once the target is misclassified.
/// With svd_weights, candidates below weight_threshold are skipped and the
/// rest are tried in descending weight order.
EdgeFlipSet greedy_brute_force(const TrainedModel& model, const Graph& g, int target, int delta,
                               LossKind loss, const Matrix* svd_weights = nullptr,
                               double weight_threshold = 0.2);

struct LocalTargets {
    std::vector<std::pair<int, int>> degree_ranges;
    std::vector<std::vector<int>> buckets;
    std::vector<int> all() const;
};

/// 20 correctly-classified test nodes per degree bucket
/// {1},{2},{3},{5},{8-10},{15-25}; underfull buckets take what exists.
LocalTargets select_local_targets(const Graph& g, const DataSplit& split, uint64_t seed);

struct PoisonOutcome {
    TrainedModel model;
    Matrix logits;
    double test_accuracy = 0.0;
};

/// Applies the flips, retrains from scratch with the given seed and reports
/// accuracy on the test set.
PoisonOutcome poison_eval(const EdgeFlipSet& flips, const ModelConfig& cfg, const Graph& g,
                          const DataSplit& split, uint64_t seed);

/// Retraining seed for poisoning; by construction distinct from every
/// auxiliary-model seed derived from an attack config.
uint64_t poison_seed(uint64_t split_seed);
uint64_t aux_model_seed(uint64_t attack_seed, int index);

}  // namespace gnnb
