#include "gnnb/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <memory>
#include <set>

namespace gnnb {

AttackAlgo attack_algo_from_string(const std::string& s) {
    if (s == "fga") return AttackAlgo::Fga;
    if (s == "pgd") return AttackAlgo::Pgd;
    if (s == "greedy_meta") return AttackAlgo::GreedyMeta;
    if (s == "meta_pgd") return AttackAlgo::MetaPgd;
    if (s == "greedy_brute_force") return AttackAlgo::GreedyBruteForce;
    throw ArgumentError("unknown attack algorithm: " + s);
}

std::string to_string(AttackAlgo a) {
    switch (a) {
        case AttackAlgo::Fga: return "fga";
        case AttackAlgo::Pgd: return "pgd";
        case AttackAlgo::GreedyMeta: return "greedy_meta";
        case AttackAlgo::MetaPgd: return "meta_pgd";
        case AttackAlgo::GreedyBruteForce: return "greedy_brute_force";
    }
    return "?";
}

void AttackConfig::validate() const {
    if (iterations < 1) throw ArgumentError("attack config: iterations must be >= 1");
    if (samples < 1) throw ArgumentError("attack config: samples must be >= 1");
    if (base_step <= 0) throw ArgumentError("attack config: step size must be positive");
    if (grad_clip < 0) throw ArgumentError("attack config: gradient clip must be >= 0");
    if (meta_epochs < 0) throw ArgumentError("attack config: meta epochs must be >= 0");
}

Budget Budget::global(double fraction) {
    if (fraction <= 0 || fraction > 0.15)
        throw ArgumentError("budget: global fraction must be in (0, 0.15]");
    Budget b;
    b.scope = Scope::Global;
    b.fraction = fraction;
    return b;
}

Budget Budget::local(double fraction, int target) {
    if (fraction <= 0 || fraction > 2.0)
        throw ArgumentError("budget: local fraction must be in (0, 2]");
    if (target < 0) throw ArgumentError("budget: local scope needs a target node");
    Budget b;
    b.scope = Scope::Local;
    b.fraction = fraction;
    b.target = target;
    return b;
}

int Budget::delta(const Graph& g) const {
    if (scope == Scope::Global)
        return static_cast<int>(std::llround(fraction * static_cast<double>(g.m)));
    if (target >= g.n) throw ArgumentError("budget: target out of range");
    return static_cast<int>(std::llround(fraction * g.degree(target)));
}

namespace {

bool pair_alive(const TrainedModel* model, int i, int j) {
    if (!model || model->config.kind != ModelKind::JaccardGcn) return true;
    return model->prep.jaccard_mask(i, j) != 0.0;
}

}  // namespace

CandidateSet global_candidates(const Graph& g, const TrainedModel* model) {
    CandidateSet c;
    c.pairs.reserve(static_cast<size_t>(g.n) * static_cast<size_t>(g.n - 1) / 2);
    for (int i = 0; i < g.n; ++i)
        for (int j = i + 1; j < g.n; ++j) c.pairs.emplace_back(i, j);
    (void)model;  // global attacks keep every pair; dead pairs carry zero gradient
    return c;
}

CandidateSet local_candidates(const Graph& g, int target, const TrainedModel* model) {
    if (target < 0 || target >= g.n) throw ArgumentError("local_candidates: target out of range");
    std::set<NodePair> pairs;
    std::vector<int> hood = g.neighbors(target);
    hood.push_back(target);
    for (int u : hood)
        for (int v = 0; v < g.n; ++v) {
            if (v == u) continue;
            int i = std::min(u, v), j = std::max(u, v);
            if (pair_alive(model, i, j)) pairs.insert({i, j});
        }
    CandidateSet c;
    c.pairs.assign(pairs.begin(), pairs.end());
    return c;
}

Eigen::VectorXd project_budget(Eigen::VectorXd weights, int delta) {
    if (delta < 0) throw ArgumentError("project_budget: delta must be >= 0");
    if (delta == 0) return Eigen::VectorXd::Zero(weights.size());
    Eigen::VectorXd out = weights.cwiseMax(0.0).cwiseMin(1.0);
    if (out.sum() <= static_cast<double>(delta)) return out;

    auto clipped_sum = [&](double mu) {
        double s = 0;
        for (Eigen::Index k = 0; k < weights.size(); ++k)
            s += std::min(std::max(weights[k] - mu, 0.0), 1.0);
        return s;
    };
    double lo = 0.0, hi = weights.maxCoeff();
    for (int it = 0; it < 100; ++it) {
        double mid = 0.5 * (lo + hi);
        if (clipped_sum(mid) > static_cast<double>(delta))
            lo = mid;
        else
            hi = mid;
    }
    const double mu = 0.5 * (lo + hi);
    for (Eigen::Index k = 0; k < weights.size(); ++k)
        out[k] = std::min(std::max(weights[k] - mu, 0.0), 1.0);
    return out;
}

EdgeFlipSet sample_discrete(const RelaxedPerturbation& pert, int delta, int k,
                            const FlipLoss& loss, std::mt19937_64& rng) {
    if (pert.weights.size() != static_cast<Eigen::Index>(pert.pairs.size()))
        throw ArgumentError("sample_discrete: weights/pairs length mismatch");
    if (delta < 0) throw ArgumentError("sample_discrete: delta must be >= 0");
    const size_t np = pert.pairs.size();
    if (delta == 0 || np == 0 || pert.weights.maxCoeff() <= 0.0) return {};

    auto top_delta = [&](std::vector<int> chosen) {
        std::sort(chosen.begin(), chosen.end(), [&](int a, int b) {
            if (pert.weights[a] != pert.weights[b]) return pert.weights[a] > pert.weights[b];
            return pert.pairs[static_cast<size_t>(a)] < pert.pairs[static_cast<size_t>(b)];
        });
        chosen.resize(static_cast<size_t>(delta));
        return chosen;
    };
    auto to_flips = [&](std::vector<int> chosen) {
        std::sort(chosen.begin(), chosen.end());
        EdgeFlipSet f;
        for (int idx : chosen) f.pairs.push_back(pert.pairs[static_cast<size_t>(idx)]);
        return f;
    };

    // candidate pool: the empty set, the expectation rounding, K obeying draws
    EdgeFlipSet best;
    double best_loss = loss(best);
    {
        std::vector<int> keep;
        for (size_t p = 0; p < np; ++p)
            if (pert.weights[static_cast<Eigen::Index>(p)] > 0.0)
                keep.push_back(static_cast<int>(p));
        if (static_cast<int>(keep.size()) > delta) keep = top_delta(std::move(keep));
        EdgeFlipSet rounding = to_flips(std::move(keep));
        double l = loss(rounding);
        if (l > best_loss) {
            best_loss = l;
            best = std::move(rounding);
        }
    }

    std::uniform_real_distribution<double> unif(0.0, 1.0);
    constexpr int kRetryCap = 10;
    for (int draw = 0; draw < k; ++draw) {
        std::vector<int> chosen;
        for (int attempt = 0; attempt < kRetryCap; ++attempt) {
            chosen.clear();
            for (size_t p = 0; p < np; ++p)
                if (unif(rng) < pert.weights[static_cast<Eigen::Index>(p)])
                    chosen.push_back(static_cast<int>(p));
            if (static_cast<int>(chosen.size()) <= delta) break;
        }
        if (static_cast<int>(chosen.size()) > delta) chosen = top_delta(std::move(chosen));
        EdgeFlipSet f = to_flips(std::move(chosen));
        double l = loss(f);
        if (l > best_loss) {
            best_loss = l;
            best = std::move(f);
        }
    }
    return best;
}

namespace {

Matrix pert_matrix(int n, const CandidateSet& cands, const Eigen::VectorXd& w) {
    Matrix p = Matrix::Zero(n, n);
    for (size_t k = 0; k < cands.pairs.size(); ++k) {
        auto [i, j] = cands.pairs[k];
        p(i, j) = w[static_cast<Eigen::Index>(k)];
        p(j, i) = w[static_cast<Eigen::Index>(k)];
    }
    return p;
}

Eigen::VectorXd pair_grad(const Matrix& g, const CandidateSet& cands) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(cands.pairs.size()));
    for (size_t k = 0; k < cands.pairs.size(); ++k) {
        auto [i, j] = cands.pairs[k];
        out[static_cast<Eigen::Index>(k)] = g(i, j) + g(j, i);
    }
    return out;
}

double discrete_attack_loss(const TrainedModel& m, const Graph& g, const EdgeFlipSet& flips,
                            LossKind kind, const std::vector<int>& mask) {
    ad::Tape t;
    Matrix p = Matrix::Zero(g.n, g.n);
    for (auto [i, j] : flips.pairs) p(i, j) = p(j, i) = 1.0;
    ad::Var pert = t.constant(std::move(p), "pert");
    ad::Var logits = attack_forward(t, m, g, pert);
    return t.scalar_val(attack_loss(t, kind, logits, g.labels, mask));
}

Eigen::VectorXd init_weights(const CandidateSet& cands, const EdgeFlipSet& init, int delta) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cands.pairs.size()));
    if (init.empty()) return w;
    std::map<NodePair, int> index;
    for (size_t k = 0; k < cands.pairs.size(); ++k) index[cands.pairs[k]] = static_cast<int>(k);
    for (auto pr : init.pairs) {
        auto it = index.find(pr);
        if (it == index.end())
            throw ArgumentError("attack init: warm-start pair is not in the candidate set");
        w[it->second] = 1.0;
    }
    return project_budget(std::move(w), delta);
}

void clip_global_norm(Eigen::VectorXd& g, double max_norm) {
    if (max_norm <= 0) return;
    double norm = g.norm();
    if (norm > max_norm) g *= max_norm / norm;
}

}  // namespace

EdgeFlipSet fga(const TrainedModel& model, const Graph& g, const std::vector<int>& mask,
                int delta, LossKind loss, const CandidateSet& cands) {
    if (delta < 0) throw ArgumentError("fga: delta must be >= 0");
    if (delta == 0) return {};
    ad::Tape t;
    ad::Var pert = t.leaf(Matrix::Zero(g.n, g.n), "pert");
    ad::Var logits = attack_forward(t, model, g, pert);
    Matrix grad = t.gradient(attack_loss(t, loss, logits, g.labels, mask), pert);
    Eigen::VectorXd scores = pair_grad(grad, cands);

    std::vector<int> order(cands.pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return cands.pairs[static_cast<size_t>(a)] < cands.pairs[static_cast<size_t>(b)];
    });
    EdgeFlipSet flips;
    for (int idx : order) {
        if (static_cast<int>(flips.pairs.size()) >= delta) break;
        if (scores[idx] <= 0.0) break;
        flips.pairs.push_back(cands.pairs[static_cast<size_t>(idx)]);
    }
    if (static_cast<int>(flips.pairs.size()) < delta)
        std::cerr << "[gnnb] fga: only " << flips.pairs.size() << " of " << delta
                  << " candidates had positive signed gradient\n";
    std::sort(flips.pairs.begin(), flips.pairs.end());
    return flips;
}

AttackResult pgd(const std::vector<const TrainedModel*>& models, const Graph& g,
                 const std::vector<int>& mask, int delta, const AttackConfig& cfg,
                 const CandidateSet& cands) {
    cfg.validate();
    if (models.empty()) throw ArgumentError("pgd: need at least one model");
    if (delta < 0) throw ArgumentError("pgd: delta must be >= 0");
    if (delta == 0) return {};

    Eigen::VectorXd w = init_weights(cands, cfg.init_flips, delta);
    std::mt19937_64 pick_rng = make_rng(cfg.seed, "pgd_model_pick");
    std::uniform_int_distribution<size_t> pick(0, models.size() - 1);

    double best_loss = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_w = w;
    int stall = 0;
    bool stalled = false;
    const int stall_cap = std::max(1, cfg.iterations / 2);

    for (int it = 1; it <= cfg.iterations; ++it) {
        const TrainedModel& m = models.size() == 1 ? *models[0] : *models[pick(pick_rng)];
        ad::Tape t;
        ad::Var pert = t.leaf(pert_matrix(g.n, cands, w), "pert");
        ad::Var logits = attack_forward(t, m, g, pert);
        ad::Var lv = attack_loss(t, cfg.loss, logits, g.labels, mask);
        const double cur = t.scalar_val(lv);
        if (cur > best_loss + 1e-9) {
            best_loss = cur;
            best_w = w;
            stall = 0;
        } else if (++stall >= stall_cap) {
            stalled = true;
            break;
        }
        Eigen::VectorXd grad = pair_grad(t.gradient(lv, pert), cands);
        clip_global_norm(grad, cfg.grad_clip);
        w += cfg.base_step * static_cast<double>(delta) / std::sqrt(static_cast<double>(it)) *
             grad;
        w = project_budget(std::move(w), delta);
    }

    RelaxedPerturbation rp{g.n, cands.pairs, best_w};
    FlipLoss fl = [&](const EdgeFlipSet& flips) {
        double total = 0;
        for (const TrainedModel* m : models)
            total += discrete_attack_loss(*m, g, flips, cfg.loss, mask);
        return total / static_cast<double>(models.size());
    };
    std::mt19937_64 sample_rng = make_rng(cfg.seed, "pgd_sample");
    AttackResult out;
    out.flips = sample_discrete(rp, delta, cfg.samples, fl, sample_rng);
    out.relaxed_loss = best_loss;
    out.stalled = stalled;
    if (static_cast<int>(out.flips.size()) > delta)
        throw ValidationError("pgd: sampled flips exceed the budget");
    return out;
}

EdgeFlipSet greedy_meta(const ModelConfig& model_cfg, const Graph& g, const DataSplit& split,
                        const std::vector<int>& mask, int delta, const AttackConfig& cfg,
                        const CandidateSet& cands) {
    cfg.validate();
    if (delta < 0) throw ArgumentError("greedy_meta: delta must be >= 0");
    if (delta == 0) return {};
    UnrollOptions uo;
    uo.lr = cfg.meta_lr;
    uo.epochs = cfg.meta_epochs;
    uo.dropout = cfg.meta_dropout;
    uo.seed = derive_seed(cfg.seed, "meta_unroll");

    // feature-only preprocessing survives edge flips and can be reused
    Preprocess feature_prep;
    const bool reuse_prep = model_cfg.kind == ModelKind::JaccardGcn;
    if (reuse_prep) feature_prep = make_preprocess(model_cfg, g);

    Graph cur = g;
    EdgeFlipSet out;
    std::set<NodePair> used;
    const Matrix zero = Matrix::Zero(g.n, g.n);
    for (int round = 0; round < delta; ++round) {
        MetaGradient mg = unrolled_train_grad(model_cfg, cur, zero, split, cfg.loss, mask, uo,
                                              reuse_prep ? &feature_prep : nullptr);
        Eigen::VectorXd scores = pair_grad(mg.grad, cands);
        int best = -1;
        for (size_t k = 0; k < cands.pairs.size(); ++k) {
            if (scores[static_cast<Eigen::Index>(k)] <= 0.0) continue;
            if (used.count(cands.pairs[k])) continue;
            if (best < 0 || scores[static_cast<Eigen::Index>(k)] > scores[best] ||
                (scores[static_cast<Eigen::Index>(k)] == scores[best] &&
                 cands.pairs[k] < cands.pairs[static_cast<size_t>(best)]))
                best = static_cast<int>(k);
        }
        if (best < 0) {
            std::cerr << "[gnnb] greedy_meta: no candidate with positive meta-gradient after "
                      << out.pairs.size() << " flips\n";
            break;
        }
        NodePair p = cands.pairs[static_cast<size_t>(best)];
        out.pairs.push_back(p);
        used.insert(p);
        EdgeFlipSet one;
        one.pairs.push_back(p);
        cur = apply_flips(cur, one);
    }
    return out;
}

AttackResult meta_pgd(const ModelConfig& model_cfg, const Graph& g, const DataSplit& split,
                      const std::vector<int>& mask, int delta, const AttackConfig& cfg,
                      const CandidateSet& cands) {
    cfg.validate();
    if (delta < 0) throw ArgumentError("meta_pgd: delta must be >= 0");
    if (delta == 0) return {};
    UnrollOptions uo;
    uo.lr = cfg.meta_lr;
    uo.epochs = cfg.meta_epochs;
    uo.dropout = cfg.meta_dropout;
    uo.seed = derive_seed(cfg.seed, "meta_unroll");
    Preprocess prep = make_preprocess(model_cfg, g);

    Eigen::VectorXd w = init_weights(cands, cfg.init_flips, delta);
    double best_loss = -std::numeric_limits<double>::infinity();
    Eigen::VectorXd best_w = w;
    std::vector<Matrix> best_theta;
    int stall = 0;
    bool stalled = false;
    const int stall_cap = std::max(1, cfg.iterations / 2);

    for (int it = 1; it <= cfg.iterations; ++it) {
        MetaGradient mg = unrolled_train_grad(model_cfg, g, pert_matrix(g.n, cands, w), split,
                                              cfg.loss, mask, uo, &prep);
        if (mg.loss > best_loss + 1e-9) {
            best_loss = mg.loss;
            best_w = w;
            best_theta = std::move(mg.theta);
            stall = 0;
        } else if (++stall >= stall_cap) {
            stalled = true;
            break;
        }
        Eigen::VectorXd grad = pair_grad(mg.grad, cands);
        clip_global_norm(grad, cfg.grad_clip);
        w += cfg.base_step * static_cast<double>(delta) / std::sqrt(static_cast<double>(it)) *
             grad;
        w = project_budget(std::move(w), delta);
    }

    // rank samples by attack loss at the unrolled parameters; only the winner
    // is ever retrained (by poison_eval downstream)
    TrainedModel surrogate;
    surrogate.config = model_cfg;
    surrogate.names = param_names(model_cfg, g.feature_dim(), g.num_classes);
    surrogate.params = std::move(best_theta);
    surrogate.prep = prep;
    surrogate.graph_checksum = g.checksum;
    FlipLoss fl = [&](const EdgeFlipSet& flips) {
        return discrete_attack_loss(surrogate, g, flips, cfg.loss, mask);
    };
    RelaxedPerturbation rp{g.n, cands.pairs, best_w};
    std::mt19937_64 sample_rng = make_rng(cfg.seed, "meta_pgd_sample");
    AttackResult out;
    out.flips = sample_discrete(rp, delta, cfg.samples, fl, sample_rng);
    out.relaxed_loss = best_loss;
    out.stalled = stalled;
    if (static_cast<int>(out.flips.size()) > delta)
        throw ValidationError("meta_pgd: sampled flips exceed the budget");
    return out;
}

// --- greedy brute force ----------------------------------------------------------

namespace {

constexpr NodePair kNoFlip{-1, -1};

// Target-row logits under "current graph plus one tentative flip".
class LocalEval {
  public:
    virtual ~LocalEval() = default;
    virtual Eigen::RowVectorXd logits(NodePair extra) = 0;  // kNoFlip = none
    virtual void commit(NodePair flip) = 0;
    virtual std::vector<int> closed_neighborhood() const = 0;
};

// Exact incremental evaluation of a 1-hidden-layer GCN (also Jaccard-GCN on
// its masked graph): a local flip only touches the hidden rows of the
// target's closed neighborhood.
class GcnLocalEval final : public LocalEval {
  public:
    GcnLocalEval(const TrainedModel& m, const Graph& g, int target)
        : target_(target), z0_(g.features * m.params[0]), w2_(m.params[2]), b1_(m.params[1]),
          b2_(m.params[3]) {
        nbrs_.resize(static_cast<size_t>(g.n));
        const bool masked = m.config.kind == ModelKind::JaccardGcn;
        for (auto [i, j] : g.edge_list()) {
            if (masked && m.prep.jaccard_mask(i, j) == 0.0) continue;
            nbrs_[static_cast<size_t>(i)].insert(j);
            nbrs_[static_cast<size_t>(j)].insert(i);
        }
    }

    Eigen::RowVectorXd logits(NodePair extra) override {
        if (extra != kNoFlip) toggle(extra);
        const double st = 1.0 / std::sqrt(deg(target_) + 1.0);
        Eigen::RowVectorXd out = b2_.row(0);
        out += st * st * (hidden_row(target_) * w2_);
        for (int k : nbrs_[static_cast<size_t>(target_)])
            out += st / std::sqrt(deg(k) + 1.0) * (hidden_row(k) * w2_);
        if (extra != kNoFlip) toggle(extra);
        return out;
    }

    void commit(NodePair flip) override { toggle(flip); }

    std::vector<int> closed_neighborhood() const override {
        std::vector<int> hood(nbrs_[static_cast<size_t>(target_)].begin(),
                              nbrs_[static_cast<size_t>(target_)].end());
        hood.push_back(target_);
        return hood;
    }

  private:
    double deg(int v) const { return static_cast<double>(nbrs_[static_cast<size_t>(v)].size()); }

    Eigen::RowVectorXd hidden_row(int k) const {
        const double sk = 1.0 / std::sqrt(deg(k) + 1.0);
        Eigen::RowVectorXd acc = sk * sk * z0_.row(k);
        for (int l : nbrs_[static_cast<size_t>(k)])
            acc += sk / std::sqrt(deg(l) + 1.0) * z0_.row(l);
        acc += b1_.row(0);
        return acc.cwiseMax(0.0);
    }

    void toggle(NodePair p) {
        auto& a = nbrs_[static_cast<size_t>(p.first)];
        auto& b = nbrs_[static_cast<size_t>(p.second)];
        if (a.count(p.second)) {
            a.erase(p.second);
            b.erase(p.first);
        } else {
            a.insert(p.second);
            b.insert(p.first);
        }
    }

    int target_;
    Matrix z0_;
    Matrix w2_;
    Matrix b1_, b2_;
    std::vector<std::set<int>> nbrs_;
};

// Fallback for the other architectures: rebuild the graph and run the full
// reference forward per candidate.
class GenericLocalEval final : public LocalEval {
  public:
    GenericLocalEval(const TrainedModel& m, Graph g, int target)
        : model_(m), cur_(std::move(g)), target_(target) {}

    Eigen::RowVectorXd logits(NodePair extra) override {
        if (extra == kNoFlip) return eval_logits(model_, cur_).row(target_);
        EdgeFlipSet one;
        one.pairs.push_back(extra);
        Graph flipped = apply_flips(cur_, one);
        return eval_logits(model_, flipped).row(target_);
    }

    void commit(NodePair flip) override {
        EdgeFlipSet one;
        one.pairs.push_back(flip);
        cur_ = apply_flips(cur_, one);
    }

    std::vector<int> closed_neighborhood() const override {
        std::vector<int> hood;
        if (model_.config.kind == ModelKind::JaccardGcn) {
            for (int v : cur_.neighbors(target_))
                if (model_.prep.jaccard_mask(target_, v) != 0.0) hood.push_back(v);
        } else {
            hood = cur_.neighbors(target_);
        }
        hood.push_back(target_);
        return hood;
    }

  private:
    const TrainedModel& model_;
    Graph cur_;
    int target_;
};

}  // namespace

EdgeFlipSet greedy_brute_force(const TrainedModel& model, const Graph& g, int target, int delta,
                               LossKind loss, const Matrix* svd_weights,
                               double weight_threshold) {
    if (target < 0 || target >= g.n) throw ArgumentError("greedy_brute_force: target range");
    if (delta < 0) throw ArgumentError("greedy_brute_force: delta must be >= 0");
    if (delta == 0) return {};
    const int label = g.labels[static_cast<size_t>(target)];

    std::unique_ptr<LocalEval> eval;
    const bool fast =
        (model.config.kind == ModelKind::Gcn || model.config.kind == ModelKind::JaccardGcn) &&
        model.config.hidden.size() == 1;
    if (fast)
        eval = std::make_unique<GcnLocalEval>(model, g, target);
    else
        eval = std::make_unique<GenericLocalEval>(model, g, target);

    auto row_loss = [&](const Eigen::RowVectorXd& row) {
        Matrix one_row = row;
        return attack_loss(loss, one_row, {label}, {0});
    };

    Eigen::RowVectorXd clean_row = eval->logits(kNoFlip);
    if (misclassified(clean_row, label)) return {};

    EdgeFlipSet flips;
    EdgeFlipSet best_prefix;  // best-so-far over rounds, the empty set included
    double best_prefix_loss = row_loss(clean_row);
    std::set<NodePair> used;

    for (int round = 0; round < delta; ++round) {
        // candidate pairs adjoin the target or one of its current neighbors
        std::vector<NodePair> cands;
        for (int u : eval->closed_neighborhood())
            for (int v = 0; v < g.n; ++v) {
                if (v == u) continue;
                NodePair p{std::min(u, v), std::max(u, v)};
                if (used.count(p)) continue;
                if (!pair_alive(&model, p.first, p.second)) continue;
                if (svd_weights && (*svd_weights)(p.first, p.second) < weight_threshold) continue;
                cands.push_back(p);
            }
        std::sort(cands.begin(), cands.end());
        cands.erase(std::unique(cands.begin(), cands.end()), cands.end());
        if (svd_weights)
            std::stable_sort(cands.begin(), cands.end(), [&](NodePair a, NodePair b) {
                return (*svd_weights)(a.first, a.second) > (*svd_weights)(b.first, b.second);
            });
        if (cands.empty()) break;

        NodePair best = kNoFlip;
        double best_loss = -std::numeric_limits<double>::infinity();
        Eigen::RowVectorXd best_row;
        for (NodePair p : cands) {
            Eigen::RowVectorXd row = eval->logits(p);
            double l = row_loss(row);
            if (l > best_loss || (l == best_loss && (best == kNoFlip || p < best))) {
                best_loss = l;
                best = p;
                best_row = row;
            }
        }

        eval->commit(best);
        used.insert(best);
        flips.pairs.push_back(best);
        if (best_loss > best_prefix_loss) {
            best_prefix_loss = best_loss;
            best_prefix = flips;
        }
        if (misclassified(best_row, label)) return flips;
    }
    return best_prefix;
}

LocalTargets select_local_targets(const Graph& g, const DataSplit& split, uint64_t seed) {
    LocalTargets out;
    out.degree_ranges = {{1, 1}, {2, 2}, {3, 3}, {5, 5}, {8, 10}, {15, 25}};

    ModelConfig cfg = tuned_config(ModelKind::Gcn);
    TrainedModel selector = train(cfg, g, split, derive_seed(seed, "target_selector"));
    Matrix logits = eval_logits(selector, g);

    for (auto [lo, hi] : out.degree_ranges) {
        std::vector<int> eligible;
        for (int v : split.test) {
            int d = g.degree(v);
            if (d < lo || d > hi) continue;
            if (misclassified(logits.row(v), g.labels[static_cast<size_t>(v)])) continue;
            eligible.push_back(v);
        }
        std::mt19937_64 rng =
            make_rng(seed, "targets_" + std::to_string(lo) + "_" + std::to_string(hi));
        std::shuffle(eligible.begin(), eligible.end(), rng);
        if (eligible.size() > 20) eligible.resize(20);
        if (eligible.size() < 20)
            std::cerr << "[gnnb] select_local_targets: bucket " << lo << "-" << hi
                      << " has only " << eligible.size() << " of 20 targets\n";
        std::sort(eligible.begin(), eligible.end());
        out.buckets.push_back(std::move(eligible));
    }
    return out;
}

std::vector<int> LocalTargets::all() const {
    std::vector<int> out;
    for (const auto& b : buckets) out.insert(out.end(), b.begin(), b.end());
    return out;
}

PoisonOutcome poison_eval(const EdgeFlipSet& flips, const ModelConfig& cfg, const Graph& g,
                          const DataSplit& split, uint64_t seed) {
    Graph poisoned = apply_flips(g, flips);
    PoisonOutcome out;
    out.model = train(cfg, poisoned, split, seed);
    out.logits = eval_logits(out.model, poisoned);
    out.test_accuracy = accuracy(out.logits, poisoned.labels, split.test);
    return out;
}

uint64_t poison_seed(uint64_t split_seed) { return derive_seed(split_seed, "poison_retrain"); }

uint64_t aux_model_seed(uint64_t attack_seed, int index) {
    return derive_seed(attack_seed, "aux_model_" + std::to_string(index));
}

}  // namespace gnnb
