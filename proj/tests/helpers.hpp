#pragma once

#include <random>

#include "gnnb/models.hpp"
#include "gnnb/train.hpp"

namespace gnnb::test {

inline Graph small_graph(uint64_t seed, int per_block = 6, double p_in = 0.55,
                         double p_out = 0.15) {
    return generate_sbm({per_block, per_block}, p_in, p_out, SbmFeatureModel{4, 0.7, 0.1}, seed);
}

/// A model with random (untrained) parameters; enough for forward/gradient
/// contract tests that do not care about accuracy.
inline TrainedModel untrained_model(const ModelConfig& cfg, const Graph& g, uint64_t seed) {
    TrainedModel m;
    m.config = cfg;
    m.names = param_names(cfg, g.feature_dim(), g.num_classes);
    m.params = init_params(cfg, g.feature_dim(), g.num_classes, seed);
    m.prep = make_preprocess(cfg, g);
    m.graph_checksum = g.checksum;
    m.seed = seed;
    return m;
}

/// Symmetric interior perturbation over all candidate pairs (off-diagonal),
/// scaled small enough that the relaxed adjacency stays in (0, 1).
inline Matrix interior_perturbation(const Graph& g, uint64_t seed, double lo = 0.05,
                                    double hi = 0.25) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    Matrix p = Matrix::Zero(g.n, g.n);
    for (int i = 0; i < g.n; ++i)
        for (int j = i + 1; j < g.n; ++j) {
            double v = dist(rng);
            p(i, j) = v;
            p(j, i) = v;
        }
    return p;
}

inline std::vector<std::pair<int, int>> upper_pairs(int n) {
    std::vector<std::pair<int, int>> out;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) out.emplace_back(i, j);
    return out;
}

/// The perturbation is parametrized on the upper triangle and mirrored, so a
/// finite-difference probe of an upper entry must move its mirror too; the
/// matching analytic derivative is g(i,j) + g(j,i).
inline Matrix mirror_upper(const Matrix& p) {
    Matrix s = p;
    for (Eigen::Index i = 0; i < s.rows(); ++i)
        for (Eigen::Index j = i + 1; j < s.cols(); ++j) s(j, i) = s(i, j);
    return s;
}

/// Small config variants that train quickly on SBM fixtures.
inline ModelConfig small_config(ModelKind kind) {
    ModelConfig c = tuned_config(kind);
    c.hidden = {16};
    c.dropout = 0.5;
    c.svd_rank = 4;
    c.ppr_topk = 8;
    c.train.max_epochs = 300;
    c.train.patience = 30;
    if (kind == ModelKind::GnnGuard) {
        c.train.max_epochs = 81;
        c.train.patience = 0;
    }
    return c;
}

}  // namespace gnnb::test
