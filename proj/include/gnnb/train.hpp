#pragma once

#include "gnnb/models.hpp"

namespace gnnb {

/// Trains with the config's optimizer and returns the parameters from the
/// epoch with the lowest validation cross-entropy. Deterministic per seed.
TrainedModel train(const ModelConfig& cfg, const Graph& g, const DataSplit& split, uint64_t seed);

struct UnrollOptions {
    double lr = 1.0;      // SGD learning rate inside the unroll
    int epochs = 100;     // unrolled training epochs
    bool dropout = true;  // keep dropout active inside the unroll
    uint64_t seed = 0;    // theta_0 and the per-epoch randomness streams
    size_t memory_budget = size_t(6) << 30;
};

struct MetaGradient {
    Matrix grad;                // d attack_loss / d P (n x n, symmetric input convention)
    double loss = 0.0;          // attack loss at the unrolled parameters
    std::vector<Matrix> theta;  // parameters after the unrolled steps
};

/// Exact gradient of loss(f(A~, theta_E(A~))) through E unrolled SGD steps
/// from a fixed initialization, where A~ = A + (1-2A) o P. Training randomness
/// is derived only from opts.seed, so repeated calls replay identically.
/// Pass prep to reuse preprocessing state across calls on the same graph.
MetaGradient unrolled_train_grad(const ModelConfig& cfg, const Graph& g, const Matrix& pert_sym,
                                 const DataSplit& split, LossKind loss,
                                 const std::vector<int>& attack_mask, const UnrollOptions& opts,
                                 const Preprocess* prep = nullptr);

}  // namespace gnnb
