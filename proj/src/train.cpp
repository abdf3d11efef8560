#include "gnnb/train.hpp"

#include <cmath>
#include <limits>

namespace gnnb {

namespace {

struct AdamState {
    std::vector<Matrix> m, v;
    int step = 0;
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

    explicit AdamState(const std::vector<Matrix>& params) {
        for (const Matrix& p : params) {
            m.push_back(Matrix::Zero(p.rows(), p.cols()));
            v.push_back(Matrix::Zero(p.rows(), p.cols()));
        }
    }

    void update(std::vector<Matrix>& params, const std::vector<Matrix>& grads, double lr) {
        ++step;
        const double bc1 = 1.0 - std::pow(kBeta1, step);
        const double bc2 = 1.0 - std::pow(kBeta2, step);
        for (size_t k = 0; k < params.size(); ++k) {
            m[k] = kBeta1 * m[k] + (1.0 - kBeta1) * grads[k];
            v[k] = kBeta2 * v[k] + (1.0 - kBeta2) * grads[k].cwiseProduct(grads[k]);
            Matrix mh = m[k] / bc1;
            Matrix vh = v[k] / bc2;
            params[k] -=
                lr * mh.cwiseQuotient((vh.cwiseSqrt().array() + kEps).matrix());
        }
    }
};

double masked_ce(const ModelConfig& cfg, const Preprocess& prep,
                 const std::vector<Matrix>& params, const Graph& g,
                 const std::vector<int>& mask) {
    ad::Tape t;
    std::vector<ad::Var> pv;
    pv.reserve(params.size());
    for (const Matrix& p : params) pv.push_back(t.constant(p, "param"));
    ForwardOptions o;
    o.mode = Mode::Eval;
    ad::Var logits = model_forward(t, cfg, prep, pv, g, o);
    return t.scalar_val(cross_entropy(t, logits, g.labels, mask));
}

}  // namespace

TrainedModel train(const ModelConfig& cfg, const Graph& g, const DataSplit& split, uint64_t seed) {
    cfg.validate();
    if (split.train.empty() || split.val.empty())
        throw ArgumentError("train: split must have train and val nodes");

    Preprocess prep = make_preprocess(cfg, g);
    std::vector<Matrix> params = init_params(cfg, g.feature_dim(), g.num_classes, seed);
    AdamState adam(params);

    std::vector<Matrix> best_params = params;
    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0;
    std::vector<double> val_losses;

    for (int epoch = 0; epoch < cfg.train.max_epochs; ++epoch) {
        ad::Tape t;
        std::vector<ad::Var> pv;
        pv.reserve(params.size());
        for (const Matrix& p : params) pv.push_back(t.leaf(p, "param"));
        std::mt19937_64 rng = make_rng(seed, "train_epoch_" + std::to_string(epoch));
        ad::Var reg;
        ForwardOptions o;
        o.mode = Mode::Train;
        o.rng = &rng;
        o.reg_out = &reg;
        std::vector<Matrix> grads;
        try {
            ad::Var logits = model_forward(t, cfg, prep, pv, g, o);
            ad::Var loss = cross_entropy(t, logits, g.labels, split.train);
            if (reg.valid()) loss = t.add(loss, reg);
            grads = t.gradients(loss, pv);
        } catch (const NumericError& e) {
            throw NumericError("train: diverged at epoch " + std::to_string(epoch) + ": " +
                               e.what());
        }
        for (size_t k = 0; k < params.size(); ++k) grads[k] += cfg.train.l2 * params[k];
        if (cfg.train.optimizer == "adam") {
            adam.update(params, grads, cfg.train.lr);
        } else {
            for (size_t k = 0; k < params.size(); ++k) params[k] -= cfg.train.lr * grads[k];
        }

        double val_loss = masked_ce(cfg, prep, params, g, split.val);
        val_losses.push_back(val_loss);
        if (val_loss < best_val) {
            best_val = val_loss;
            best_params = params;
            since_best = 0;
        } else {
            ++since_best;
        }
        if (cfg.train.patience > 0 && since_best >= cfg.train.patience) break;
    }

    TrainedModel m;
    m.config = cfg;
    m.names = param_names(cfg, g.feature_dim(), g.num_classes);
    m.params = std::move(best_params);
    m.prep = std::move(prep);
    m.graph_checksum = g.checksum;
    m.seed = seed;
    m.val_losses = std::move(val_losses);
    Matrix logits = eval_logits(m, g);
    m.train_accuracy = accuracy(logits, g.labels, split.train);
    m.val_accuracy = accuracy(logits, g.labels, split.val);
    return m;
}

namespace {

// Rough upper bound on cached tape bytes for one unrolled run.
size_t unroll_bytes(const ModelConfig& cfg, const Graph& g, int epochs) {
    const size_t n = static_cast<size_t>(g.n);
    const size_t d = static_cast<size_t>(g.feature_dim());
    size_t maxh = static_cast<size_t>(g.num_classes);
    for (int h : cfg.hidden) maxh = std::max(maxh, static_cast<size_t>(h));
    size_t per_epoch_nn = 0;
    if (cfg.kind == ModelKind::GnnGuard) per_epoch_nn = 20;
    if (cfg.kind == ModelKind::SoftMedianGdc) per_epoch_nn = 24;
    size_t nn_nodes = 20 + per_epoch_nn * static_cast<size_t>(epochs);
    size_t small = static_cast<size_t>(epochs) *
                   (12 * n * maxh + (cfg.kind == ModelKind::Rgcn ? 2 * n * d : n * d / 8));
    return 8 * (nn_nodes * n * n + small);
}

}  // namespace

MetaGradient unrolled_train_grad(const ModelConfig& cfg, const Graph& g, const Matrix& pert_sym,
                                 const DataSplit& split, LossKind loss,
                                 const std::vector<int>& attack_mask, const UnrollOptions& opts,
                                 const Preprocess* prep_in) {
    cfg.validate();
    if (opts.epochs < 0) throw ArgumentError("unrolled_train_grad: epochs must be >= 0");
    if (size_t need = unroll_bytes(cfg, g, opts.epochs); need > opts.memory_budget)
        throw ArgumentError("unrolled_train_grad: estimated memory " + std::to_string(need >> 20) +
                            " MiB exceeds the budget; lower the unrolled epoch count");

    ModelConfig run_cfg = cfg;
    if (!opts.dropout) run_cfg.dropout = 0.0;

    Preprocess local;
    if (!prep_in) local = make_preprocess(cfg, g);
    const Preprocess& prep = prep_in ? *prep_in : local;
    Matrix dense = g.dense_adj();

    ad::Tape t;
    ad::Var pert = t.leaf(pert_sym, "perturbation");
    ad::Var adj = t.constant(dense, "clean_adj");
    ad::Var flip_dir = t.constant(Matrix::Ones(g.n, g.n) - 2.0 * dense, "flip_dir");
    ad::Var relaxed = t.add(adj, t.mul(flip_dir, pert));
    ad::Var feats = t.constant(g.features, "features");

    std::vector<Matrix> theta0 =
        init_params(cfg, g.feature_dim(), g.num_classes, derive_seed(opts.seed, "meta_theta0"));
    std::vector<ad::Var> theta;
    theta.reserve(theta0.size());
    for (const Matrix& p : theta0) theta.push_back(t.constant(p, "theta0"));

    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        // the same stream every meta iteration: controlled training randomness
        std::mt19937_64 rng = make_rng(opts.seed, "unroll_epoch_" + std::to_string(epoch));
        ad::Var reg;
        ForwardOptions o;
        o.mode = Mode::Train;
        o.adaptive = true;
        o.rng = &rng;
        o.reg_out = &reg;
        ad::Var logits = model_forward(t, run_cfg, prep, theta, relaxed, feats, o, &dense);
        ad::Var train_loss = cross_entropy(t, logits, g.labels, split.train);
        if (reg.valid()) train_loss = t.add(train_loss, reg);
        std::vector<ad::Var> grads = t.grad_vars(train_loss, theta);
        for (size_t k = 0; k < theta.size(); ++k) {
            ad::Var step = t.add(grads[k], t.mul_scalar(theta[k], cfg.train.l2));
            theta[k] = t.sub(theta[k], t.mul_scalar(step, opts.lr));
        }
    }

    ForwardOptions fo;
    fo.mode = Mode::Eval;
    fo.adaptive = true;
    ad::Var logits = model_forward(t, run_cfg, prep, theta, relaxed, feats, fo, &dense);
    ad::Var attack = attack_loss(t, loss, logits, g.labels, attack_mask);

    MetaGradient out;
    out.loss = t.scalar_val(attack);
    out.grad = t.gradient(attack, pert);
    out.theta.reserve(theta.size());
    for (ad::Var v : theta) out.theta.push_back(t.val(v));
    return out;
}

}  // namespace gnnb
