#include "gnnb/models.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace gnnb {

namespace {
// Stability constants of the adaptive attack pathways.
constexpr double kAttackEpsVar = 1e-2;   // RGCN epsilon while unrolling training
constexpr double kAttackEpsStab = 1e-2;  // GNNGuard row-sum fallback threshold
constexpr double kNormEps = 1e-12;       // embedding-norm / distance guards
}  // namespace

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "gcn") return ModelKind::Gcn;
    if (s == "mlp") return ModelKind::Mlp;
    if (s == "jaccard_gcn") return ModelKind::JaccardGcn;
    if (s == "svd_gcn") return ModelKind::SvdGcn;
    if (s == "rgcn") return ModelKind::Rgcn;
    if (s == "gnnguard") return ModelKind::GnnGuard;
    if (s == "soft_median_gdc") return ModelKind::SoftMedianGdc;
    throw ArgumentError("unknown model kind: " + s);
}

std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::Gcn: return "gcn";
        case ModelKind::Mlp: return "mlp";
        case ModelKind::JaccardGcn: return "jaccard_gcn";
        case ModelKind::SvdGcn: return "svd_gcn";
        case ModelKind::Rgcn: return "rgcn";
        case ModelKind::GnnGuard: return "gnnguard";
        case ModelKind::SoftMedianGdc: return "soft_median_gdc";
    }
    return "?";
}

void TrainConfig::validate() const {
    if (lr <= 0) throw ArgumentError("train config: learning rate must be positive");
    if (optimizer != "adam" && optimizer != "sgd")
        throw ArgumentError("train config: unknown optimizer " + optimizer);
    if (max_epochs < 1) throw ArgumentError("train config: max_epochs must be >= 1");
    if (patience < 0 || patience > max_epochs)
        throw ArgumentError("train config: patience must be in [0, max_epochs]");
}

void ModelConfig::validate() const {
    train.validate();
    if (dropout < 0 || dropout >= 1) throw ArgumentError("model config: dropout must be in [0,1)");
    if (svd_rank < 1) throw ArgumentError("model config: svd rank must be >= 1");
    if (sm_temperature <= 0) throw ArgumentError("model config: temperature must be positive");
    if (ppr_alpha <= 0 || ppr_alpha >= 1)
        throw ArgumentError("model config: restart probability must be in (0,1)");
    if (ppr_topk < 1) throw ArgumentError("model config: top-k must be >= 1");
}

std::vector<int> ModelConfig::layer_dims(int in_dim, int num_classes) const {
    std::vector<int> dims{in_dim};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(num_classes);
    return dims;
}

ModelConfig tuned_config(ModelKind kind) {
    ModelConfig c;
    c.kind = kind;
    switch (kind) {
        case ModelKind::Gcn:
        case ModelKind::Mlp:
        case ModelKind::JaccardGcn:
            c.hidden = {64};
            c.dropout = 0.9;
            c.train.l2 = 1e-3;
            break;
        case ModelKind::SvdGcn:
            c.hidden = {64};
            c.dropout = 0.9;
            c.train.l2 = 1e-3;
            c.svd_rank = 50;
            break;
        case ModelKind::Rgcn:
            c.hidden = {32};
            c.dropout = 0.6;
            c.train.l2 = 1e-2;
            break;
        case ModelKind::GnnGuard:
            c.hidden = {16};
            c.dropout = 0.5;
            c.train.l2 = 5e-4;
            c.train.max_epochs = 81;
            c.train.patience = 0;
            break;
        case ModelKind::SoftMedianGdc:
            c.hidden = {64};
            c.dropout = 0.5;
            c.train.l2 = 1e-3;
            break;
    }
    return c;
}

ModelConfig untuned_config(ModelKind kind) {
    ModelConfig c = tuned_config(kind);
    switch (kind) {
        case ModelKind::Gcn:
        case ModelKind::Mlp:
            c.hidden = {16};
            c.dropout = 0.5;
            c.train.l2 = 5e-4;
            break;
        case ModelKind::JaccardGcn:
        case ModelKind::SvdGcn:
            c.hidden = {16};
            c.dropout = 0.5;
            c.train.l2 = 5e-4;
            c.train.patience = 200;
            break;
        case ModelKind::Rgcn:
            c.hidden = {16};
            c.train.l2 = 5e-4;
            break;
        case ModelKind::GnnGuard:
        case ModelKind::SoftMedianGdc:
            break;  // the reported settings are the reference ones
    }
    return c;
}

// --- standalone defense building blocks -----------------------------------------

Matrix jaccard_mask(const Matrix& features, double eps) {
    const Eigen::Index n = features.rows();
    Matrix bin = (features.array() != 0.0).cast<double>();
    Eigen::VectorXd popcount = bin.rowwise().sum();
    Matrix inter = bin * bin.transpose();
    Matrix mask = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            if (i == j) continue;
            double uni = popcount[i] + popcount[j] - inter(i, j);
            double jac = uni > 0 ? inter(i, j) / uni : 0.0;  // all-zero rows get J = 0
            if (jac > eps) mask(i, j) = 1.0;
        }
    return mask;
}

namespace {

struct EigenTopR {
    Matrix vectors;          // n x r
    Eigen::VectorXd values;  // r
};

// Top-r eigenpairs of a symmetric matrix ranked by |lambda|, i.e. its top-r
// singular triplets.
EigenTopR top_r_eigen(const Matrix& adj, int rank) {
    if (adj.rows() != adj.cols()) throw ArgumentError("low_rank_approx: matrix must be square");
    if (rank < 1 || rank > adj.rows()) throw ArgumentError("low_rank_approx: rank out of range");
    Eigen::SelfAdjointEigenSolver<Matrix> eig(adj);
    if (eig.info() != Eigen::Success)
        throw NumericError("low_rank_approx: eigendecomposition did not converge");
    const Eigen::Index n = adj.rows();
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const auto& ev = eig.eigenvalues();
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        double fa = std::abs(ev[a]), fb = std::abs(ev[b]);
        if (fa != fb) return fa > fb;
        return a < b;
    });
    if (rank < n &&
        std::abs(std::abs(ev[order[static_cast<size_t>(rank) - 1]]) -
                 std::abs(ev[order[static_cast<size_t>(rank)]])) < 1e-10) {
        std::cerr << "[gnnb] note: degenerate singular values at the rank-" << rank
                  << " cutoff; subspace basis is not unique\n";
    }
    EigenTopR out;
    out.vectors.resize(n, rank);
    out.values.resize(rank);
    for (int k = 0; k < rank; ++k) {
        out.vectors.col(k) = eig.eigenvectors().col(order[static_cast<size_t>(k)]);
        out.values[k] = ev[order[static_cast<size_t>(k)]];
    }
    return out;
}

}  // namespace

Matrix low_rank_approx(const Matrix& adj, int rank) {
    EigenTopR top = top_r_eigen(adj, rank);
    return top.vectors * top.values.asDiagonal() * top.vectors.transpose();
}

Matrix svd_subspace_weights(const Matrix& adj, int rank) {
    EigenTopR top = top_r_eigen(adj, rank);
    Eigen::VectorXd proj_diag = (top.vectors.array() * top.vectors.array()).rowwise().sum();
    const Eigen::Index n = adj.rows();
    Matrix w(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) w(i, j) = 0.5 * (proj_diag[i] + proj_diag[j]);
    return w;
}

Matrix ppr_topk(const Matrix& norm_adj, double alpha, int k) {
    if (alpha <= 0 || alpha >= 1) throw ArgumentError("ppr_topk: alpha must be in (0,1)");
    if (k < 1) throw ArgumentError("ppr_topk: k must be >= 1");
    const Eigen::Index n = norm_adj.rows();
    Matrix system = Matrix::Identity(n, n) - (1.0 - alpha) * norm_adj;
    Eigen::PartialPivLU<Matrix> lu(system);
    Matrix pi = alpha * lu.inverse();
    // cheap solve-quality probe; the system is nonsingular for alpha > 0
    Eigen::VectorXd probe = Eigen::VectorXd::LinSpaced(n, 0.3, 1.1);
    double resid = (system * (pi * probe) - alpha * probe).norm() / probe.norm();
    if (!pi.allFinite() || resid > 1e-6)
        throw NumericError("ppr_topk: linear solve failed (residual " + std::to_string(resid) +
                           ")");

    if (k >= n) return pi;
    Matrix out = Matrix::Zero(n, n);
    std::vector<int> idx(static_cast<size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        std::iota(idx.begin(), idx.end(), 0);
        std::nth_element(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
            if (pi(i, a) != pi(i, b)) return pi(i, a) > pi(i, b);
            return a < b;
        });
        double full = pi.row(i).sum();
        double kept = 0;
        for (int t = 0; t < k; ++t) kept += pi(i, idx[static_cast<size_t>(t)]);
        double scale = kept != 0.0 ? full / kept : 0.0;
        for (int t = 0; t < k; ++t)
            out(i, idx[static_cast<size_t>(t)]) = pi(i, idx[static_cast<size_t>(t)]) * scale;
    }
    return out;
}

namespace {

// Lower weighted median per dimension; same selection rule as the tape op.
Eigen::RowVectorXd weighted_median_row(const Eigen::RowVectorXd& weights, const Matrix& h) {
    const Eigen::Index nn = h.rows(), d = h.cols();
    Eigen::RowVectorXd med = Eigen::RowVectorXd::Zero(d);
    double total = 0;
    for (Eigen::Index k = 0; k < nn; ++k) total += std::max(weights[k], 0.0);
    if (total <= 0) return med;
    const double half = total / 2.0;
    std::vector<int> order(static_cast<size_t>(nn));
    for (Eigen::Index j = 0; j < d; ++j) {
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int x, int y) {
            if (h(x, j) != h(y, j)) return h(x, j) < h(y, j);
            return x < y;
        });
        double cum = 0;
        for (int k : order) {
            cum += std::max(weights[k], 0.0);
            if (cum >= half) {
                med[j] = h(k, j);
                break;
            }
        }
    }
    return med;
}

}  // namespace

Eigen::RowVectorXd soft_median_aggregate(const Eigen::RowVectorXd& weights, const Matrix& h,
                                         double temperature) {
    if (temperature <= 0) throw ArgumentError("soft_median_aggregate: temperature must be > 0");
    const Eigen::Index d = h.cols();
    const double wsum = weights.sum();
    if (wsum <= 0) return Eigen::RowVectorXd::Zero(d);
    Eigen::RowVectorXd med = weighted_median_row(weights, h);
    Eigen::VectorXd c(h.rows());
    for (Eigen::Index i = 0; i < h.rows(); ++i)
        c[i] = std::sqrt((med - h.row(i)).squaredNorm() + kNormEps);
    Eigen::ArrayXd score = -c.array() / (temperature * std::sqrt(static_cast<double>(d)));
    Eigen::ArrayXd soft = (score - score.maxCoeff()).exp();
    soft /= soft.sum();
    Eigen::ArrayXd w = weights.transpose().array() * soft;
    double scale = wsum / w.sum();
    return (w * scale).matrix().transpose() * h;
}

Matrix gnnguard_reweight(const Matrix& hidden, const Matrix& adj, const Matrix* prev_omega,
                         double rho, double eps_stab) {
    const Eigen::Index n = adj.rows();
    Eigen::VectorXd norms = hidden.rowwise().norm().cwiseMax(kNormEps);
    Matrix cos = norms.cwiseInverse().asDiagonal() * (hidden * hidden.transpose()) *
                 norms.cwiseInverse().asDiagonal();
    Matrix s = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j)
            if (cos(i, j) > 0.1) s(i, j) = adj(i, j) * cos(i, j);
    Eigen::VectorXd rowsum = s.rowwise().sum();
    for (Eigen::Index i = 0; i < n; ++i)
        if (rowsum[i] < eps_stab) rowsum[i] = 1.0;
    Matrix gamma = rowsum.cwiseInverse().asDiagonal() * s;
    Matrix gamma_hat = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double nnz = 0;
        for (Eigen::Index j = 0; j < n; ++j)
            if (gamma(i, j) != 0.0) ++nnz;
        for (Eigen::Index j = 0; j < n; ++j) {
            double v = gamma(i, j) + (i == j ? 1.0 / (1.0 + nnz) : 0.0);
            if (v != 0.0) gamma_hat(i, j) = std::exp(v);
        }
    }
    if (!prev_omega) return gamma_hat;
    double sig = 1.0 / (1.0 + std::exp(-rho));
    return sig * (*prev_omega) + (1.0 - sig) * gamma_hat;
}

// --- parameters and preprocessing -------------------------------------------------

std::vector<std::string> param_names(const ModelConfig& cfg, int in_dim, int num_classes) {
    std::vector<int> dims = cfg.layer_dims(in_dim, num_classes);
    std::vector<std::string> names;
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        if (cfg.kind == ModelKind::Rgcn) {
            names.push_back("Wm" + std::to_string(l));
            names.push_back("Wv" + std::to_string(l));
        } else {
            names.push_back("W" + std::to_string(l));
            names.push_back("b" + std::to_string(l));
        }
    }
    if (cfg.kind == ModelKind::GnnGuard) names.push_back("rho");
    return names;
}

std::vector<Matrix> init_params(const ModelConfig& cfg, int in_dim, int num_classes,
                                uint64_t seed) {
    std::vector<int> dims = cfg.layer_dims(in_dim, num_classes);
    std::mt19937_64 rng(derive_seed(seed, "init_params"));
    auto glorot = [&](int fan_in, int fan_out) {
        double bound = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-bound, bound);
        Matrix w(fan_in, fan_out);
        for (int i = 0; i < fan_in; ++i)
            for (int j = 0; j < fan_out; ++j) w(i, j) = dist(rng);
        return w;
    };
    std::vector<Matrix> params;
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        int din = dims[l], dout = dims[l + 1];
        if (cfg.kind == ModelKind::Rgcn) {
            params.push_back(glorot(din, dout));
            params.push_back(glorot(din, dout));
        } else {
            params.push_back(glorot(din, dout));
            params.push_back(Matrix::Zero(1, dout));
        }
    }
    if (cfg.kind == ModelKind::GnnGuard)
        params.push_back(Matrix::Constant(1, 1, cfg.guard_rho_init));
    return params;
}

Preprocess make_preprocess(const ModelConfig& cfg, const Graph& g) {
    Preprocess prep;
    switch (cfg.kind) {
        case ModelKind::JaccardGcn:
            prep.jaccard_mask = jaccard_mask(g.features, cfg.jaccard_eps);
            break;
        case ModelKind::SvdGcn: {
            int rank = std::min(cfg.svd_rank, g.n);
            Matrix dense = g.dense_adj();
            prep.lra = low_rank_approx(dense, rank);
            prep.svd_weights = svd_subspace_weights(dense, rank);
            break;
        }
        case ModelKind::SoftMedianGdc: {
            Matrix norm = Matrix(gcn_normalize_sparse(g.adj));
            prep.ppr = ppr_topk(norm, cfg.ppr_alpha, cfg.ppr_topk);
            break;
        }
        default:
            break;
    }
    return prep;
}

// --- forward pass ------------------------------------------------------------------

namespace {

using ad::Tape;
using ad::Var;

struct FwdCtx {
    Tape& t;
    const ModelConfig& cfg;
    const Preprocess& prep;
    std::span<const Var> params;
    const ForwardOptions& opt;
    int n;
    int num_classes;
    Var features;
    Var adj;                       // dense adjacency var; invalid on the fixed path
    const Graph* fixed = nullptr;  // set on the fixed-graph path
    const Matrix* clean_adj = nullptr;

    bool training() const { return opt.mode == Mode::Train; }
    std::mt19937_64& rng() const {
        if (!opt.rng) throw ArgumentError("model_forward: Train mode requires an rng");
        return *opt.rng;
    }
};

Var dropout(FwdCtx& c, Var h) {
    if (!c.training() || c.cfg.dropout <= 0.0) return h;
    const double keep = 1.0 - c.cfg.dropout;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Matrix mask(c.t.rows(h), c.t.cols(h));
    auto& rng = c.rng();
    for (Eigen::Index i = 0; i < mask.rows(); ++i)
        for (Eigen::Index j = 0; j < mask.cols(); ++j)
            mask(i, j) = unif(rng) < keep ? 1.0 / keep : 0.0;
    return c.t.mul(h, c.t.constant(std::move(mask), "dropout"));
}

Matrix gaussian_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Matrix r(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) r(i, j) = normal(rng);
    return r;
}

// Row-wise top-k 0/1 mask over current forward values.
Matrix topk_mask(const Matrix& pi, int k) {
    const Eigen::Index n = pi.rows();
    if (k >= pi.cols()) return Matrix::Ones(n, pi.cols());
    Matrix mask = Matrix::Zero(n, pi.cols());
    std::vector<int> idx(static_cast<size_t>(pi.cols()));
    for (Eigen::Index i = 0; i < n; ++i) {
        std::iota(idx.begin(), idx.end(), 0);
        std::nth_element(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
            if (pi(i, a) != pi(i, b)) return pi(i, a) > pi(i, b);
            return a < b;
        });
        for (int t = 0; t < k; ++t) mask(i, idx[static_cast<size_t>(t)]) = 1.0;
    }
    return mask;
}

using Propagate = std::function<Var(Var)>;

// Shared GCN layer stack; dropout after the hidden activations, none on the
// logits layer.
Var gcn_stack(FwdCtx& c, const Propagate& prop) {
    std::vector<int> dims = c.cfg.layer_dims(c.t.cols(c.features), c.num_classes);
    Var h = c.features;
    const size_t layers = dims.size() - 1;
    for (size_t l = 0; l < layers; ++l) {
        Var z = c.t.add_row_vec(prop(c.t.matmul(h, c.params[2 * l])), c.params[2 * l + 1]);
        h = l + 1 < layers ? dropout(c, c.t.relu(z)) : z;
    }
    return h;
}

Var forward_mlp(FwdCtx& c) {
    return gcn_stack(c, [](Var v) { return v; });
}

Var forward_gcn(FwdCtx& c) {
    if (c.fixed) {
        int sid = c.t.sparse_constant(gcn_normalize_sparse(c.fixed->adj));
        return gcn_stack(c, [&c, sid](Var v) { return c.t.spmm(sid, v); });
    }
    Var norm = gcn_normalize(c.t, c.adj);
    return gcn_stack(c, [&c, norm](Var v) { return c.t.matmul(norm, v); });
}

Var forward_jaccard(FwdCtx& c) {
    if (c.fixed) {
        SparseMatrix masked = c.fixed->adj;
        for (int col = 0; col < masked.outerSize(); ++col)
            for (SparseMatrix::InnerIterator it(masked, col); it; ++it)
                it.valueRef() *= c.prep.jaccard_mask(it.row(), it.col());
        masked.prune(0.0);
        int sid = c.t.sparse_constant(gcn_normalize_sparse(masked));
        return gcn_stack(c, [&c, sid](Var v) { return c.t.spmm(sid, v); });
    }
    Var masked = c.t.mul(c.adj, c.t.constant(c.prep.jaccard_mask, "jaccard_mask"));
    Var norm = gcn_normalize(c.t, masked);
    return gcn_stack(c, [&c, norm](Var v) { return c.t.matmul(norm, v); });
}

Var forward_svd(FwdCtx& c) {
    if (c.fixed) {
        // Factored propagation with N = S (A_r + I) S and A_r = V diag(lambda) V^T.
        EigenTopR top = top_r_eigen(c.fixed->dense_adj(), std::min(c.cfg.svd_rank, c.fixed->n));
        Eigen::VectorXd deg = c.prep.lra.rowwise().sum().cwiseMax(0.0);
        Eigen::VectorXd s = (deg.array() + 1.0).pow(-0.5);
        Var sv = c.t.constant(s, "svd_s");
        Var s2 = c.t.constant((s.array() * s.array()).matrix(), "svd_s2");
        Var vl = c.t.constant(top.vectors * top.values.asDiagonal(), "svd_vl");
        Var vt = c.t.constant(top.vectors.transpose(), "svd_vt");
        return gcn_stack(c, [&c, sv, s2, vl, vt](Var v) {
            Var low = c.t.scale_rows(c.t.matmul(vl, c.t.matmul(vt, c.t.scale_rows(v, sv))), sv);
            return c.t.add(low, c.t.scale_rows(v, s2));
        });
    }
    Var effective;
    if (c.opt.adaptive) {
        if (!c.clean_adj)
            throw ArgumentError("model_forward: SvdGcn adaptive path needs the clean adjacency");
        Var delta = c.t.sub(c.adj, c.t.constant(*c.clean_adj, "clean_adj"));
        effective = c.t.add(c.t.constant(c.prep.lra, "lra"),
                            c.t.mul(delta, c.t.constant(c.prep.svd_weights, "svd_w")));
    } else {
        // True defense on a dense adjacency: recompute the LRA of its values.
        effective = c.t.constant(low_rank_approx(c.t.val(c.adj), std::min(c.cfg.svd_rank, c.n)),
                                 "lra_eval");
    }
    Var norm = gcn_normalize(c.t, effective, /*clamp_degrees=*/true);
    return gcn_stack(c, [&c, norm](Var v) { return c.t.matmul(norm, v); });
}

Var forward_rgcn(FwdCtx& c) {
    Tape& t = c.t;
    std::vector<int> dims = c.cfg.layer_dims(t.cols(c.features), c.num_classes);
    const size_t layers = dims.size() - 1;

    Propagate prop_mean, prop_var;
    if (c.fixed) {
        int sid1 = t.sparse_constant(gcn_normalize_sparse(c.fixed->adj));
        int sid2 = t.sparse_constant(rw_square_normalize_sparse(c.fixed->adj));
        prop_mean = [&t, sid1](Var v) { return t.spmm(sid1, v); };
        prop_var = [&t, sid2](Var v) { return t.spmm(sid2, v); };
    } else {
        Var n1 = gcn_normalize(t, c.adj);
        Var n2 = rw_square_normalize(t, c.adj);
        prop_mean = [&t, n1](Var v) { return t.matmul(n1, v); };
        prop_var = [&t, n2](Var v) { return t.matmul(n2, v); };
    }

    const double eps =
        c.opt.adaptive ? std::max(c.cfg.rgcn_eps_var, kAttackEpsVar) : c.cfg.rgcn_eps_var;
    Var mean = c.features, var = c.features;
    Var kl_mean, kl_var;
    for (size_t l = 0; l < layers; ++l) {
        Var mhat = t.elu(t.matmul(dropout(c, mean), c.params[2 * l]));
        Var vhat = t.relu(t.matmul(dropout(c, var), c.params[2 * l + 1]));
        if (l == 0) {
            kl_mean = mhat;
            kl_var = vhat;
        }
        Var alpha = t.exp(t.mul_scalar(vhat, -c.cfg.rgcn_gamma));
        mean = prop_mean(t.mul(mhat, alpha));
        var = prop_var(t.mul(vhat, t.mul(alpha, alpha)));
    }

    if (c.training() && c.opt.reg_out) {
        // beta * sum_i KL(N(mhat_i, diag vhat_i) || N(0, I))
        Var inner = t.sub(t.add(t.mul(kl_mean, kl_mean), kl_var),
                          t.add_scalar(t.log(t.add_scalar(kl_var, eps)), 1.0));
        *c.opt.reg_out = t.mul_scalar(t.sum(inner), 0.5 * c.cfg.rgcn_beta);
    }

    if (!c.training()) return mean;  // deterministic point estimate
    if (t.val(var).minCoeff() < 0.0)
        std::cerr << "[gnnb] note: negative variance clamped to zero in rgcn forward\n";
    Var spread = t.sqrt(t.add_scalar(t.clamp_min(var, 0.0), eps));
    Var noise = t.constant(gaussian_matrix(c.rng(), c.n, c.num_classes), "rgcn_noise");
    return t.add(mean, t.mul(noise, spread));
}

// GNNGuard steps (1)-(4) on the tape. The hard filter and the nonzero pattern
// enter as value-derived constant masks, which keeps the exact local
// derivative for every surviving entry.
Var guard_omega(FwdCtx& c, Var hidden, Var adj_raw, Var prev_omega, Var rho, double eps_stab) {
    Tape& t = c.t;
    Var norms = t.clamp_min(t.sqrt(t.row_sum(t.mul(hidden, hidden))), kNormEps);
    Var inv = t.pow_scalar(norms, -1.0);
    Var cos = t.scale_cols(t.scale_rows(t.matmul(hidden, t.transpose(hidden)), inv), inv);
    Var s = t.mul(t.mul(adj_raw, cos), t.step(t.add_scalar(cos, -0.1)));
    Var rowsum = t.row_sum(s);
    Var below = t.step(t.add_scalar(t.neg(rowsum), eps_stab));  // 1 where rowsum < eps
    Var safe = t.add(t.mul(rowsum, t.add_scalar(t.neg(below), 1.0)), below);
    Var gamma = t.scale_rows(s, t.pow_scalar(safe, -1.0));

    const Matrix& gval = t.val(gamma);
    Eigen::VectorXd diag_term(c.n);
    for (int i = 0; i < c.n; ++i) {
        double nnz = 0;
        for (int j = 0; j < c.n; ++j)
            if (gval(i, j) != 0.0) ++nnz;
        diag_term[static_cast<Eigen::Index>(i)] = 1.0 / (1.0 + nnz);
    }
    Var gamma_d = t.add(gamma, t.constant(Matrix(diag_term.asDiagonal()), "guard_diag"));
    Matrix nz = (t.val(gamma_d).array() != 0.0).cast<double>();
    Var gamma_hat = t.mul(t.exp(gamma_d), t.constant(std::move(nz), "guard_nz"));
    if (c.training()) gamma_hat = t.stop_grad(gamma_hat);

    if (!prev_omega.valid()) return gamma_hat;
    Var sig = t.pow_scalar(t.add_scalar(t.exp(t.neg(rho)), 1.0), -1.0);
    Var sig_m = t.broadcast_scalar(sig, c.n, c.n);
    Var one_minus = t.broadcast_scalar(t.add_scalar(t.neg(sig), 1.0), c.n, c.n);
    return t.add(t.mul(sig_m, prev_omega), t.mul(one_minus, gamma_hat));
}

Var forward_guard(FwdCtx& c) {
    Tape& t = c.t;
    Var adj_raw = c.fixed ? t.constant(c.fixed->dense_adj(), "adj_raw") : c.adj;
    const double eps_stab = c.opt.adaptive ? kAttackEpsStab : c.cfg.guard_eps_stab;
    std::vector<int> dims = c.cfg.layer_dims(t.cols(c.features), c.num_classes);
    const size_t layers = dims.size() - 1;
    Var rho = c.params[c.params.size() - 1];
    Var h = c.features;
    Var omega;
    for (size_t l = 0; l < layers; ++l) {
        omega = guard_omega(c, h, adj_raw, omega, rho, eps_stab);
        Var deg = t.row_sum(omega);
        Var sv = t.pow_scalar(deg, -0.5);
        Var norm = t.scale_cols(t.scale_rows(omega, sv), sv);
        Var z = t.add_row_vec(t.matmul(norm, t.matmul(h, c.params[2 * l])), c.params[2 * l + 1]);
        h = l + 1 < layers ? dropout(c, t.relu(z)) : z;
    }
    return h;
}

Var forward_smgdc(FwdCtx& c) {
    Tape& t = c.t;
    Var prop;
    if (c.fixed) {
        prop = t.constant(c.prep.ppr, "ppr");
    } else {
        Var norm = gcn_normalize(t, c.adj);
        Var system = t.sub(t.constant(Matrix::Identity(c.n, c.n), "eye"),
                           t.mul_scalar(norm, 1.0 - c.cfg.ppr_alpha));
        Var pi = t.mul_scalar(t.inverse(system), c.cfg.ppr_alpha);
        Var kept = t.mul(pi, t.constant(topk_mask(t.val(pi), c.cfg.ppr_topk), "topk"));
        Var scale = t.div(t.row_sum(pi), t.row_sum(kept));
        prop = t.scale_rows(kept, scale);
    }

    std::vector<int> dims = c.cfg.layer_dims(t.cols(c.features), c.num_classes);
    const size_t layers = dims.size() - 1;
    Var h = c.features;
    for (size_t l = 0; l < layers; ++l) {
        Var z = t.matmul(h, c.params[2 * l]);
        const double dim = static_cast<double>(t.cols(z));
        // distances from each row's weighted median to every node; entries
        // outside the propagation support cancel in the rescaling below
        Var med = t.weighted_median(prop, z);
        Var m2 = t.row_sum(t.mul(med, med));
        Var z2 = t.row_sum(t.mul(z, z));
        Var cross = t.matmul(med, t.transpose(z));
        Var dist2 = t.add(t.sub(t.broadcast_col(m2, c.n), t.mul_scalar(cross, 2.0)),
                          t.transpose(t.broadcast_col(z2, c.n)));
        Var dist = t.sqrt(t.add_scalar(t.clamp_min(dist2, 0.0), kNormEps));
        Var soft =
            t.row_softmax(t.mul_scalar(dist, -1.0 / (c.cfg.sm_temperature * std::sqrt(dim))));
        Var w = t.mul(prop, soft);
        Var rescale = t.div(t.row_sum(prop), t.row_sum(w));
        Var agg = t.matmul(t.scale_rows(w, rescale), z);
        Var zb = t.add_row_vec(agg, c.params[2 * l + 1]);
        h = l + 1 < layers ? dropout(c, t.relu(zb)) : zb;
    }
    return h;
}

Var dispatch(FwdCtx& c) {
    Var logits;
    switch (c.cfg.kind) {
        case ModelKind::Gcn: logits = forward_gcn(c); break;
        case ModelKind::Mlp: logits = forward_mlp(c); break;
        case ModelKind::JaccardGcn: logits = forward_jaccard(c); break;
        case ModelKind::SvdGcn: logits = forward_svd(c); break;
        case ModelKind::Rgcn: logits = forward_rgcn(c); break;
        case ModelKind::GnnGuard: logits = forward_guard(c); break;
        case ModelKind::SoftMedianGdc: logits = forward_smgdc(c); break;
    }
    if (!c.t.val(logits).allFinite())
        throw NumericError("model_forward: NaN in logits (" + to_string(c.cfg.kind) + ")");
    return logits;
}

int classes_from_params(const ModelConfig& cfg, ad::Tape& t, std::span<const Var> params) {
    size_t last = params.size() - (cfg.kind == ModelKind::GnnGuard ? 2 : 1);
    return t.cols(params[last]);
}

}  // namespace

ad::Var model_forward(ad::Tape& t, const ModelConfig& cfg, const Preprocess& prep,
                      std::span<const ad::Var> params, ad::Var adjacency, ad::Var features,
                      const ForwardOptions& opts, const Matrix* clean_adj) {
    cfg.validate();
    FwdCtx c{t,
             cfg,
             prep,
             params,
             opts,
             t.rows(features),
             classes_from_params(cfg, t, params),
             features,
             adjacency,
             nullptr,
             clean_adj};
    return dispatch(c);
}

ad::Var model_forward(ad::Tape& t, const ModelConfig& cfg, const Preprocess& prep,
                      std::span<const ad::Var> params, const Graph& g,
                      const ForwardOptions& opts) {
    cfg.validate();
    FwdCtx c{t,
             cfg,
             prep,
             params,
             opts,
             g.n,
             g.num_classes,
             t.constant(g.features, "features"),
             ad::Var{},
             &g,
             nullptr};
    return dispatch(c);
}

Matrix eval_logits(const TrainedModel& m, const Graph& g) {
    Preprocess local;
    const Preprocess* prep = &m.prep;
    if (g.checksum != m.graph_checksum) {
        local = make_preprocess(m.config, g);
        prep = &local;
    }
    ad::Tape t;
    std::vector<ad::Var> params;
    params.reserve(m.params.size());
    for (const Matrix& p : m.params) params.push_back(t.constant(p, "param"));
    ForwardOptions opts;
    opts.mode = Mode::Eval;
    ad::Var logits = model_forward(t, m.config, *prep, params, g, opts);
    return t.val(logits);
}

ad::Var attack_forward(ad::Tape& t, const TrainedModel& m, const Graph& g, ad::Var pert_sym) {
    if (g.checksum != m.graph_checksum)
        throw ArgumentError("attack_forward: model was trained on a different graph");
    Matrix dense = g.dense_adj();
    ad::Var adj = t.constant(dense, "clean_adj");
    ad::Var flip_dir = t.constant(Matrix::Ones(g.n, g.n) - 2.0 * dense, "flip_dir");
    ad::Var relaxed = t.add(adj, t.mul(flip_dir, pert_sym));
    std::vector<ad::Var> params;
    params.reserve(m.params.size());
    for (const Matrix& p : m.params) params.push_back(t.constant(p, "param"));
    ForwardOptions opts;
    opts.mode = Mode::Eval;
    opts.adaptive = true;
    ad::Var feats = t.constant(g.features, "features");
    ad::Var logits = model_forward(t, m.config, m.prep, params, relaxed, feats, opts, &dense);
    return logits;
}

}  // namespace gnnb
