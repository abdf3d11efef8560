#include <doctest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"

using namespace gnnb;
using gnnb::test::interior_perturbation;
using gnnb::test::small_graph;
using gnnb::test::untrained_model;

namespace {

const std::vector<ModelKind> kAllKinds{ModelKind::Gcn,      ModelKind::Mlp,
                                       ModelKind::JaccardGcn, ModelKind::SvdGcn,
                                       ModelKind::Rgcn,     ModelKind::GnnGuard,
                                       ModelKind::SoftMedianGdc};

}  // namespace

TEST_CASE("tuned configs carry the reference hyperparameters") {
    ModelConfig gcn = tuned_config(ModelKind::Gcn);
    CHECK(gcn.hidden == std::vector<int>{64});
    CHECK(gcn.dropout == 0.9);
    CHECK(gcn.train.l2 == 1e-3);
    CHECK(gcn.train.lr == 0.01);
    CHECK(gcn.train.max_epochs == 3000);
    CHECK(gcn.train.patience == 50);

    ModelConfig untuned = untuned_config(ModelKind::Gcn);
    CHECK(untuned.hidden == std::vector<int>{16});
    CHECK(untuned.dropout == 0.5);
    CHECK(untuned.train.l2 == 5e-4);

    CHECK(tuned_config(ModelKind::SvdGcn).svd_rank == 50);
    CHECK(tuned_config(ModelKind::Rgcn).hidden == std::vector<int>{32});
    CHECK(tuned_config(ModelKind::Rgcn).train.l2 == 1e-2);
    CHECK(tuned_config(ModelKind::GnnGuard).train.max_epochs == 81);
    CHECK(tuned_config(ModelKind::GnnGuard).train.patience == 0);
    CHECK(tuned_config(ModelKind::SoftMedianGdc).ppr_alpha == 0.15);
    CHECK(tuned_config(ModelKind::SoftMedianGdc).ppr_topk == 64);
    CHECK(tuned_config(ModelKind::SoftMedianGdc).sm_temperature == 0.5);
}

TEST_CASE("gcn forward: zero weights give zero logits") {
    Graph g = small_graph(1);
    ModelConfig cfg = test::small_config(ModelKind::Gcn);
    TrainedModel m = untrained_model(cfg, g, 3);
    for (Matrix& p : m.params) p.setZero();
    CHECK(eval_logits(m, g).norm() == 0.0);
}

TEST_CASE("gcn forward matches hand computation on a two-node graph") {
    Matrix x(2, 2);
    x << 1.0, 2.0, -1.0, 0.5;
    Graph g = Graph::build(2, 2, {{0, 1}}, x, {0, 1});
    ModelConfig cfg = tuned_config(ModelKind::Gcn);
    cfg.hidden = {};  // single layer: logits = N X W + b
    TrainedModel m = untrained_model(cfg, g, 5);
    Matrix w(2, 2);
    w << 0.3, -0.2, 0.1, 0.4;
    Matrix b(1, 2);
    b << 0.05, -0.05;
    m.params = {w, b};

    Matrix norm(2, 2);
    norm << 0.5, 0.5, 0.5, 0.5;
    Matrix expect = (norm * x * w).rowwise() + b.row(0);
    CHECK((eval_logits(m, g) - expect).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("jaccard_mask formula and threshold") {
    Matrix x(4, 3);
    x << 1, 1, 0,   // node 0
         1, 0, 1,   // node 1: J(0,1) = 1/3
         1, 1, 0,   // node 2: identical to 0 -> J = 1
         0, 0, 0;   // node 3: empty -> J = 0 everywhere
    Matrix m0 = jaccard_mask(x, 0.0);
    CHECK(m0(0, 1) == 1.0);  // 1/3 > 0
    CHECK(m0(0, 2) == 1.0);  // J = 1
    CHECK(m0(0, 3) == 0.0);  // all-zero row
    CHECK(m0(3, 0) == 0.0);
    Matrix m_third = jaccard_mask(x, 1.0 / 3.0);
    CHECK(m_third(0, 1) == 0.0);  // dropped at J <= eps
    CHECK(m_third(0, 2) == 1.0);

    // disjoint supports dropped at eps = 0
    Matrix y(2, 2);
    y << 1, 0, 0, 1;
    CHECK(jaccard_mask(y, 0.0)(0, 1) == 0.0);
}

TEST_CASE("jaccard_mask monotone in eps") {
    Graph g = small_graph(9);
    Matrix lo = jaccard_mask(g.features, 0.0);
    Matrix mid = jaccard_mask(g.features, 0.2);
    Matrix hi = jaccard_mask(g.features, 0.5);
    CHECK(((lo - mid).array() >= 0.0).all());
    CHECK(((mid - hi).array() >= 0.0).all());
}

TEST_CASE("low_rank_approx limits and Eckart-Young error") {
    Graph g = small_graph(21, 4, 0.7, 0.3);
    Matrix a = g.dense_adj();
    CHECK((low_rank_approx(a, g.n) - a).cwiseAbs().maxCoeff() < 1e-8);

    // rank-1 outer product reconstructed exactly at r = 1
    Eigen::VectorXd v = Eigen::VectorXd::LinSpaced(5, 0.2, 1.0);
    Matrix rank1 = v * v.transpose();
    CHECK((low_rank_approx(rank1, 1) - rank1).cwiseAbs().maxCoeff() < 1e-10);

    // Frobenius error equals the l2 norm of the discarded singular values
    Graph g8 = small_graph(22, 4, 0.6, 0.25);
    Matrix a8 = g8.dense_adj();
    int r = 3;
    Eigen::SelfAdjointEigenSolver<Matrix> eig(a8);
    std::vector<double> sv;
    for (int i = 0; i < a8.rows(); ++i) sv.push_back(std::abs(eig.eigenvalues()[i]));
    std::sort(sv.begin(), sv.end(), std::greater<>());
    double expect2 = 0;
    for (size_t k = static_cast<size_t>(r); k < sv.size(); ++k) expect2 += sv[k] * sv[k];
    double err = (low_rank_approx(a8, r) - a8).norm();
    CHECK(err == doctest::Approx(std::sqrt(expect2)).epsilon(1e-9));
}

TEST_CASE("svd_subspace_weights: full rank, symmetry, star oracle") {
    Graph g = small_graph(31);
    Matrix w_full = svd_subspace_weights(g.dense_adj(), g.n);
    CHECK((w_full.array() - 1.0).abs().maxCoeff() < 1e-10);

    Matrix w = svd_subspace_weights(g.dense_adj(), 3);
    CHECK((w - w.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(w.minCoeff() >= 0.0);
    CHECK(w.maxCoeff() <= 1.0 + 1e-12);

    // 5-node star, r = 1: oracle projector from power iteration. The star's
    // spectrum is {2, -2, 0...}; shifting by 2I isolates the +2 eigenvector,
    // whose squared components match either choice of the degenerate pair.
    Matrix star = Matrix::Zero(5, 5);
    for (int leaf = 1; leaf < 5; ++leaf) star(0, leaf) = star(leaf, 0) = 1.0;
    Matrix shifted = star + 2.0 * Matrix::Identity(5, 5);
    Eigen::VectorXd v = Eigen::VectorXd::Ones(5).normalized();
    for (int it = 0; it < 2000; ++it) v = (shifted * v).normalized();
    Matrix w1 = svd_subspace_weights(star, 1);
    for (int j = 0; j < 5; ++j)
        CHECK(w1(0, j) == doctest::Approx(0.5 * (v[0] * v[0] + v[j] * v[j])).epsilon(1e-8));
}

TEST_CASE("ppr_topk limits and hand checks") {
    Matrix one = Matrix::Ones(1, 1);  // normalized single node
    CHECK(ppr_topk(one, 0.15, 4)(0, 0) == doctest::Approx(1.0));

    // 4-cycle at alpha -> 1: strongly diagonal
    Graph cyc = Graph::build(4, 1, {{0, 1}, {1, 2}, {2, 3}, {0, 3}}, Matrix::Zero(4, 2),
                             {0, 0, 0, 0});
    Matrix norm = Matrix(gcn_normalize_sparse(cyc.adj));
    Matrix pi = ppr_topk(norm, 0.99, 4);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            if (i != j) CHECK(std::abs(pi(i, j)) < 0.01);

    // direct solve oracle at a moderate alpha
    Matrix sys = Matrix::Identity(4, 4) - 0.85 * norm;
    Matrix expect = 0.15 * sys.inverse();
    CHECK((ppr_topk(norm, 0.15, 4) - expect).cwiseAbs().maxCoeff() < 1e-10);

    // top-k keeps pre-truncation row sums
    Graph g = small_graph(41);
    Matrix norm2 = Matrix(gcn_normalize_sparse(g.adj));
    Matrix full = ppr_topk(norm2, 0.15, g.n);
    Matrix trunc = ppr_topk(norm2, 0.15, 3);
    for (int i = 0; i < g.n; ++i) {
        CHECK(trunc.row(i).sum() == doctest::Approx(full.row(i).sum()).epsilon(1e-10));
        int nnz = 0;
        for (int j = 0; j < g.n; ++j)
            if (trunc(i, j) != 0.0) ++nnz;
        CHECK(nnz <= 3);
    }
}

TEST_CASE("soft_median_aggregate oracle cases") {
    // identical neighbors: aggregate equals that value scaled by the weights
    Matrix h = Matrix::Ones(3, 2) * 0.7;
    Eigen::RowVectorXd w(3);
    w << 0.5, 0.3, 0.2;
    Eigen::RowVectorXd out = soft_median_aggregate(w, h, 0.5);
    CHECK(out(0) == doctest::Approx(0.7 * w.sum()).epsilon(1e-9));

    // T -> infinity reduces to the plain weighted mean
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    Matrix h2(4, 3);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) h2(i, j) = dist(rng);
    Eigen::RowVectorXd w2(4);
    w2 << 0.1, 0.4, 0.2, 0.3;
    Eigen::RowVectorXd mean = w2 * h2;
    CHECK((soft_median_aggregate(w2, h2, 1e6) - mean).cwiseAbs().maxCoeff() < 1e-6);

    // outlier gets the strictly smallest weight; brute-force script oracle
    Matrix h3(3, 2);
    h3 << 0.0, 0.1, 0.1, 0.0, 5.0, 5.0;  // row 2 is the outlier
    Eigen::RowVectorXd w3(3);
    w3 << 1.0, 1.0, 1.0;
    const double temp = 0.5;
    // script: weighted median per dim, distances, softmax, rescale. Per dim
    // the sorted values are {0, 0.1, 5} with unit weights; the cumulative
    // weight crosses 1.5 at the second element, so the median is 0.1.
    Eigen::RowVectorXd med(2);
    med << 0.1, 0.1;
    Eigen::VectorXd c(3);
    for (int i = 0; i < 3; ++i)
        c[i] = std::sqrt((med - h3.row(i)).squaredNorm() + 1e-12);
    Eigen::ArrayXd soft = (-c.array() / (temp * std::sqrt(2.0)));
    soft = (soft - soft.maxCoeff()).exp();
    soft /= soft.sum();
    Eigen::ArrayXd scaled = soft * 3.0 / soft.sum();
    Eigen::RowVectorXd expect = (scaled.matrix().transpose() * h3) / 1.0;
    Eigen::RowVectorXd got = soft_median_aggregate(w3, h3, temp);
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(soft[2] < soft[0]);
    CHECK(soft[2] < soft[1]);
}

TEST_CASE("gnnguard_reweight oracle cases") {
    // identical embeddings: cos = 1 everywhere, nothing removed
    Matrix h = Matrix::Ones(3, 2);
    Matrix path = Matrix::Zero(3, 3);
    path(0, 1) = path(1, 0) = path(1, 2) = path(2, 1) = 1.0;
    Matrix omega = gnnguard_reweight(h, path, nullptr, 0.0, 1e-6);
    CHECK(omega(0, 1) > 0.0);
    CHECK(omega(1, 2) > 0.0);

    // orthogonal embeddings: everything removed, only the diagonal term stays
    Matrix ho = Matrix::Identity(3, 3);
    Matrix omega_o = gnnguard_reweight(ho, path, nullptr, 0.0, 1e-6);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            if (i != j) CHECK(omega_o(i, j) == 0.0);
    CHECK(omega_o(0, 0) == doctest::Approx(std::exp(1.0)));  // no nonzeros: 1/(1+0)

    // 3-node path with hand-set embeddings against an independent script
    Matrix hh(3, 2);
    hh << 1.0, 0.0, 0.8, 0.6, 0.0, 1.0;
    Matrix got = gnnguard_reweight(hh, path, nullptr, 0.3, 1e-6);
    // script: cos(0,1) = 0.8, cos(1,2) = 0.6, cos(0,2) = 0 (dropped)
    Matrix s = Matrix::Zero(3, 3);
    s(0, 1) = s(1, 0) = 0.8;
    s(1, 2) = s(2, 1) = 0.6;
    Eigen::Vector3d rowsum(0.8, 1.4, 0.6);
    Matrix gamma = rowsum.cwiseInverse().asDiagonal() * s;
    Matrix expect = Matrix::Zero(3, 3);
    Eigen::Vector3d nnz(1, 2, 1);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double v = gamma(i, j) + (i == j ? 1.0 / (1.0 + nnz[i]) : 0.0);
            if (v != 0.0) expect(i, j) = std::exp(v);
        }
    CHECK((got - expect).cwiseAbs().maxCoeff() < 1e-12);

    // smoothing with a previous omega
    Matrix prev = Matrix::Constant(3, 3, 0.5);
    Matrix smoothed = gnnguard_reweight(hh, path, &prev, 0.3, 1e-6);
    double sig = 1.0 / (1.0 + std::exp(-0.3));
    CHECK((smoothed - (sig * prev + (1 - sig) * expect)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rgcn with gamma = 0 reduces to an elu GCN without bias (mean path)") {
    Graph g = small_graph(51);
    ModelConfig cfg = test::small_config(ModelKind::Rgcn);
    cfg.rgcn_gamma = 0.0;
    TrainedModel m = untrained_model(cfg, g, 13);
    Matrix norm = Matrix(gcn_normalize_sparse(g.adj));
    Matrix mean = g.features;
    for (size_t l = 0; l + 1 < m.params.size() + 1; l += 2) {
        Matrix pre = mean * m.params[l];
        mean = norm * pre.unaryExpr([](double x) { return x > 0 ? x : std::expm1(x); });
    }
    CHECK((eval_logits(m, g) - mean).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("rgcn KL term matches the closed form at zero variance") {
    Graph g = small_graph(52);
    ModelConfig cfg = test::small_config(ModelKind::Rgcn);
    cfg.dropout = 0.0;
    TrainedModel m = untrained_model(cfg, g, 14);
    m.params[1].setZero();  // Wv of layer 1 -> vhat = 0

    ad::Tape t;
    std::vector<ad::Var> pv;
    for (const Matrix& p : m.params) pv.push_back(t.constant(p, "p"));
    std::mt19937_64 rng(1);
    ad::Var reg;
    ForwardOptions o;
    o.mode = Mode::Train;
    o.rng = &rng;
    o.reg_out = &reg;
    (void)model_forward(t, cfg, m.prep, pv, g, o);
    REQUIRE(reg.valid());

    // independent script: 0.5 * beta * sum(mhat^2 - 1 - log(eps))
    Matrix mhat = (g.features * m.params[0])
                      .unaryExpr([](double x) { return x > 0 ? x : std::expm1(x); });
    double eps = cfg.rgcn_eps_var;
    double expect = 0.5 * cfg.rgcn_beta *
                    (mhat.array().square().sum() +
                     mhat.size() * (0.0 - 1.0 - std::log(eps)));
    CHECK(t.scalar_val(reg) == doctest::Approx(expect).epsilon(1e-10));
}

TEST_CASE("attack-mode forward at zero perturbation equals eval forward") {
    Graph g = small_graph(61, 7, 0.5, 0.12);
    for (ModelKind kind : kAllKinds) {
        CAPTURE(to_string(kind));
        ModelConfig cfg = test::small_config(kind);
        TrainedModel m = untrained_model(cfg, g, 17);
        Matrix expected = eval_logits(m, g);
        ad::Tape t;
        ad::Var pert = t.leaf(Matrix::Zero(g.n, g.n), "pert");
        Matrix got = t.val(attack_forward(t, m, g, pert));
        CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("attack-mode gradients pass finite-difference checks") {
    Graph g = small_graph(62, 6, 0.5, 0.15);
    std::vector<std::pair<int, int>> coords;
    std::mt19937_64 crng(5);
    auto pairs = test::upper_pairs(g.n);
    std::sample(pairs.begin(), pairs.end(), std::back_inserter(coords), 25, crng);

    for (ModelKind kind : kAllKinds) {
        CAPTURE(to_string(kind));
        ModelConfig cfg = test::small_config(kind);
        TrainedModel m = untrained_model(cfg, g, 19);
        Matrix point = interior_perturbation(g, 77);

        ad::Tape t;
        ad::Var pert = t.leaf(point, "pert");
        ad::Var logits = attack_forward(t, m, g, pert);
        ad::Var loss = attack_loss(t, LossKind::TLM, logits, g.labels,
                                   std::vector<int>{0, 1, 3, 5, 7});
        Matrix analytic = t.gradient(loss, pert);

        auto f = [&](const Matrix& p) {
            ad::Tape t2;
            ad::Var pv = t2.leaf(p, "pert");
            ad::Var lg = attack_forward(t2, m, g, pv);
            return t2.scalar_val(
                attack_loss(t2, LossKind::TLM, lg, g.labels, std::vector<int>{0, 1, 3, 5, 7}));
        };
        Matrix sym_analytic = analytic + analytic.transpose();
        auto fsym = [&](const Matrix& p) { return f(test::mirror_upper(p)); };
        double dev = ad::finite_difference_check(fsym, sym_analytic, point, 1e-5, &coords);
        CHECK(dev < 1e-3);
    }
}

TEST_CASE("svd surrogate tracks the exact re-decomposition for aligned flips") {
    // star hub: subspace concentrated on the hub and its leaves
    std::vector<NodePair> edges;
    for (int leaf = 1; leaf <= 6; ++leaf) edges.push_back({0, leaf});
    edges.push_back({7, 8});
    edges.push_back({1, 2});
    Matrix x = Matrix::Identity(9, 9);
    Graph g = Graph::build(9, 2, edges, x, {0, 1, 0, 1, 0, 1, 0, 1, 0});

    ModelConfig cfg = test::small_config(ModelKind::SvdGcn);
    cfg.svd_rank = 6;
    cfg.hidden = {8};
    TrainedModel m = untrained_model(cfg, g, 23);

    // flip one pair with weight near the top of the spectrum coverage
    Matrix w = m.prep.svd_weights;
    EdgeFlipSet flips{{{0, 1}}};
    CHECK(w(0, 1) > 0.5);

    Matrix surrogate;
    {
        ad::Tape t;
        Matrix p = Matrix::Zero(g.n, g.n);
        p(0, 1) = p(1, 0) = 1.0;
        ad::Var pert = t.leaf(p, "pert");
        surrogate = t.val(attack_forward(t, m, g, pert));
    }
    Matrix true_logits = eval_logits(m, apply_flips(g, flips));
    double rel = (surrogate - true_logits).norm() / true_logits.norm();
    CHECK(rel < 0.05);
}

TEST_CASE("svd weights order the true-LRA sensitivity of perturbations") {
    // hub star + two disjoint edges: W large near the hub, tiny on the fringe
    std::vector<NodePair> edges;
    for (int leaf = 1; leaf <= 8; ++leaf) edges.push_back({0, leaf});
    edges.push_back({9, 10});
    edges.push_back({11, 12});
    Matrix x = Matrix::Identity(13, 13);
    Graph g = Graph::build(13, 2, edges, x, {0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0});
    ModelConfig cfg = test::small_config(ModelKind::SvdGcn);
    cfg.svd_rank = 2;
    cfg.hidden = {8};
    TrainedModel m = untrained_model(cfg, g, 29);

    Matrix w = m.prep.svd_weights;
    REQUIRE(w(0, 1) > 0.5);    // hub edge
    REQUIRE(w(9, 11) < 0.05);  // fringe pair

    Matrix base = eval_logits(m, g);
    double high = (eval_logits(m, apply_flips(g, {{{0, 1}}})) - base).norm();
    double low = (eval_logits(m, apply_flips(g, {{{9, 11}}})) - base).norm();
    CHECK(low <= high);
}
