#include <doctest.h>

#include <cmath>

#include "helpers.hpp"

using namespace gnnb;
using gnnb::test::small_graph;

TEST_CASE("training is deterministic per seed") {
    Graph g = small_graph(101, 8, 0.6, 0.1);
    DataSplit split = make_split(g, 0.3, 0.2, 0.5, 1);
    ModelConfig cfg = test::small_config(ModelKind::Gcn);
    cfg.train.max_epochs = 60;
    TrainedModel a = train(cfg, g, split, 42);
    TrainedModel b = train(cfg, g, split, 42);
    REQUIRE(a.params.size() == b.params.size());
    for (size_t k = 0; k < a.params.size(); ++k)
        CHECK((a.params[k] - b.params[k]).cwiseAbs().maxCoeff() == 0.0);
    TrainedModel c = train(cfg, g, split, 43);
    bool any_diff = false;
    for (size_t k = 0; k < a.params.size(); ++k)
        if ((a.params[k] - c.params[k]).cwiseAbs().maxCoeff() != 0.0) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("gcn separates a two-class sbm") {
    Graph g = generate_sbm({20, 20}, 0.9, 0.05, SbmFeatureModel{6, 0.7, 0.05}, 7);
    DataSplit split = make_split(g, 0.3, 0.2, 0.5, 2);
    ModelConfig cfg = test::small_config(ModelKind::Gcn);
    TrainedModel m = train(cfg, g, split, 11);
    Matrix logits = eval_logits(m, g);
    CHECK(accuracy(logits, g.labels, split.test) > 0.95);
}

TEST_CASE("early stopping returns the minimum validation loss parameters") {
    Graph g = small_graph(103, 8, 0.55, 0.12);
    DataSplit split = make_split(g, 0.3, 0.2, 0.5, 3);
    ModelConfig cfg = test::small_config(ModelKind::Gcn);
    cfg.train.max_epochs = 80;
    cfg.train.patience = 15;
    TrainedModel m = train(cfg, g, split, 5);
    REQUIRE(!m.val_losses.empty());
    double best = *std::min_element(m.val_losses.begin(), m.val_losses.end());

    ad::Tape t;
    std::vector<ad::Var> pv;
    for (const Matrix& p : m.params) pv.push_back(t.constant(p, "p"));
    ForwardOptions o;
    ad::Var logits = model_forward(t, m.config, m.prep, pv, g, o);
    double returned = t.scalar_val(cross_entropy(t, logits, g.labels, split.val));
    CHECK(returned == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("all model kinds train without numeric failures") {
    Graph g = small_graph(104, 8, 0.5, 0.1);
    DataSplit split = make_split(g, 0.3, 0.2, 0.5, 4);
    for (ModelKind kind :
         {ModelKind::Gcn, ModelKind::Mlp, ModelKind::JaccardGcn, ModelKind::SvdGcn,
          ModelKind::Rgcn, ModelKind::GnnGuard, ModelKind::SoftMedianGdc}) {
        CAPTURE(to_string(kind));
        ModelConfig cfg = test::small_config(kind);
        cfg.train.max_epochs = std::min(cfg.train.max_epochs, 50);
        if (kind == ModelKind::GnnGuard) cfg.train.max_epochs = 50;
        TrainedModel m = train(cfg, g, split, 21);
        CHECK(m.train_accuracy >= 0.0);
        CHECK(eval_logits(m, g).allFinite());
    }
}

TEST_CASE("unrolled gradient with zero epochs is the evasion gradient at theta0") {
    Graph g = small_graph(105, 7, 0.5, 0.15);
    DataSplit split = make_split(g, 0.3, 0.2, 0.5, 5);
    ModelConfig cfg = test::small_config(ModelKind::Gcn);
    UnrollOptions opts;
    opts.epochs = 0;
    opts.seed = 31;
    Matrix pert = test::interior_perturbation(g, 6, 0.05, 0.2);
    MetaGradient meta =
        unrolled_train_grad(cfg, g, pert, split, LossKind::TLM, split.test, opts);

    // direct evasion gradient at the same theta0
    std::vector<Matrix> theta0 =
        init_params(cfg, g.feature_dim(), g.num_classes, derive_seed(opts.seed, "meta_theta0"));
    TrainedModel m = test::untrained_model(cfg, g, 999);
    m.params = theta0;
    ad::Tape t;
    ad::Var pv = t.leaf(pert, "pert");
    ad::Var logits = attack_forward(t, m, g, pv);
    Matrix direct = t.gradient(attack_loss(t, LossKind::TLM, logits, g.labels, split.test), pv);
    CHECK((meta.grad - direct).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("unrolled sgd meta-gradient matches pipeline finite differences") {
    Graph g = generate_sbm({10, 10}, 0.55, 0.1, SbmFeatureModel{4, 0.7, 0.1}, 17);
    DataSplit split = make_split(g, 0.3, 0.2, 0.5, 7);
    ModelConfig cfg = test::small_config(ModelKind::Gcn);
    cfg.hidden = {8};
    UnrollOptions opts;
    opts.epochs = 5;
    opts.lr = 1.0;
    opts.seed = 13;
    Matrix pert = test::interior_perturbation(g, 8, 0.1, 0.3);

    MetaGradient meta = unrolled_train_grad(cfg, g, pert, split, LossKind::TLM, split.test, opts);
    Matrix sym = meta.grad + meta.grad.transpose();

    auto f = [&](const Matrix& p) {
        return unrolled_train_grad(cfg, g, test::mirror_upper(p), split, LossKind::TLM,
                                   split.test, opts)
            .loss;
    };
    std::vector<std::pair<int, int>> coords;
    std::mt19937_64 crng(3);
    auto pairs = test::upper_pairs(g.n);
    std::sample(pairs.begin(), pairs.end(), std::back_inserter(coords), 20, crng);
    double dev = ad::finite_difference_check(f, sym, pert, 1e-5, &coords);
    CHECK(dev < 1e-2);
}

TEST_CASE("unrolled gradient replays identically") {
    Graph g = small_graph(106, 6, 0.5, 0.15);
    DataSplit split = make_split(g, 0.3, 0.2, 0.5, 9);
    ModelConfig cfg = test::small_config(ModelKind::Gcn);
    UnrollOptions opts;
    opts.epochs = 4;
    opts.seed = 3;
    Matrix zero = Matrix::Zero(g.n, g.n);
    MetaGradient a = unrolled_train_grad(cfg, g, zero, split, LossKind::TLM, split.test, opts);
    MetaGradient b = unrolled_train_grad(cfg, g, zero, split, LossKind::TLM, split.test, opts);
    CHECK((a.grad - b.grad).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.loss == b.loss);
}

TEST_CASE("unrolled training rejects runs over the memory budget") {
    Graph g = small_graph(107);
    DataSplit split = make_split(g, 0.3, 0.2, 0.5, 10);
    ModelConfig cfg = test::small_config(ModelKind::Gcn);
    UnrollOptions opts;
    opts.epochs = 50;
    opts.memory_budget = 1024;  // absurdly small
    CHECK_THROWS_WITH_AS(
        unrolled_train_grad(cfg, g, Matrix::Zero(g.n, g.n), split, LossKind::TLM, split.test,
                            opts),
        doctest::Contains("lower the unrolled epoch count"), ArgumentError);
}
