#include <doctest.h>

#include <cmath>

#include "gnnb/evaluation.hpp"
#include "helpers.hpp"

using namespace gnnb;

namespace {

RobustnessCurve make_curve(std::vector<std::pair<double, double>> pts,
                           CurveScope scope = CurveScope::Global) {
    RobustnessCurve c;
    c.points = std::move(pts);
    c.scope = scope;
    return c;
}

// independent fine-grid integration of (c - a) up to the crossing
double rauc_grid_oracle(const RobustnessCurve& c, double a, double step = 1e-7) {
    double b_max = c.points.back().first;
    double integral = 0.0;
    double prev_b = 0.0, prev_v = c.value_at(0.0) - a;
    if (prev_v <= 0) return 0.0;
    for (double b = step; b <= b_max + step / 2; b += step) {
        double bb = std::min(b, b_max);
        double v = c.value_at(bb) - a;
        if (v < 0) {
            // crossing inside (prev_b, bb): linear within the micro-interval
            double t = prev_v / (prev_v - v);
            double bx = prev_b + t * (bb - prev_b);
            integral += (bx - prev_b) * prev_v / 2.0;
            prev_v = 0;
            break;
        }
        integral += (bb - prev_b) * (prev_v + v) / 2.0;
        prev_b = bb;
        prev_v = v;
        if (bb >= b_max) break;
    }
    return integral / ((1.0 - a) * b_max);
}

double local_auc_grid_oracle(const RobustnessCurve& c, double step = 1e-7) {
    double b0 = c.points.front().first, b1 = c.points.back().first;
    double integral = 0.0;
    double prev = c.value_at(b0);
    double prev_b = b0;
    for (double b = b0 + step; b <= b1 + step / 2; b += step) {
        double bb = std::min(b, b1);
        double v = c.value_at(bb);
        integral += (bb - prev_b) * (prev + v) / 2.0;
        prev = v;
        prev_b = bb;
        if (bb >= b1) break;
    }
    return integral / (b1 - b0);
}

}  // namespace

TEST_CASE("envelope hand cases") {
    RobustnessCurve mono = make_curve({{0, 1.0}, {1, 0.8}, {2, 0.7}});
    RobustnessCurve env = envelope({mono});
    CHECK(env.points == mono.points);

    RobustnessCurve wiggly = make_curve({{0, 1.0}, {1, 0.8}, {2, 0.9}});
    env = envelope({wiggly});
    CHECK(env.points[2].second == doctest::Approx(0.8));

    RobustnessCurve a = make_curve({{0, 1.0}, {1, 0.6}, {2, 0.5}});
    RobustnessCurve b = make_curve({{0, 0.9}, {1, 0.7}, {2, 0.4}});
    env = envelope({a, b});
    CHECK(env.points[0].second == doctest::Approx(0.9));
    CHECK(env.points[1].second == doctest::Approx(0.6));
    CHECK(env.points[2].second == doctest::Approx(0.4));

    CHECK_THROWS_AS(envelope({}), ArgumentError);
}

TEST_CASE("envelope resamples mismatched grids and dominates inputs") {
    RobustnessCurve a = make_curve({{0, 1.0}, {2, 0.4}});
    RobustnessCurve b = make_curve({{0, 0.8}, {1, 0.75}, {2, 0.7}});
    RobustnessCurve env = envelope({a, b});
    env.validate();
    for (auto [budget, acc] : env.points) {
        CHECK(acc <= a.value_at(budget) + 1e-12);
        CHECK(acc <= b.value_at(budget) + 1e-12);
    }
    for (size_t k = 1; k < env.points.size(); ++k)
        CHECK(env.points[k].second <= env.points[k - 1].second + 1e-15);
}

TEST_CASE("rauc anchors are exact") {
    RobustnessCurve mlp_line = make_curve({{0, 0.6}, {0.15, 0.6}});
    CHECK(rauc(mlp_line, 0.6) == 0.0);
    RobustnessCurve ones = make_curve({{0, 1.0}, {0.15, 1.0}});
    CHECK(rauc(ones, 0.6) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("rauc hand fixture: line from (0,1) to (b_max, a)") {
    RobustnessCurve line = make_curve({{0, 1.0}, {0.15, 0.6}});
    CHECK(rauc(line, 0.6) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("rauc matches the fine-grid oracle within 1e-9") {
    std::vector<RobustnessCurve> fixtures = {
        make_curve({{0, 1.0}, {0.05, 0.9}, {0.1, 0.55}, {0.15, 0.3}}),
        make_curve({{0, 0.95}, {0.025, 0.8}, {0.075, 0.72}, {0.15, 0.7}}),
        make_curve({{0, 0.85}, {0.01, 0.84}, {0.1, 0.2}, {0.15, 0.1}}),
        make_curve({{0, 0.5}, {0.15, 0.4}}),  // entirely below the baseline
    };
    for (const auto& c : fixtures) {
        double got = rauc(c, 0.62);
        double oracle = rauc_grid_oracle(c, 0.62);
        CHECK(std::abs(got - oracle) < 1e-9);
    }
}

TEST_CASE("rauc is monotone under pointwise domination") {
    RobustnessCurve hi = make_curve({{0, 0.95}, {0.05, 0.85}, {0.15, 0.75}});
    RobustnessCurve lo = make_curve({{0, 0.9}, {0.05, 0.7}, {0.15, 0.5}});
    CHECK(rauc(lo, 0.6) < rauc(hi, 0.6));
}

TEST_CASE("local_auc hand fixtures and oracle") {
    RobustnessCurve never = make_curve({{0, 1.0}, {2.0, 1.0}}, CurveScope::Local);
    CHECK(local_auc(never) == doctest::Approx(1.0));

    RobustnessCurve instant =
        make_curve({{0, 1.0}, {0.25, 0.0}, {2.0, 0.0}}, CurveScope::Local);
    CHECK(local_auc(instant) < 0.07);

    // near-step drop 1 -> 0.5 at 100%
    RobustnessCurve step =
        make_curve({{0, 1.0}, {1.0, 1.0}, {1.0 + 1e-10, 0.5}, {2.0, 0.5}}, CurveScope::Local);
    CHECK(local_auc(step) == doctest::Approx(0.75).epsilon(1e-9));

    RobustnessCurve mixed =
        make_curve({{0, 1.0}, {0.5, 0.8}, {1.0, 0.45}, {2.0, 0.2}}, CurveScope::Local);
    CHECK(std::abs(local_auc(mixed) - local_auc_grid_oracle(mixed)) < 1e-9);
}

TEST_CASE("attack characteristics on constructed flips") {
    // 5-node path 0-1-2-3-4 with block labels and simple features
    Matrix x(5, 4);
    x << 1, 1, 0, 0,
         1, 0, 0, 0,
         0, 1, 1, 0,
         0, 0, 1, 1,
         0, 0, 0, 1;
    Graph g = Graph::build(5, 2, {{0, 1}, {1, 2}, {2, 3}, {3, 4}}, x, {0, 0, 0, 1, 1});

    // insertion-only flip set
    EdgeFlipSet ins{{{0, 2}, {1, 4}}};
    AttackCharacteristics a = attack_characteristics(g, ins);
    CHECK(a.removal_ratio == 0.0);

    // same-class pairs only
    EdgeFlipSet same{{{0, 2}, {3, 4}}};
    CHECK(attack_characteristics(g, same).homophily == 1.0);

    // closeness of flip (1,4): node 1 distances {1,1,2,3}, node 4 {4,3,2,1}
    EdgeFlipSet fl{{{1, 4}}};
    AttackCharacteristics c = attack_characteristics(g, fl);
    double c1 = 4.0 / 7.0;   // fully connected: WF factor is 1
    double c4 = 4.0 / 10.0;
    CHECK(c.mean_closeness == doctest::Approx((c1 + c4) / 2).epsilon(1e-12));
    CHECK(c.mean_degree == doctest::Approx((2.0 + 1.0) / 2));
    // Jaccard of rows 1 and 4: no overlap
    CHECK(c.mean_jaccard == 0.0);
    // removal ratio: (1,4) is not an edge
    CHECK(c.removal_ratio == 0.0);
    EdgeFlipSet rm{{{1, 2}}};
    CHECK(attack_characteristics(g, rm).removal_ratio == 1.0);
}

TEST_CASE("closeness centrality scales on disconnected graphs") {
    Matrix x = Matrix::Zero(4, 1);
    Graph g = Graph::build(4, 1, {{0, 1}}, x, {0, 0, 0, 0});
    // node 0 reaches only node 1 at distance 1: within = 1, coverage = 1/3
    CHECK(closeness_centrality(g, 0) == doctest::Approx(1.0 / 3.0));
    CHECK(closeness_centrality(g, 2) == 0.0);
}

TEST_CASE("spectrum comparison and Weyl bound") {
    Graph g = test::small_graph(71, 6, 0.5, 0.2);
    Matrix a = g.dense_adj();
    SpectrumComparison same = spectrum_compare(a, a);
    CHECK(same.difference.cwiseAbs().maxCoeff() == 0.0);

    // single-flip perturbation obeys the Weyl bound |s_k(A~)-s_k(A)| <= ||A~-A||_2
    EdgeFlipSet one{{{0, 7}}};
    Matrix b = apply_flips(g, one).dense_adj();
    SpectrumComparison cmp = spectrum_compare(a, b);
    Eigen::SelfAdjointEigenSolver<Matrix> diff_eig(b - a);
    double bound = diff_eig.eigenvalues().cwiseAbs().maxCoeff();
    CHECK(cmp.difference.cwiseAbs().maxCoeff() <= bound + 1e-10);

    // empty graph vs a single edge
    Matrix zero2 = Matrix::Zero(2, 2);
    Matrix edge2 = Matrix::Zero(2, 2);
    edge2(0, 1) = edge2(1, 0) = 1.0;
    SpectrumComparison tiny = spectrum_compare(zero2, edge2);
    CHECK(tiny.clean.maxCoeff() == 0.0);
    CHECK(tiny.perturbed(0) == doctest::Approx(1.0));
    CHECK(tiny.perturbed(1) == doctest::Approx(1.0));
}

TEST_CASE("degree breakdown distributions") {
    Graph g = test::small_graph(72, 8, 0.4, 0.1);
    std::vector<double> budgets{0.05, 0.1, 0.15};

    // all broken nodes of degree 1 -> concentrated on bucket 1
    std::map<int, double> broken;
    for (int v = 0; v < g.n; ++v)
        if (g.degree(v) == 1) broken[v] = 0.05;
    if (!broken.empty()) {
        DegreeBreakdown bd = degree_breakdown(g, budgets, broken, false);
        CHECK(bd.rows[0][0] == doctest::Approx(1.0));
        CHECK(!bd.row_empty[0]);
    }

    // nothing broken -> flagged, not NaN
    DegreeBreakdown none = degree_breakdown(g, budgets, {}, false);
    for (size_t k = 0; k < budgets.size(); ++k) {
        CHECK(none.row_empty[k]);
        for (double v : none.rows[k]) CHECK(v == 0.0);
    }

    // constructed uniform breakage across the first three buckets
    std::map<int, double> uniform;
    int found[3] = {0, 0, 0};
    for (int v = 0; v < g.n; ++v) {
        int d = g.degree(v);
        if (d >= 1 && d <= 3 && found[d - 1] < 1) {
            uniform[v] = 0.1;
            ++found[d - 1];
        }
    }
    if (found[0] && found[1] && found[2]) {
        DegreeBreakdown bd = degree_breakdown(g, budgets, uniform, false);
        for (int k = 0; k < 3; ++k) CHECK(bd.rows[1][static_cast<size_t>(k)] ==
                                          doctest::Approx(1.0 / 3.0));
    }
}
