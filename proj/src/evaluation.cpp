#include "gnnb/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <set>

namespace gnnb {

void RobustnessCurve::validate() const {
    if (points.empty()) throw ArgumentError("curve: no points");
    for (size_t k = 0; k < points.size(); ++k) {
        if (k > 0 && points[k].first <= points[k - 1].first)
            throw ValidationError("curve: budgets must be strictly increasing");
        if (points[k].second < 0.0 || points[k].second > 1.0)
            throw ValidationError("curve: accuracy out of [0,1]");
    }
}

double RobustnessCurve::value_at(double budget) const {
    if (points.empty()) throw ArgumentError("curve: no points");
    if (budget <= points.front().first) return points.front().second;
    if (budget >= points.back().first) return points.back().second;
    for (size_t k = 1; k < points.size(); ++k) {
        if (budget <= points[k].first) {
            auto [b0, a0] = points[k - 1];
            auto [b1, a1] = points[k];
            double t = (budget - b0) / (b1 - b0);
            return a0 + t * (a1 - a0);
        }
    }
    return points.back().second;
}

RobustnessCurve envelope(const std::vector<RobustnessCurve>& curves) {
    if (curves.empty()) throw ArgumentError("envelope: empty curve list");
    std::set<double> grid;
    for (const auto& c : curves) {
        c.validate();
        if (c.scope != curves.front().scope)
            throw ArgumentError("envelope: mixed curve scopes");
        for (auto [b, a] : c.points) grid.insert(b);
    }
    RobustnessCurve out;
    out.scope = curves.front().scope;
    double running = std::numeric_limits<double>::infinity();
    for (double b : grid) {
        double v = std::numeric_limits<double>::infinity();
        for (const auto& c : curves) v = std::min(v, c.value_at(b));
        running = std::min(running, v);
        out.points.emplace_back(b, running);
    }
    return out;
}

double rauc(const RobustnessCurve& curve, double mlp_accuracy) {
    curve.validate();
    if (mlp_accuracy <= 0.0 || mlp_accuracy >= 1.0)
        throw ArgumentError("rauc: mlp accuracy must be in (0,1)");
    for (size_t k = 1; k < curve.points.size(); ++k)
        if (curve.points[k].second > curve.points[k - 1].second + 1e-12)
            throw ArgumentError("rauc: curve must be monotone non-increasing");
    if (curve.points.front().first != 0.0)
        throw ArgumentError("rauc: curve must start at budget 0");

    const double a = mlp_accuracy;
    const double b_max = curve.points.back().first;
    if (b_max <= 0.0) throw ArgumentError("rauc: curve must span a positive budget range");
    if (curve.points.front().second <= a) return 0.0;

    double integral = 0.0;
    for (size_t k = 1; k < curve.points.size(); ++k) {
        auto [b0, c0] = curve.points[k - 1];
        auto [b1, c1] = curve.points[k];
        if (c1 >= a) {
            integral += (b1 - b0) * ((c0 - a) + (c1 - a)) / 2.0;
            continue;
        }
        // linear-interpolated crossing of the MLP line inside this segment
        double t = (c0 - a) / (c0 - c1);
        double bx = b0 + t * (b1 - b0);
        integral += (bx - b0) * (c0 - a) / 2.0;
        break;
    }
    return integral / ((1.0 - a) * b_max);
}

double local_auc(const RobustnessCurve& curve) {
    curve.validate();
    const double span = curve.points.back().first - curve.points.front().first;
    if (span <= 0.0) throw ArgumentError("local_auc: curve must span a positive budget range");
    double integral = 0.0;
    for (size_t k = 1; k < curve.points.size(); ++k) {
        auto [b0, c0] = curve.points[k - 1];
        auto [b1, c1] = curve.points[k];
        integral += (b1 - b0) * (c0 + c1) / 2.0;
    }
    return integral / span;
}

double closeness_centrality(const Graph& g, int node) {
    std::vector<int> dist(static_cast<size_t>(g.n), -1);
    std::deque<int> queue{node};
    dist[static_cast<size_t>(node)] = 0;
    long long total = 0;
    int reachable = 1;
    while (!queue.empty()) {
        int v = queue.front();
        queue.pop_front();
        for (int u : g.neighbors(v)) {
            if (dist[static_cast<size_t>(u)] >= 0) continue;
            dist[static_cast<size_t>(u)] = dist[static_cast<size_t>(v)] + 1;
            total += dist[static_cast<size_t>(u)];
            ++reachable;
            queue.push_back(u);
        }
    }
    if (reachable <= 1 || g.n <= 1) return 0.0;
    // Wasserman-Faust: within-component closeness scaled by component coverage
    double within = static_cast<double>(reachable - 1) / static_cast<double>(total);
    return within * (static_cast<double>(reachable - 1) / static_cast<double>(g.n - 1));
}

AttackCharacteristics attack_characteristics(const Graph& g, const EdgeFlipSet& flips) {
    flips.validate(g.n);
    AttackCharacteristics out;
    out.flips = flips.size();
    if (flips.empty()) return out;

    Matrix bin = (g.features.array() != 0.0).cast<double>();
    Eigen::VectorXd pop = bin.rowwise().sum();
    double removed = 0;
    for (auto [i, j] : flips.pairs) {
        out.mean_degree += g.degree(i) + g.degree(j);
        out.mean_closeness += closeness_centrality(g, i) + closeness_centrality(g, j);
        if (g.labels[static_cast<size_t>(i)] == g.labels[static_cast<size_t>(j)])
            out.homophily += 1.0;
        double inter = bin.row(i).dot(bin.row(j));
        double uni = pop[i] + pop[j] - inter;
        out.mean_jaccard += uni > 0 ? inter / uni : 0.0;
        if (g.has_edge(i, j)) removed += 1.0;
    }
    const double np = static_cast<double>(flips.size());
    out.mean_degree /= 2.0 * np;
    out.mean_closeness /= 2.0 * np;
    out.homophily /= np;
    out.mean_jaccard /= np;
    out.removal_ratio = removed / np;
    return out;
}

SpectrumComparison spectrum_compare(const Matrix& clean_adj, const Matrix& perturbed_adj) {
    if (clean_adj.rows() != perturbed_adj.rows())
        throw ArgumentError("spectrum_compare: size mismatch");
    auto singular_values = [](const Matrix& m) {
        Eigen::SelfAdjointEigenSolver<Matrix> eig(m);
        if (eig.info() != Eigen::Success)
            throw NumericError("spectrum_compare: eigendecomposition failed");
        Eigen::VectorXd sv = eig.eigenvalues().cwiseAbs();
        std::sort(sv.data(), sv.data() + sv.size(), std::greater<double>());
        return sv;
    };
    SpectrumComparison out;
    out.clean = singular_values(clean_adj);
    out.perturbed = singular_values(perturbed_adj);
    out.difference = out.perturbed - out.clean;
    return out;
}

DegreeBreakdown degree_breakdown(const Graph& g, const std::vector<double>& budgets,
                                 const std::map<int, double>& broken_at, bool local_scope) {
    DegreeBreakdown out;
    if (local_scope) {
        out.degree_buckets = {{1, 1}, {2, 2}, {3, 3}, {5, 5}, {8, 10}, {15, 25}};
    } else {
        for (int d = 1; d <= 9; ++d) out.degree_buckets.emplace_back(d, d);
        out.degree_buckets.emplace_back(10, std::numeric_limits<int>::max());
    }
    out.budgets = budgets;

    auto bucket_of = [&](int node) {
        int d = std::max(1, g.degree(node));
        for (size_t k = 0; k < out.degree_buckets.size(); ++k)
            if (d >= out.degree_buckets[k].first && d <= out.degree_buckets[k].second)
                return static_cast<int>(k);
        return -1;
    };

    for (double b : budgets) {
        std::vector<double> row(out.degree_buckets.size(), 0.0);
        double total = 0;
        for (auto [node, at] : broken_at) {
            if (at > b) continue;
            int k = bucket_of(node);
            if (k < 0) continue;
            row[static_cast<size_t>(k)] += 1.0;
            total += 1.0;
        }
        if (total > 0)
            for (double& v : row) v /= total;
        out.row_empty.push_back(total == 0 ? 1 : 0);
        out.rows.push_back(std::move(row));
    }
    return out;
}

// --- transfer scoring ---------------------------------------------------------

double score_record_against(const ArchiveRecord& rec, const ModelConfig& cfg, const Graph& g,
                            const DataSplit& split, const std::string& setting,
                            const TrainedModel* pretrained) {
    if (rec.checksum != g.checksum)
        throw ValidationError("archive record checksum does not match the dataset");
    Graph flipped = apply_flips(g, rec.flips);
    if (setting == "evasion") {
        if (pretrained) return accuracy(eval_logits(*pretrained, flipped), g.labels, split.test);
        TrainedModel m = train(cfg, g, split, poison_seed(rec.split_seed));
        return accuracy(eval_logits(m, flipped), g.labels, split.test);
    }
    if (setting == "poisoning") {
        TrainedModel m = train(cfg, flipped, split, poison_seed(rec.split_seed));
        return accuracy(eval_logits(m, flipped), g.labels, split.test);
    }
    throw ArgumentError("score_record_against: unknown setting " + setting);
}

namespace {

RobustnessCurve curve_for_source(const std::vector<const ArchiveRecord*>& records,
                                 const ModelConfig& cfg, const Graph& g, const DataSplit& split,
                                 const std::string& setting, const TrainedModel* pretrained,
                                 double clean_acc) {
    // one record per budget; ties resolved toward the stronger source run
    std::map<double, const ArchiveRecord*> by_budget;
    for (const ArchiveRecord* r : records) {
        auto it = by_budget.find(r->budget);
        if (it == by_budget.end())
            by_budget[r->budget] = r;
        else if (r->perturbed_accuracy < it->second->perturbed_accuracy)
            it->second = r;
    }
    RobustnessCurve curve;
    curve.scope = CurveScope::Global;
    curve.points.emplace_back(0.0, clean_acc);
    for (auto& [budget, rec] : by_budget) {
        double acc = score_record_against(*rec, cfg, g, split, setting, pretrained);
        curve.points.emplace_back(budget, acc);
    }
    return envelope({curve});  // enforce monotonicity
}

}  // namespace

TransferMatrix transfer_matrix(const std::vector<ArchiveRecord>& records,
                               const std::vector<std::pair<std::string, ModelConfig>>& targets,
                               const Graph& g,
                               const std::vector<std::pair<uint64_t, DataSplit>>& splits,
                               const std::string& setting, double mlp_accuracy) {
    for (const ArchiveRecord& r : records)
        if (r.checksum != g.checksum)
            throw ValidationError("transfer_matrix: archive record checksum mismatch");

    std::set<std::string> source_set;
    for (const ArchiveRecord& r : records) source_set.insert(r.source_model);

    TransferMatrix out;
    out.sources.assign(source_set.begin(), source_set.end());
    for (auto& [name, cfg] : targets) out.targets.push_back(name);
    out.rauc_matrix = Matrix::Constant(static_cast<Eigen::Index>(targets.size()),
                                       static_cast<Eigen::Index>(out.sources.size()),
                                       std::numeric_limits<double>::quiet_NaN());
    if (records.empty()) return out;

    for (size_t ti = 0; ti < targets.size(); ++ti) {
        const auto& [tname, tcfg] = targets[ti];
        for (size_t si = 0; si < out.sources.size(); ++si) {
            const std::string& source = out.sources[si];
            double total = 0;
            int used = 0;
            for (const auto& [seed, split] : splits) {
                std::vector<const ArchiveRecord*> recs;
                for (const ArchiveRecord& r : records)
                    if (r.source_model == source && r.split_seed == seed && r.scope == "global")
                        recs.push_back(&r);
                if (recs.empty()) continue;
                TrainedModel pretrained;
                const TrainedModel* pm = nullptr;
                if (setting == "evasion") {
                    pretrained = train(tcfg, g, split, poison_seed(seed));
                    pm = &pretrained;
                }
                double clean_acc =
                    pm ? accuracy(eval_logits(*pm, g), g.labels, split.test)
                       : poison_eval({}, tcfg, g, split, poison_seed(seed)).test_accuracy;
                RobustnessCurve curve =
                    curve_for_source(recs, tcfg, g, split, setting, pm, clean_acc);
                total += rauc(curve, mlp_accuracy);
                ++used;
            }
            if (used > 0)
                out.rauc_matrix(static_cast<Eigen::Index>(ti), static_cast<Eigen::Index>(si)) =
                    total / used;
        }
    }

    for (size_t ti = 0; ti < targets.size(); ++ti) {
        double best = std::numeric_limits<double>::infinity();
        int adaptive = -1;
        for (size_t si = 0; si < out.sources.size(); ++si) {
            double v =
                out.rauc_matrix(static_cast<Eigen::Index>(ti), static_cast<Eigen::Index>(si));
            if (!std::isnan(v)) best = std::min(best, v);
            if (out.sources[si] == out.targets[ti]) adaptive = static_cast<int>(si);
        }
        out.verdicts.push_back(std::isinf(best) ? std::numeric_limits<double>::quiet_NaN()
                                                : best);
        out.adaptive_column.push_back(adaptive);
    }
    return out;
}

RobustnessCurve ensemble_transfer(const std::vector<ArchiveRecord>& records,
                                  const std::vector<std::string>& source_subset,
                                  const std::string& target_name, const ModelConfig& target,
                                  const Graph& g,
                                  const std::vector<std::pair<uint64_t, DataSplit>>& splits,
                                  const std::string& setting) {
    if (source_subset.size() < 2)
        throw ArgumentError("ensemble_transfer: need at least two sources");
    (void)target_name;

    std::map<double, std::vector<double>> acc_by_budget;
    for (const auto& [seed, split] : splits) {
        TrainedModel pretrained;
        const TrainedModel* pm = nullptr;
        if (setting == "evasion") {
            pretrained = train(target, g, split, poison_seed(seed));
            pm = &pretrained;
        }
        double clean_acc = pm ? accuracy(eval_logits(*pm, g), g.labels, split.test)
                              : poison_eval({}, target, g, split, poison_seed(seed)).test_accuracy;
        acc_by_budget[0.0].push_back(clean_acc);
        std::map<double, double> strongest;
        for (const ArchiveRecord& r : records) {
            if (r.split_seed != seed || r.scope != "global") continue;
            if (std::find(source_subset.begin(), source_subset.end(), r.source_model) ==
                source_subset.end())
                continue;
            double acc = score_record_against(r, target, g, split, setting, pm);
            auto it = strongest.find(r.budget);
            if (it == strongest.end() || acc < it->second) strongest[r.budget] = acc;
        }
        for (auto [budget, acc] : strongest) acc_by_budget[budget].push_back(acc);
    }

    RobustnessCurve curve;
    curve.scope = CurveScope::Global;
    for (auto& [budget, accs] : acc_by_budget) {
        double mean = 0;
        for (double a : accs) mean += a;
        curve.points.emplace_back(budget, mean / static_cast<double>(accs.size()));
    }
    return envelope({curve});
}

}  // namespace gnnb
