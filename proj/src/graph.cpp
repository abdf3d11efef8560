#include "gnnb/graph.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace gnnb {

using json = nlohmann::ordered_json;

int Graph::degree(int v) const {
    return static_cast<int>(adj.col(v).nonZeros());
}

std::vector<int> Graph::neighbors(int v) const {
    std::vector<int> out;
    for (SparseMatrix::InnerIterator it(adj, v); it; ++it) out.push_back(static_cast<int>(it.row()));
    return out;
}

bool Graph::has_edge(int i, int j) const {
    return adj.coeff(i, j) != 0.0;
}

std::vector<NodePair> Graph::edge_list() const {
    std::vector<NodePair> out;
    out.reserve(static_cast<size_t>(m));
    for (int col = 0; col < adj.outerSize(); ++col)
        for (SparseMatrix::InnerIterator it(adj, col); it; ++it) {
            int i = static_cast<int>(it.row()), j = static_cast<int>(it.col());
            if (i < j) out.emplace_back(i, j);
        }
    std::sort(out.begin(), out.end());
    return out;
}

Graph Graph::build(int n, int num_classes, std::vector<NodePair> edges, Matrix features,
                   std::vector<int> labels) {
    if (n <= 0) throw ValidationError("graph: n must be positive");
    if (static_cast<int>(labels.size()) != n)
        throw ValidationError("graph: labels length " + std::to_string(labels.size()) +
                              " does not match n=" + std::to_string(n));
    if (features.rows() != n)
        throw ValidationError("graph: features row count does not match n");
    for (int i = 0; i < n; ++i)
        if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= num_classes)
            throw ValidationError("graph: label out of range at node " + std::to_string(i));
    std::sort(edges.begin(), edges.end());
    for (size_t k = 0; k < edges.size(); ++k) {
        auto [i, j] = edges[k];
        if (i == j) throw ValidationError("graph: self-loop at node " + std::to_string(i));
        if (i > j)
            throw ValidationError("graph: edge (" + std::to_string(i) + "," + std::to_string(j) +
                                  ") not in canonical i<j order");
        if (i < 0 || j >= n) throw ValidationError("graph: edge endpoint out of range");
        if (k > 0 && edges[k] == edges[k - 1])
            throw ValidationError("graph: duplicate edge (" + std::to_string(i) + "," +
                                  std::to_string(j) + ")");
    }

    Graph g;
    g.n = n;
    g.m = static_cast<int64_t>(edges.size());
    g.num_classes = num_classes;
    g.features = std::move(features);
    g.labels = std::move(labels);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(edges.size() * 2);
    for (auto [i, j] : edges) {
        trip.emplace_back(i, j, 1.0);
        trip.emplace_back(j, i, 1.0);
    }
    g.adj.resize(n, n);
    g.adj.setFromTriplets(trip.begin(), trip.end());
    g.adj.makeCompressed();
    g.checksum = sha256_hex(canonical_dataset_json(g));
    return g;
}

std::string canonical_dataset_json(const Graph& g) {
    json j;
    j["n"] = g.n;
    j["num_classes"] = g.num_classes;
    json edges = json::array();
    for (auto [a, b] : g.edge_list()) edges.push_back(json::array({a, b}));
    j["edges"] = std::move(edges);
    json feats;
    feats["shape"] = json::array({g.n, g.feature_dim()});
    json nz = json::array();
    for (int r = 0; r < g.features.rows(); ++r)
        for (int c = 0; c < g.features.cols(); ++c)
            if (g.features(r, c) != 0.0) nz.push_back(json::array({r, c, g.features(r, c)}));
    feats["nonzeros"] = std::move(nz);
    j["features"] = std::move(feats);
    j["labels"] = g.labels;
    return j.dump();
}

void save_dataset(const Graph& g, const std::string& path) {
    write_file(path, canonical_dataset_json(g));
}

Graph load_dataset(const std::string& path, const std::string& format) {
    if (format != "json")
        throw ArgumentError("load_dataset: unknown format '" + format + "' (expected \"json\")");
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("load_dataset: " + path + ": " + e.what());
    }
    auto require = [&](const char* field) -> const json& {
        if (!j.contains(field))
            throw ParseError(std::string("load_dataset: missing field \"") + field + "\"");
        return j.at(field);
    };
    int n, num_classes;
    std::vector<NodePair> edges;
    std::vector<int> labels;
    Matrix features;
    try {
        n = require("n").get<int>();
        num_classes = require("num_classes").get<int>();
    } catch (const nlohmann::json::exception&) {
        throw ParseError("load_dataset: field \"n\"/\"num_classes\" is not an integer");
    }
    try {
        for (const auto& e : require("edges"))
            edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
    } catch (const nlohmann::json::exception&) {
        throw ParseError("load_dataset: field \"edges\" is malformed");
    }
    try {
        const json& f = require("features");
        int rows = f.at("shape").at(0).get<int>();
        int cols = f.at("shape").at(1).get<int>();
        if (rows != n) throw ParseError("load_dataset: features shape[0] does not match \"n\"");
        features = Matrix::Zero(rows, cols);
        for (const auto& t : f.at("nonzeros")) {
            int r = t.at(0).get<int>(), c = t.at(1).get<int>();
            if (r < 0 || r >= rows || c < 0 || c >= cols)
                throw ParseError("load_dataset: feature nonzero index out of range");
            features(r, c) = t.at(2).get<double>();
        }
    } catch (const nlohmann::json::exception&) {
        throw ParseError("load_dataset: field \"features\" is malformed");
    }
    try {
        labels = require("labels").get<std::vector<int>>();
    } catch (const nlohmann::json::exception&) {
        throw ParseError("load_dataset: field \"labels\" is malformed");
    }
    return Graph::build(n, num_classes, std::move(edges), std::move(features), std::move(labels));
}

Graph generate_sbm(const std::vector<int>& block_sizes, double p_in, double p_out,
                   const SbmFeatureModel& fm, uint64_t seed) {
    if (block_sizes.empty()) throw ArgumentError("generate_sbm: empty block list");
    for (int s : block_sizes)
        if (s <= 0) throw ArgumentError("generate_sbm: block sizes must be positive");
    if (p_in < 0 || p_in > 1 || p_out < 0 || p_out > 1)
        throw ArgumentError("generate_sbm: probabilities must be in [0,1]");

    const int num_classes = static_cast<int>(block_sizes.size());
    int n = 0;
    std::vector<int> labels;
    for (int b = 0; b < num_classes; ++b)
        for (int k = 0; k < block_sizes[static_cast<size_t>(b)]; ++k) {
            labels.push_back(b);
            ++n;
        }

    std::mt19937_64 rng(derive_seed(seed, "sbm_edges"));
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<NodePair> edges;
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            double p = labels[static_cast<size_t>(i)] == labels[static_cast<size_t>(j)] ? p_in
                                                                                        : p_out;
            if (unif(rng) < p) edges.emplace_back(i, j);
        }

    std::mt19937_64 frng(derive_seed(seed, "sbm_features"));
    const int d = fm.dims_per_class * num_classes;
    Matrix features = Matrix::Zero(n, d);
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < d; ++c) {
            bool own = c / fm.dims_per_class == labels[static_cast<size_t>(i)];
            if (unif(frng) < (own ? fm.p_on : fm.p_off)) features(i, c) = 1.0;
        }

    return Graph::build(n, num_classes, std::move(edges), std::move(features), std::move(labels));
}

DataSplit make_split(const Graph& g, double train_ratio, double val_ratio, double test_ratio,
                     uint64_t seed) {
    const double sum = train_ratio + val_ratio + test_ratio;
    if (train_ratio <= 0 || val_ratio <= 0 || test_ratio <= 0 || std::abs(sum - 1.0) > 1e-9)
        throw ArgumentError("make_split: ratios must be positive and sum to 1");
    if (g.n < 3) throw ArgumentError("make_split: graph has fewer than 3 nodes");

    std::vector<int> order(static_cast<size_t>(g.n));
    for (int i = 0; i < g.n; ++i) order[static_cast<size_t>(i)] = i;
    std::mt19937_64 rng(derive_seed(seed, "split"));
    std::shuffle(order.begin(), order.end(), rng);

    const int n_train = static_cast<int>(std::llround(train_ratio * g.n));
    const int n_val = static_cast<int>(std::llround(val_ratio * g.n));
    DataSplit s;
    s.train.assign(order.begin(), order.begin() + n_train);
    s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
    s.test.assign(order.begin() + n_train + n_val, order.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.val.begin(), s.val.end());
    std::sort(s.test.begin(), s.test.end());
    return s;
}

void EdgeFlipSet::validate(int n) const {
    std::set<NodePair> seen;
    for (auto [i, j] : pairs) {
        if (i == j) throw ValidationError("flip set: self pair");
        if (i > j) throw ValidationError("flip set: pair not in i<j order");
        if (i < 0 || j >= n) throw ArgumentError("flip set: pair index out of range");
        if (!seen.insert({i, j}).second) throw ValidationError("flip set: duplicate pair");
    }
}

Matrix RelaxedPerturbation::symmetric() const {
    Matrix p = Matrix::Zero(n, n);
    for (size_t k = 0; k < pairs.size(); ++k) {
        auto [i, j] = pairs[k];
        p(i, j) = weights[static_cast<Eigen::Index>(k)];
        p(j, i) = weights[static_cast<Eigen::Index>(k)];
    }
    return p;
}

Graph apply_flips(const Graph& g, const EdgeFlipSet& flips) {
    flips.validate(g.n);
    std::set<NodePair> edges;
    for (auto e : g.edge_list()) edges.insert(e);
    for (auto p : flips.pairs) {
        auto it = edges.find(p);
        if (it != edges.end())
            edges.erase(it);
        else
            edges.insert(p);
    }
    return Graph::build(g.n, g.num_classes, std::vector<NodePair>(edges.begin(), edges.end()),
                        g.features, g.labels);
}

// --- normalizations -------------------------------------------------------------

namespace {

Eigen::VectorXd inv_pow_degree(const Eigen::VectorXd& deg, double expo, bool clamp) {
    Eigen::VectorXd s(deg.size());
    for (Eigen::Index i = 0; i < deg.size(); ++i) {
        double d = clamp ? std::max(deg[i], 0.0) : deg[i];
        s[i] = std::pow(d + 1.0, expo);
    }
    return s;
}

}  // namespace

Matrix gcn_normalize(const Matrix& adj, bool clamp_degrees) {
    Eigen::VectorXd s = inv_pow_degree(adj.rowwise().sum(), -0.5, clamp_degrees);
    Matrix ai = adj;
    ai.diagonal().array() += 1.0;
    return s.asDiagonal() * ai * s.asDiagonal();
}

SparseMatrix gcn_normalize_sparse(const SparseMatrix& adj) {
    Eigen::VectorXd deg = adj * Eigen::VectorXd::Ones(adj.cols());
    Eigen::VectorXd s = inv_pow_degree(deg, -0.5, false);
    SparseMatrix eye(adj.rows(), adj.cols());
    eye.setIdentity();
    SparseMatrix ai = adj + eye;
    return s.asDiagonal() * ai * s.asDiagonal();
}

ad::Var gcn_normalize(ad::Tape& t, ad::Var adj, bool clamp_degrees) {
    const int n = t.rows(adj);
    ad::Var deg = t.row_sum(adj);
    if (clamp_degrees) deg = t.clamp_min(deg, 0.0);
    ad::Var s = t.pow_scalar(t.add_scalar(deg, 1.0), -0.5);
    ad::Var ai = t.add(adj, t.constant(Matrix::Identity(n, n), "eye"));
    return t.scale_cols(t.scale_rows(ai, s), s);
}

Matrix rw_square_normalize(const Matrix& adj) {
    Eigen::VectorXd s = inv_pow_degree(adj.rowwise().sum(), -1.0, false);
    Matrix ai = adj;
    ai.diagonal().array() += 1.0;
    return s.asDiagonal() * ai * s.asDiagonal();
}

SparseMatrix rw_square_normalize_sparse(const SparseMatrix& adj) {
    Eigen::VectorXd deg = adj * Eigen::VectorXd::Ones(adj.cols());
    Eigen::VectorXd s = inv_pow_degree(deg, -1.0, false);
    SparseMatrix eye(adj.rows(), adj.cols());
    eye.setIdentity();
    SparseMatrix ai = adj + eye;
    return s.asDiagonal() * ai * s.asDiagonal();
}

ad::Var rw_square_normalize(ad::Tape& t, ad::Var adj) {
    const int n = t.rows(adj);
    ad::Var deg = t.row_sum(adj);
    ad::Var s = t.pow_scalar(t.add_scalar(deg, 1.0), -1.0);
    ad::Var ai = t.add(adj, t.constant(Matrix::Identity(n, n), "eye"));
    return t.scale_cols(t.scale_rows(ai, s), s);
}

}  // namespace gnnb
