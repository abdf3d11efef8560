#include "gnnb/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace gnnb {

using json = nlohmann::ordered_json;

nlohmann::ordered_json model_config_to_json(const ModelConfig& cfg) {
    json j;
    j["kind"] = to_string(cfg.kind);
    j["hidden"] = cfg.hidden;
    j["dropout"] = cfg.dropout;
    j["jaccard_eps"] = cfg.jaccard_eps;
    j["svd_rank"] = cfg.svd_rank;
    j["rgcn_gamma"] = cfg.rgcn_gamma;
    j["rgcn_beta"] = cfg.rgcn_beta;
    j["rgcn_eps_var"] = cfg.rgcn_eps_var;
    j["guard_eps_stab"] = cfg.guard_eps_stab;
    j["guard_rho_init"] = cfg.guard_rho_init;
    j["sm_temperature"] = cfg.sm_temperature;
    j["ppr_alpha"] = cfg.ppr_alpha;
    j["ppr_topk"] = cfg.ppr_topk;
    j["optimizer"] = cfg.train.optimizer;
    j["lr"] = cfg.train.lr;
    j["l2"] = cfg.train.l2;
    j["max_epochs"] = cfg.train.max_epochs;
    j["patience"] = cfg.train.patience;
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    try {
        cfg.kind = model_kind_from_string(j.at("kind").get<std::string>());
        if (j.contains("hidden")) cfg.hidden = j.at("hidden").get<std::vector<int>>();
        auto opt = [&](const char* key, double& field) {
            if (j.contains(key)) field = j.at(key).get<double>();
        };
        opt("dropout", cfg.dropout);
        opt("jaccard_eps", cfg.jaccard_eps);
        opt("rgcn_gamma", cfg.rgcn_gamma);
        opt("rgcn_beta", cfg.rgcn_beta);
        opt("rgcn_eps_var", cfg.rgcn_eps_var);
        opt("guard_eps_stab", cfg.guard_eps_stab);
        opt("guard_rho_init", cfg.guard_rho_init);
        opt("sm_temperature", cfg.sm_temperature);
        opt("ppr_alpha", cfg.ppr_alpha);
        opt("lr", cfg.train.lr);
        opt("l2", cfg.train.l2);
        if (j.contains("svd_rank")) cfg.svd_rank = j.at("svd_rank").get<int>();
        if (j.contains("ppr_topk")) cfg.ppr_topk = j.at("ppr_topk").get<int>();
        if (j.contains("optimizer")) cfg.train.optimizer = j.at("optimizer").get<std::string>();
        if (j.contains("max_epochs")) cfg.train.max_epochs = j.at("max_epochs").get<int>();
        if (j.contains("patience")) cfg.train.patience = j.at("patience").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; byte-swapping is not implemented");

void write_blob(const std::string& path, const Matrix& m) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ParseError("checkpoint: cannot write " + path);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            double v = m(r, c);
            out.write(reinterpret_cast<const char*>(&v), sizeof(double));
        }
}

Matrix read_blob(const std::string& path, int rows, int cols) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("checkpoint: cannot read " + path);
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) {
            double v = 0;
            in.read(reinterpret_cast<char*>(&v), sizeof(double));
            if (!in) throw ParseError("checkpoint: blob " + path + " is truncated");
            m(r, c) = v;
        }
    return m;
}

}  // namespace

void save_checkpoint(const TrainedModel& m, const std::string& dir) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["config"] = model_config_to_json(m.config);
    manifest["graph_checksum"] = m.graph_checksum;
    manifest["seed"] = m.seed;
    manifest["train_accuracy"] = m.train_accuracy;
    manifest["val_accuracy"] = m.val_accuracy;
    json params = json::array();
    for (size_t k = 0; k < m.params.size(); ++k) {
        json p;
        p["name"] = m.names[k];
        p["shape"] = json::array({m.params[k].rows(), m.params[k].cols()});
        params.push_back(std::move(p));
        write_blob(dir + "/" + m.names[k] + ".bin", m.params[k]);
    }
    manifest["params"] = std::move(params);
    write_file(dir + "/manifest.json", manifest.dump(2));
}

TrainedModel load_checkpoint(const std::string& dir, const Graph& g) {
    json manifest;
    try {
        manifest = json::parse(read_file(dir + "/manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint manifest: ") + e.what());
    }
    TrainedModel m;
    m.config = model_config_from_json(manifest.at("config"));
    m.graph_checksum = manifest.at("graph_checksum").get<std::string>();
    if (m.graph_checksum != g.checksum)
        throw ValidationError("checkpoint: graph checksum mismatch (expected " +
                              m.graph_checksum + ")");
    m.seed = manifest.at("seed").get<uint64_t>();
    m.train_accuracy = manifest.value("train_accuracy", 0.0);
    m.val_accuracy = manifest.value("val_accuracy", 0.0);
    for (const auto& p : manifest.at("params")) {
        std::string name = p.at("name").get<std::string>();
        int rows = p.at("shape").at(0).get<int>();
        int cols = p.at("shape").at(1).get<int>();
        m.names.push_back(name);
        m.params.push_back(read_blob(dir + "/" + name + ".bin", rows, cols));
    }
    std::vector<std::string> expect = param_names(m.config, g.feature_dim(), g.num_classes);
    if (expect != m.names)
        throw ValidationError("checkpoint: parameter names do not match the config");
    m.prep = make_preprocess(m.config, g);
    return m;
}

}  // namespace gnnb
