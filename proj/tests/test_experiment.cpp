#include <doctest.h>

#include <filesystem>

#include "gnnb/experiment.hpp"
#include "helpers.hpp"

using namespace gnnb;

namespace {

nlohmann::json tiny_experiment_json(const std::string& out_dir) {
    return nlohmann::json::parse(R"({
      "name": "tiny",
      "dataset_name": "sbm24",
      "dataset": {"sbm": {"blocks": [12, 12], "p_in": 0.45, "p_out": 0.06, "seed": 9,
                           "features": {"dims_per_class": 4, "p_on": 0.7, "p_off": 0.08}}},
      "split_seeds": [1, 2],
      "ratios": [0.3, 0.2, 0.5],
      "models": [
        {"name": "gcn", "config": {"kind": "gcn", "hidden": [8], "dropout": 0.5,
          "optimizer": "adam", "lr": 0.01, "l2": 0.0005, "max_epochs": 60, "patience": 15}},
        {"name": "jaccard_gcn", "config": {"kind": "jaccard_gcn", "hidden": [8], "dropout": 0.5,
          "optimizer": "adam", "lr": 0.01, "l2": 0.0005, "max_epochs": 60, "patience": 15}}
      ],
      "attacks": ["fga", "pgd", "greedy_meta"],
      "scope": "global",
      "setting": "both",
      "budgets": [0.05, 0.1],
      "pgd": {"iterations": 12, "samples": 8, "base_step": 0.1, "seed": 3},
      "meta": {"meta_epochs": 5, "iterations": 8, "samples": 8, "seed": 4},
      "transfers": true,
      "non_adaptive": true,
      "workers": 2,
      "out": ")" + out_dir + R"("
    })");
}

struct TempDir {
    std::string path;
    explicit TempDir(const std::string& name) : path("/tmp/gnnb_" + name) {
        std::filesystem::remove_all(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("experiment config parsing") {
    TempDir dir("cfg");
    ExperimentConfig cfg = experiment_config_from_json(tiny_experiment_json(dir.path));
    CHECK(cfg.models.size() == 2);
    CHECK(cfg.sbm);
    CHECK(cfg.split_seeds == std::vector<uint64_t>{1, 2});
    CHECK(cfg.budgets == std::vector<double>{0.05, 0.1});
    CHECK(cfg.attacks.size() == 3);
    CHECK(cfg.meta_options.grad_clip == 1.0);  // meta default

    auto bad = tiny_experiment_json(dir.path);
    bad["split_seeds"] = {1, 1};
    CHECK_THROWS_AS(experiment_config_from_json(bad), ArgumentError);
    auto bad2 = tiny_experiment_json(dir.path);
    bad2["models"] = nlohmann::json::array();
    CHECK_THROWS_AS(experiment_config_from_json(bad2), ArgumentError);
}

TEST_CASE("archive export/import round-trips bit-exactly") {
    TempDir dir("archive");
    std::vector<ArchiveRecord> records;
    ArchiveRecord r;
    r.dataset = "toy";
    r.checksum = "abc123";
    r.scope = "global";
    r.setting = "evasion";
    r.source_model = "gcn";
    r.attack = "pgd";
    r.budget = 0.05;
    r.split_seed = 7;
    r.flips.pairs = {{0, 3}, {1, 2}};
    r.clean_accuracy = 0.91;
    r.perturbed_accuracy = 0.8123456789012345;
    records.push_back(r);
    r.attack = "fga";
    r.budget = 0.1;
    r.perturbed_accuracy = 1.0 / 3.0;
    records.push_back(r);

    std::string path = dir.path + "/archive.json";
    export_archive(records, path);
    std::vector<ArchiveRecord> back = import_archive(path);
    REQUIRE(back.size() == 2);
    std::string path2 = dir.path + "/archive2.json";
    export_archive(back, path2);
    CHECK(read_file(path) == read_file(path2));
    // exact doubles survive
    bool found = false;
    for (const auto& rec : back)
        if (rec.attack == "fga") {
            CHECK(rec.perturbed_accuracy == 1.0 / 3.0);
            found = true;
        }
    CHECK(found);

    write_file(path, R"({"version":"v0","records":[]})");
    CHECK_THROWS_AS(import_archive(path), ParseError);
}

TEST_CASE("checkpoints round-trip parameters bit-exactly") {
    TempDir dir("ckpt");
    Graph g = test::small_graph(301, 7, 0.5, 0.15);
    DataSplit split = make_split(g, 0.3, 0.2, 0.5, 1);
    ModelConfig cfg = test::small_config(ModelKind::Gcn);
    cfg.train.max_epochs = 40;
    TrainedModel m = train(cfg, g, split, 5);
    save_checkpoint(m, dir.path + "/model");
    TrainedModel back = load_checkpoint(dir.path + "/model", g);
    REQUIRE(back.params.size() == m.params.size());
    for (size_t k = 0; k < m.params.size(); ++k)
        CHECK((back.params[k] - m.params[k]).cwiseAbs().maxCoeff() == 0.0);
    CHECK(back.names == m.names);

    Graph other = test::small_graph(302, 7, 0.5, 0.15);
    CHECK_THROWS_AS(load_checkpoint(dir.path + "/model", other), ValidationError);
}

TEST_CASE("tiny experiment: determinism, caching, envelope rows") {
    TempDir dir_a("exp_a");
    TempDir dir_b("exp_b");
    ExperimentConfig cfg_a = experiment_config_from_json(tiny_experiment_json(dir_a.path));
    ExperimentResult first = run_experiment(cfg_a);
    CHECK(first.failures.empty());
    CHECK(first.cache_hits == 0);
    CHECK(!first.rows.empty());
    CHECK(!first.archive.empty());

    // rerun in place: everything served from the cell cache
    ExperimentResult rerun = run_experiment(cfg_a);
    CHECK(rerun.cache_hits == rerun.cells);
    CHECK(results_to_csv(rerun.rows) == results_to_csv(first.rows));

    // fresh directory: byte-identical outputs
    ExperimentConfig cfg_b = experiment_config_from_json(tiny_experiment_json(dir_b.path));
    ExperimentResult second = run_experiment(cfg_b);
    CHECK(read_file(dir_a.path + "/results.csv") == read_file(dir_b.path + "/results.csv"));
    CHECK(read_file(dir_a.path + "/archive.json") == read_file(dir_b.path + "/archive.json"));

    // rows: envelope + rauc present for both settings, clean rows exist
    bool have_env = false, have_rauc = false, have_clean = false, have_nonadaptive = false;
    for (const ResultRow& r : first.rows) {
        if (r.attack == "envelope" && r.metric == "accuracy") have_env = true;
        if (r.attack == "envelope" && r.metric == "rauc") have_rauc = true;
        if (r.metric == "clean_accuracy") have_clean = true;
        if (r.attack == "non_adaptive" && r.metric == "rauc") have_nonadaptive = true;
    }
    CHECK(have_env);
    CHECK(have_rauc);
    CHECK(have_clean);
    CHECK(have_nonadaptive);

    // archive: untuned-GCN source records are tagged
    bool untuned_records = false;
    for (const ArchiveRecord& r : first.archive)
        if (r.source_model == "gcn-untuned") untuned_records = true;
    CHECK(untuned_records);

    // every record respects its budget
    Graph g = load_experiment_graph(cfg_a);
    for (const ArchiveRecord& r : first.archive) {
        int delta = static_cast<int>(std::llround(r.budget * static_cast<double>(g.m)));
        CHECK(static_cast<int>(r.flips.size()) <= delta);
    }
}

TEST_CASE("import_and_score replays archived evasion records exactly") {
    TempDir dir("score");
    Graph g = test::small_graph(303, 8, 0.5, 0.12);
    DataSplit split = make_split(g, 0.3, 0.2, 0.5, 4);
    ModelConfig cfg = test::small_config(ModelKind::Gcn);
    cfg.train.max_epochs = 50;
    TrainedModel m = train(cfg, g, split, 9);

    CandidateSet cands = global_candidates(g);
    EdgeFlipSet flips = fga(m, g, split.test, 3, LossKind::TLM, cands);
    double pert_acc = accuracy(eval_logits(m, apply_flips(g, flips)), g.labels, split.test);

    ArchiveRecord rec;
    rec.dataset = "toy";
    rec.checksum = g.checksum;
    rec.scope = "global";
    rec.setting = "evasion";
    rec.source_model = "gcn";
    rec.attack = "fga";
    rec.budget = 0.05;
    rec.split_seed = 4;
    rec.flips = flips;
    rec.clean_accuracy = accuracy(eval_logits(m, g), g.labels, split.test);
    rec.perturbed_accuracy = pert_acc;

    double replay = score_record_against(rec, cfg, g, split, "evasion", &m);
    CHECK(std::abs(replay - pert_acc) < 1e-12);

    std::string path = dir.path + "/archive.json";
    export_archive({rec}, path);
    ScoreOutcome out = import_and_score(path, m, g, {{4ull, split}}, 0.55, 0.9);
    CHECK(out.scores.size() >= 1);
    CHECK(out.min_rauc <= 1.0);
    // checksum mismatch refuses to score
    Graph other = test::small_graph(304, 8, 0.5, 0.12);
    TrainedModel m2 = test::untrained_model(cfg, other, 1);
    CHECK_THROWS_AS(import_and_score(path, m2, other, {{4ull, split}}, 0.55, 0.9),
                    ValidationError);
}

TEST_CASE("transfer matrix on a synthetic archive") {
    Graph g = test::small_graph(305, 8, 0.55, 0.1);
    DataSplit split = make_split(g, 0.3, 0.2, 0.5, 6);
    ModelConfig gcn = test::small_config(ModelKind::Gcn);
    gcn.train.max_epochs = 50;
    TrainedModel m = train(gcn, g, split, 11);
    CandidateSet cands = global_candidates(g);

    std::vector<ArchiveRecord> records;
    for (double b : {0.05, 0.1}) {
        int delta = Budget::global(b).delta(g);
        if (delta < 1) continue;
        EdgeFlipSet flips = fga(m, g, split.test, delta, LossKind::TLM, cands);
        ArchiveRecord rec;
        rec.dataset = "toy";
        rec.checksum = g.checksum;
        rec.scope = "global";
        rec.setting = "evasion";
        rec.source_model = "gcn";
        rec.attack = "fga";
        rec.budget = b;
        rec.split_seed = 6;
        rec.flips = flips;
        rec.clean_accuracy = accuracy(eval_logits(m, g), g.labels, split.test);
        rec.perturbed_accuracy =
            accuracy(eval_logits(m, apply_flips(g, flips)), g.labels, split.test);
        records.push_back(rec);
    }
    REQUIRE(!records.empty());

    ModelConfig mlp = test::small_config(ModelKind::Mlp);
    mlp.train.max_epochs = 50;
    std::vector<std::pair<std::string, ModelConfig>> targets{{"gcn", gcn}, {"mlp", mlp}};
    TransferMatrix tm = transfer_matrix(records, targets, g, {{6ull, split}}, "evasion", 0.55);
    CHECK(tm.sources == std::vector<std::string>{"gcn"});
    CHECK(tm.targets.size() == 2);
    CHECK(!std::isnan(tm.rauc_matrix(0, 0)));
    CHECK(tm.adaptive_column[0] == 0);
    CHECK(tm.adaptive_column[1] == -1);
    // determinism
    TransferMatrix tm2 = transfer_matrix(records, targets, g, {{6ull, split}}, "evasion", 0.55);
    CHECK((tm.rauc_matrix - tm2.rauc_matrix).cwiseAbs().maxCoeff() == 0.0);

    // empty archive: empty matrix, no verdict
    TransferMatrix empty = transfer_matrix({}, targets, g, {{6ull, split}}, "evasion", 0.55);
    CHECK(empty.sources.empty());

    // ensemble of one rejected, two works
    CHECK_THROWS_AS(ensemble_transfer(records, {"gcn"}, "mlp", mlp, g, {{6ull, split}},
                                      "evasion"),
                    ArgumentError);
}
