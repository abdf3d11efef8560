#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "gnnb/experiment.hpp"

using namespace gnnb;

namespace {

int cmd_attack(const std::string& config_path, const std::string& out_override, int workers,
               bool resume) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (workers > 0) cfg.workers = workers;
    if (!resume) std::filesystem::remove_all(cfg.out_dir + "/cells");

    ExperimentResult res = run_experiment(cfg);
    std::cout << "cells: " << res.cells << " (cache hits: " << res.cache_hits << ")\n";
    std::cout << "rows: " << res.rows.size() << ", archive records: " << res.archive.size()
              << "\n";
    std::cout << "results: " << cfg.out_dir << "/results.csv\n";
    std::cout << "archive: " << cfg.out_dir << "/archive.json\n";
    if (!res.failures.empty()) {
        std::cout << res.failures.size() << " cell(s) failed; see " << cfg.out_dir
                  << "/failures.txt\n";
        return 2;
    }
    return 0;
}

int cmd_score(const std::string& archive_path, const std::string& checkpoint_dir,
              const std::string& dataset_path, double threshold, double mlp_acc,
              std::vector<uint64_t> seeds) {
    Graph g = load_dataset(dataset_path);
    TrainedModel candidate = load_checkpoint(checkpoint_dir, g);
    std::vector<std::pair<uint64_t, DataSplit>> splits;
    for (uint64_t s : seeds) splits.emplace_back(s, make_split(g, 0.1, 0.1, 0.8, s));
    ScoreOutcome out = import_and_score(archive_path, candidate, g, splits, mlp_acc, threshold);
    for (const SourceScore& s : out.scores)
        std::cout << "source=" << s.source << " setting=" << s.setting
                  << " rauc=" << format_double(s.rauc_value) << "\n";
    std::cout << "min_rauc=" << format_double(out.min_rauc) << " threshold="
              << format_double(threshold) << "\n";
    std::cout << (out.fail ? "VERDICT: FAIL (a stored perturbation erases the claimed gain)"
                           : "VERDICT: PASS")
              << "\n";
    return out.fail ? 1 : 0;
}

int cmd_report(const std::string& run_dir) {
    std::string csv = read_file(run_dir + "/results.csv");
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);  // header
    std::cout << "model,setting,metric,mean_value,rows\n";
    std::map<std::string, std::pair<double, int>> agg;
    while (std::getline(in, line)) {
        std::vector<std::string> cols;
        std::istringstream ls(line);
        std::string col;
        while (std::getline(ls, col, ',')) cols.push_back(col);
        if (cols.size() != 9) continue;
        const std::string& metric = cols[7];
        if (metric != "rauc" && metric != "local_auc" && metric != "clean_accuracy") continue;
        std::string key = cols[3] + "," + cols[2] + "," + metric;
        auto& [sum, count] = agg[key];
        sum += std::stod(cols[8]);
        ++count;
    }
    for (auto& [key, sc] : agg)
        std::cout << key << "," << format_double(sc.first / sc.second) << "," << sc.second
                  << "\n";
    return 0;
}

int cmd_convert(const std::string& input, const std::string& output, bool validate_only) {
    Graph g = load_dataset(input);
    std::cout << "n=" << g.n << " m=" << g.m << " d=" << g.feature_dim()
              << " classes=" << g.num_classes << "\n";
    std::cout << "checksum=" << g.checksum << "\n";
    if (!validate_only) {
        save_dataset(g, output);
        std::cout << "wrote canonical dataset to " << output << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adaptive structure-perturbation attacks on GNN defenses"};
    app.require_subcommand(1);

    std::string config_path, out_dir;
    int workers = 0;
    bool resume = true;
    CLI::App* attack = app.add_subcommand("attack", "run an experiment matrix");
    attack->add_option("--config", config_path, "experiment config JSON")->required();
    attack->add_option("--out", out_dir, "output directory override");
    attack->add_option("--workers", workers, "worker thread count override");
    attack->add_flag("--resume,!--no-resume", resume, "reuse completed cells (default on)");

    std::string archive_path, checkpoint_dir, dataset_path;
    double threshold = 0.5, mlp_acc = 0.6;
    std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
    CLI::App* score = app.add_subcommand("score", "unit-test a checkpoint against an archive");
    score->add_option("--archive", archive_path)->required();
    score->add_option("--checkpoint", checkpoint_dir)->required();
    score->add_option("--dataset", dataset_path)->required();
    score->add_option("--threshold", threshold, "claimed-robustness RAUC threshold");
    score->add_option("--mlp-acc", mlp_acc, "MLP baseline accuracy for RAUC");
    score->add_option("--split-seeds", seeds, "split seeds to score on");

    std::string run_dir;
    CLI::App* report = app.add_subcommand("report", "summarize a run directory");
    report->add_option("--out", run_dir, "run directory with results.csv")->required();

    std::string conv_in, conv_out;
    bool validate_only = false;
    CLI::App* convert = app.add_subcommand("convert", "validate/canonicalize a dataset file");
    convert->add_option("--input", conv_in)->required();
    convert->add_option("--output", conv_out);
    convert->add_flag("--validate", validate_only, "only validate and print the checksum");

    CLI11_PARSE(app, argc, argv);

    try {
        if (attack->parsed()) return cmd_attack(config_path, out_dir, workers, resume);
        if (score->parsed())
            return cmd_score(archive_path, checkpoint_dir, dataset_path, threshold, mlp_acc,
                             seeds);
        if (report->parsed()) return cmd_report(run_dir);
        if (convert->parsed()) {
            if (!validate_only && conv_out.empty())
                throw ArgumentError("convert: --output required unless --validate");
            return cmd_convert(conv_in, conv_out, validate_only);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
