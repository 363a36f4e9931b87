#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "atta/experiment.hpp"
#include "atta/kernels.hpp"
#include "atta/trainer.hpp"

using nlohmann::json;

namespace {

// Exit codes: 0 success, 2 usage/validation, 3 runtime failure.
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

// Parse, mapping --help to 0 and any parse error to the usage exit code.
#define ATTA_PARSE(app)                             \
    do {                                            \
        try {                                       \
            (app).parse(argc, argv);                \
        } catch (const CLI::ParseError& e) {        \
            const int code = (app).exit(e);         \
            return code == 0 ? 0 : kExitUsage;      \
        }                                           \
    } while (0)

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<uint64_t> parse_seeds(const std::string& s) {
    std::vector<uint64_t> out;
    for (const auto& tok : split_csv(s)) out.push_back(std::stoull(tok));
    if (out.empty()) out.push_back(0);
    return out;
}

bool parse_score(const std::string& s, atta::ScoreKind& kind) {
    if (s == "energy") {
        kind = atta::ScoreKind::energy;
        return true;
    }
    if (s == "max_logit") {
        kind = atta::ScoreKind::max_logit;
        return true;
    }
    return false;
}

// A JSON config file provides values for any long option not given on the
// command line; explicit flags win.
bool apply_json_config(CLI::App& app, const std::string& path, std::string& err) {
    std::ifstream in(path);
    if (!in) {
        err = "cannot open config file " + path;
        return false;
    }
    json cfg;
    try {
        in >> cfg;
    } catch (const json::exception& e) {
        err = std::string("invalid JSON in --config: ") + e.what();
        return false;
    }
    for (auto& [key, value] : cfg.items()) {
        CLI::Option* opt = app.get_option_no_throw("--" + key);
        if (!opt) {
            err = "unknown key '" + key + "' in --config";
            return false;
        }
        if (opt->count() > 0) continue;
        std::string str = value.is_string() ? value.get<std::string>() : value.dump();
        opt->add_result(str);
        opt->run_callback();
    }
    return true;
}

int require_value(const std::string& value, const char* flag) {
    if (!value.empty()) return 0;
    std::cerr << "error: missing required option " << flag << "\n";
    return kExitUsage;
}

int cmd_build_data(int argc, char** argv) {
    CLI::App app{"generate the synthetic benchmark"};
    std::string out_dir, config_path;
    atta::DatasetSpec spec;
    uint64_t seed = 0;
    int size = 64;
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--seed", seed, "base seed");
    app.add_option("--n-train", spec.n_train, "training scenes");
    app.add_option("--n-test", spec.n_test, "test scenes per split");
    app.add_option("--size", size, "scene edge length in pixels");
    app.add_option("--classes", spec.scene.num_seen_classes, "seen classes");
    app.add_option("--ood-frac-lo", spec.scene.ood_frac_lo, "min novel area fraction");
    app.add_option("--ood-frac-hi", spec.scene.ood_frac_hi, "max novel area fraction");
    app.add_option("--fog-prob", spec.scene.corruption.fog_prob, "fog probability");
    app.add_option("--color-prob", spec.scene.corruption.color_prob, "color jitter probability");
    app.add_option("--blur-prob", spec.scene.corruption.blur_prob, "blur probability");
    app.add_option("--config", config_path, "JSON config with option defaults");
    ATTA_PARSE(app);
    std::string err;
    if (!config_path.empty() && !apply_json_config(app, config_path, err)) {
        std::cerr << "error: " << err << "\n";
        return kExitUsage;
    }
    if (int rc = require_value(out_dir, "--out")) return rc;

    spec.scene.width = spec.scene.height = size;
    spec.scene.seed = seed;
    if (spec.scene.ood_frac_lo < 0.0f || spec.scene.ood_frac_lo > spec.scene.ood_frac_hi ||
        spec.scene.ood_frac_hi > 0.5f) {
        std::cerr
            << "error: --ood-frac-lo/--ood-frac-hi must satisfy 0 <= lo <= hi <= 0.5\n";
        return kExitUsage;
    }
    atta::DatasetManifest manifest = atta::build_dataset(spec, out_dir);
    std::printf("wrote %zu train, %zu clean and %zu corrupted test scenes to %s\n",
                manifest.train.size(), manifest.test_clean.size(), manifest.test_corrupt.size(),
                out_dir.c_str());
    return 0;
}

int cmd_train(int argc, char** argv) {
    CLI::App app{"train the segmentation net and calibrate the domain detector"};
    std::string data_dir, out_prefix, config_path;
    atta::TrainConfig cfg;
    app.add_option("--data", data_dir, "dataset directory");
    app.add_option("--out", out_prefix, "checkpoint prefix (writes .json/.bin)");
    app.add_option("--seed", cfg.seed, "training seed");
    app.add_option("--epochs", cfg.epochs, "max epochs");
    app.add_option("--batch-size", cfg.batch_size, "images per optimizer step");
    app.add_option("--lr", cfg.learning_rate, "Adam learning rate");
    app.add_option("--bn-momentum", cfg.bn_momentum, "running statistics momentum");
    app.add_option("--config", config_path, "JSON config with option defaults");
    ATTA_PARSE(app);
    std::string err;
    if (!config_path.empty() && !apply_json_config(app, config_path, err)) {
        std::cerr << "error: " << err << "\n";
        return kExitUsage;
    }
    if (int rc = require_value(data_dir, "--data")) return rc;
    if (int rc = require_value(out_prefix, "--out")) return rc;

    atta::DatasetManifest manifest = atta::load_manifest(data_dir);
    std::vector<atta::LabeledScene> scenes;
    scenes.reserve(manifest.train.size());
    for (const auto& prefix : manifest.train) scenes.push_back(atta::load_scene(prefix).scene);
    atta::TrainResult result = atta::train(scenes, cfg);

    std::vector<const atta::Tensor*> images;
    for (const auto& s : scenes) images.push_back(&s.image);
    atta::KlStatSummary summary = atta::calibrate_domain_detector(result.checkpoint, images);
    atta::save_checkpoint(result.checkpoint, out_prefix);

    std::printf("epochs run:       %d\n", result.epochs_run);
    std::printf("train accuracy:   %.4f\n", result.train_accuracy);
    std::printf("final epoch loss: %.6f\n", result.loss_per_epoch.back());
    std::printf("kl stats:         mean %.6f std %.6f\n", summary.mean_kl_sum,
                summary.std_kl_sum);
    std::printf("calibration:      a %.6f b %.6f\n",
                static_cast<double>(result.checkpoint.calib_a),
                static_cast<double>(result.checkpoint.calib_b));
    std::printf("feature hash:     %016llx\n",
                static_cast<unsigned long long>(result.checkpoint.meta.feature_hash));
    std::printf("saved:            %s.json / %s.bin\n", out_prefix.c_str(), out_prefix.c_str());
    return 0;
}

int cmd_eval(int argc, char** argv) {
    CLI::App app{"run adaptation methods over the test splits"};
    std::string methods = "frozen,atta", splits = "clean,corrupt", seeds = "0";
    std::string score = "energy", config_path;
    atta::EvalOptions opts;
    app.add_option("--data", opts.data_dir, "dataset directory (may contain {seed})");
    app.add_option("--model", opts.model_prefix, "checkpoint prefix (may contain {seed})");
    app.add_option("--out", opts.out_dir, "output directory");
    app.add_option("--methods", methods, "comma list from the method registry");
    app.add_option("--splits", splits, "comma list of clean,corrupt");
    app.add_option("--seeds", seeds, "comma list of seeds");
    app.add_option("--score", score, "energy or max_logit");
    app.add_option("--config", config_path, "JSON config with option defaults");
    ATTA_PARSE(app);
    std::string err;
    if (!config_path.empty() && !apply_json_config(app, config_path, err)) {
        std::cerr << "error: " << err << "\n";
        return kExitUsage;
    }
    if (int rc = require_value(opts.data_dir, "--data")) return rc;
    if (int rc = require_value(opts.model_prefix, "--model")) return rc;
    if (int rc = require_value(opts.out_dir, "--out")) return rc;

    opts.methods = split_csv(methods);
    opts.splits = split_csv(splits);
    opts.seeds = parse_seeds(seeds);
    if (!parse_score(score, opts.score)) {
        std::cerr << "error: --score must be 'energy' or 'max_logit'\n";
        return kExitUsage;
    }
    for (const auto& m : opts.methods) {
        if (!atta::find_method(m)) {
            std::cerr << "error: unknown method '" << m << "' for --methods; registry:";
            for (const auto& n : atta::registry_names()) std::cerr << ' ' << n;
            std::cerr << "\n";
            return kExitUsage;
        }
    }
    for (const auto& s : opts.splits) {
        if (s != "clean" && s != "corrupt") {
            std::cerr << "error: unknown split '" << s << "' for --splits (clean|corrupt)\n";
            return kExitUsage;
        }
    }
    atta::run_eval(opts);
    std::printf("wrote results.csv, details.json, histograms and run_record.json to %s\n",
                opts.out_dir.c_str());
    return 0;
}

int cmd_ablate(int argc, char** argv) {
    CLI::App app{"run the full variant registry and summarize the module grid"};
    std::string seeds = "0", score = "energy", config_path;
    atta::AblateOptions opts;
    app.add_option("--data", opts.data_dir, "dataset directory (may contain {seed})");
    app.add_option("--model", opts.model_prefix, "checkpoint prefix (may contain {seed})");
    app.add_option("--out", opts.out_dir, "output directory");
    app.add_option("--seeds", seeds, "comma list of seeds");
    app.add_option("--score", score, "energy or max_logit");
    app.add_option("--config", config_path, "JSON config with option defaults");
    ATTA_PARSE(app);
    std::string err;
    if (!config_path.empty() && !apply_json_config(app, config_path, err)) {
        std::cerr << "error: " << err << "\n";
        return kExitUsage;
    }
    if (int rc = require_value(opts.data_dir, "--data")) return rc;
    if (int rc = require_value(opts.model_prefix, "--model")) return rc;
    if (int rc = require_value(opts.out_dir, "--out")) return rc;

    opts.seeds = parse_seeds(seeds);
    if (!parse_score(score, opts.score)) {
        std::cerr << "error: --score must be 'energy' or 'max_logit'\n";
        return kExitUsage;
    }
    atta::run_ablate(opts);
    std::printf("wrote ablation results (%zu variants) and summary.md to %s\n",
                atta::method_registry().size(), opts.out_dir.c_str());
    return 0;
}

void print_usage() {
    std::puts(
        "usage: atta <command> [options]\n"
        "\n"
        "commands:\n"
        "  build-data   generate the synthetic benchmark\n"
        "  train        train the segmentation net, calibrate the domain detector\n"
        "  eval         run methods over the test splits, write reports\n"
        "  ablate       run every registry variant, write the module grid\n"
        "\n"
        "run 'atta <command> --help' for options");
}

}  // namespace

int main(int argc, char** argv) {
    atta::kernels::set_threads_from_env();
    if (argc < 2) {
        print_usage();
        return kExitUsage;
    }
    const std::string cmd = argv[1];
    try {
        if (cmd == "build-data") return cmd_build_data(argc - 1, argv + 1);
        if (cmd == "train") return cmd_train(argc - 1, argv + 1);
        if (cmd == "eval") return cmd_eval(argc - 1, argv + 1);
        if (cmd == "ablate") return cmd_ablate(argc - 1, argv + 1);
        if (cmd == "--help" || cmd == "-h" || cmd == "help") {
            print_usage();
            return 0;
        }
        std::cerr << "error: unknown command '" << cmd << "'\n";
        print_usage();
        return kExitUsage;
    } catch (const atta::ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}
