#include "atta/experiment.hpp"

#include <json.hpp>
#include <omp.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "atta/rng.hpp"

namespace atta {

using nlohmann::json;
namespace fs = std::filesystem;

const std::vector<MethodSpec>& method_registry() {
    static const std::vector<MethodSpec> registry = [] {
        std::vector<MethodSpec> r;
        auto add = [&](const std::string& name, const std::string& desc, auto mutate) {
            MethodSpec m;
            m.name = name;
            m.description = desc;
            mutate(m.config);
            r.push_back(std::move(m));
        };
        add("frozen", "no adaptation, training statistics", [](AdaptConfig& c) {
            c.use_sbn = false;
            c.use_ast = false;
        });
        add("tbn_only", "single-image batch statistics, no self-training", [](AdaptConfig& c) {
            c.bn_mode = BnMode::batch_only;
            c.use_ast = false;
        });
        add("sbn_only", "selective statistic mixing, no self-training",
            [](AdaptConfig& c) { c.use_ast = false; });
        add("ast_only", "self-training on training statistics",
            [](AdaptConfig& c) { c.use_sbn = false; });
        add("tbn_ast", "batch statistics plus anomaly-aware self-training",
            [](AdaptConfig& c) { c.bn_mode = BnMode::batch_only; });
        add("atta", "selective statistics plus anomaly-aware self-training", [](AdaptConfig&) {});
        add("tent_like", "batch statistics plus seen-class entropy", [](AdaptConfig& c) {
            c.bn_mode = BnMode::batch_only;
            c.entropy_mode = EntropyMode::seen_only;
        });
        add("seen_entropy", "selective statistics plus seen-class entropy",
            [](AdaptConfig& c) { c.entropy_mode = EntropyMode::seen_only; });
        add("zscore_calib", "z-score normalization instead of the mixture fit",
            [](AdaptConfig& c) { c.calib_mode = CalibMode::zscore; });
        add("continue_stream", "parameters carried across the stream",
            [](AdaptConfig& c) { c.stream_mode = StreamMode::continue_updates; });
        add("no_weight", "novel-class weight fixed to 1",
            [](AdaptConfig& c) { c.class_weight = ClassWeightMode::one; });
        return r;
    }();
    return registry;
}

const MethodSpec* find_method(const std::string& name) {
    for (const auto& m : method_registry())
        if (m.name == name) return &m;
    return nullptr;
}

std::vector<std::string> registry_names() {
    std::vector<std::string> names;
    for (const auto& m : method_registry()) names.push_back(m.name);
    return names;
}

SplitEval evaluate_method(const ModelCheckpoint& ckpt, const std::vector<LoadedScene>& scenes,
                          const AdaptConfig& config) {
    require(!scenes.empty(), "evaluate_method: no scenes");
    std::vector<const Tensor*> images;
    images.reserve(scenes.size());
    for (const auto& s : scenes) images.push_back(&s.scene.image);
    std::vector<AdaptResult> results = adapt_stream(ckpt, images, config);

    SplitEval out;
    ScoredPixels pooled;
    std::vector<int> pooled_pred, pooled_truth;
    std::vector<uint8_t> pooled_mask;
    std::vector<double> times;
    const int C = ckpt.net.classes();

    for (size_t n = 0; n < scenes.size(); ++n) {
        const auto& scene = scenes[n].scene;
        const auto& res = results[n];
        const int d = scene.width * scene.height;
        ScoredPixels local;
        std::vector<int> pred(static_cast<size_t>(d));
        std::vector<uint8_t> mask(static_cast<size_t>(d));
        const float* F = res.F_out.ptr();
        for (int i = 0; i < d; ++i) {
            const int label = scene.labels[static_cast<size_t>(i)];
            if (label == 0) continue;  // ignore pixels stay out of every metric
            int arg = 0;
            float best = F[i];
            for (int c = 1; c < C; ++c) {
                const float v = F[static_cast<size_t>(c) * d + i];
                if (v > best) {
                    best = v;
                    arg = c;
                }
            }
            pred[static_cast<size_t>(i)] = arg + 1;
            mask[static_cast<size_t>(i)] = scene.is_ood(i) ? 1 : 0;
            local.scores.push_back(res.G_out[static_cast<size_t>(i)]);
            local.is_ood.push_back(mask[static_cast<size_t>(i)]);
        }
        PerImageEval pie;
        pie.domain_probability = res.domain.probability;
        pie.kl_sum = res.domain.kl_sum;
        pie.ms = res.wall_ms;
        pie.n_t0 = res.pl_stats.n_t0;
        pie.n_t1 = res.pl_stats.n_t1;
        pie.n_excluded = res.pl_stats.n_excluded;
        pie.failed = res.failed;
        const bool both = std::count(local.is_ood.begin(), local.is_ood.end(), uint8_t{1}) > 0 &&
                          std::count(local.is_ood.begin(), local.is_ood.end(), uint8_t{0}) > 0;
        if (both) {
            pie.detection_defined = true;
            pie.auroc = auroc(local);
            pie.ap = average_precision(local);
            pie.fpr95 = fpr_at_95_tpr(local);
        }
        const SegScores seg = seg_metrics(pred, scene.labels, mask, C);
        pie.miou = seg.miou;
        pie.macc = seg.macc;
        out.report.per_image.push_back(pie);

        pooled.scores.insert(pooled.scores.end(), local.scores.begin(), local.scores.end());
        pooled.is_ood.insert(pooled.is_ood.end(), local.is_ood.begin(), local.is_ood.end());
        pooled_pred.insert(pooled_pred.end(), pred.begin(), pred.end());
        pooled_truth.insert(pooled_truth.end(), scene.labels.begin(), scene.labels.end());
        pooled_mask.insert(pooled_mask.end(), mask.begin(), mask.end());
        times.push_back(res.wall_ms);
    }

    out.report.auroc = auroc(pooled);
    out.report.ap = average_precision(pooled);
    out.report.fpr95 = fpr_at_95_tpr(pooled);
    const SegScores seg = seg_metrics(pooled_pred, pooled_truth, pooled_mask, C);
    out.report.miou = seg.miou;
    out.report.macc = seg.macc;
    out.report.hist = score_histogram(pooled, 50);

    std::sort(times.begin(), times.end());
    double total = 0.0;
    for (double t : times) total += t;
    out.mean_ms = total / static_cast<double>(times.size());
    out.median_ms = times[times.size() / 2];
    return out;
}

namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

void write_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
        if (!out) throw FormatError("cannot open " + tmp + " for writing");
        out << content;
        if (!out) throw FormatError("write failed for " + tmp);
    }
    fs::rename(tmp, path);
}

struct RowKey {
    std::string method, split;
    uint64_t seed;
};

struct EvalContext {
    std::string out_dir;
    ScoreKind score;
    bool single_seed = true;
    std::vector<RowKey> keys;
    std::vector<SplitEval> evals;
    json details = json::array();
};

std::vector<LoadedScene> load_split(const DatasetManifest& manifest, const std::string& split) {
    const std::vector<std::string>* names = nullptr;
    if (split == "clean")
        names = &manifest.test_clean;
    else if (split == "corrupt")
        names = &manifest.test_corrupt;
    else
        throw ShapeError("unknown split '" + split + "' (expected clean or corrupt)");
    std::vector<LoadedScene> scenes;
    scenes.reserve(names->size());
    for (const auto& prefix : *names) scenes.push_back(load_scene(prefix));
    return scenes;
}

void run_cell(EvalContext& ctx, const ModelCheckpoint& ckpt, const MethodSpec& method,
              const std::string& split, const std::vector<LoadedScene>& scenes, uint64_t seed) {
    AdaptConfig cfg = method.config;
    cfg.score_kind = ctx.score;
    SplitEval ev = evaluate_method(ckpt, scenes, cfg);

    json rec;
    rec["method"] = method.name;
    rec["split"] = split;
    rec["seed"] = seed;
    json per_image = json::array();
    for (size_t i = 0; i < ev.report.per_image.size(); ++i) {
        const auto& pie = ev.report.per_image[i];
        json e;
        e["scene"] = static_cast<int>(i);
        e["detection_defined"] = pie.detection_defined;
        e["auroc"] = pie.auroc;
        e["ap"] = pie.ap;
        e["fpr95"] = pie.fpr95;
        e["miou"] = pie.miou;
        e["macc"] = pie.macc;
        e["domain_probability"] = pie.domain_probability;
        e["kl_sum"] = pie.kl_sum;
        e["ms"] = pie.ms;
        e["pseudo_labels"] = {{"t0", pie.n_t0}, {"t1", pie.n_t1}, {"excluded", pie.n_excluded}};
        e["failed"] = pie.failed;
        per_image.push_back(e);
    }
    rec["per_image"] = per_image;
    ctx.details.push_back(rec);

    ctx.keys.push_back({method.name, split, seed});
    ctx.evals.push_back(std::move(ev));
}

void write_outputs(EvalContext& ctx, const json& run_config) {
    fs::create_directories(ctx.out_dir);

    std::ostringstream csv;
    csv << "method,split,seed,auroc,ap,fpr95,miou,macc,mean_ms_per_image\n";
    for (size_t i = 0; i < ctx.keys.size(); ++i) {
        const auto& k = ctx.keys[i];
        const auto& ev = ctx.evals[i];
        csv << k.method << ',' << k.split << ',' << k.seed << ',' << fmt_double(ev.report.auroc)
            << ',' << fmt_double(ev.report.ap) << ',' << fmt_double(ev.report.fpr95) << ','
            << fmt_double(ev.report.miou) << ',' << fmt_double(ev.report.macc) << ','
            << fmt_double(ev.mean_ms) << '\n';
    }
    write_atomic((fs::path(ctx.out_dir) / "results.csv").string(), csv.str());

    write_atomic((fs::path(ctx.out_dir) / "details.json").string(), ctx.details.dump(2) + "\n");

    // One 50-bin histogram file per method x split; with several seeds each
    // seed gets its own suffixed file.
    for (size_t i = 0; i < ctx.keys.size(); ++i) {
        const auto& k = ctx.keys[i];
        const auto& hist = ctx.evals[i].report.hist;
        std::ostringstream h;
        h << "bin_lo,bin_hi,inlier_count,outlier_count\n";
        for (size_t b = 0; b + 1 < hist.edges.size(); ++b)
            h << fmt_double(hist.edges[b]) << ',' << fmt_double(hist.edges[b + 1]) << ','
              << hist.inlier[b] << ',' << hist.outlier[b] << '\n';
        std::string name = "hist_" + k.method + "_" + k.split;
        if (!ctx.single_seed) name += "_seed" + std::to_string(k.seed);
        write_atomic((fs::path(ctx.out_dir) / (name + ".csv")).string(), h.str());
    }

    json record;
    record["config"] = run_config;
    record["config_hash"] = config_hash(run_config.dump());
    json env;
    env["threads"] = omp_get_max_threads();
    env["float_size"] = sizeof(float);
    record["environment"] = env;
    json cells = json::array();
    for (size_t i = 0; i < ctx.keys.size(); ++i) {
        const auto& k = ctx.keys[i];
        const auto& ev = ctx.evals[i];
        json c;
        c["method"] = k.method;
        c["split"] = k.split;
        c["seed"] = k.seed;
        c["auroc"] = ev.report.auroc;
        c["ap"] = ev.report.ap;
        c["fpr95"] = ev.report.fpr95;
        c["miou"] = ev.report.miou;
        c["macc"] = ev.report.macc;
        c["mean_ms_per_image"] = ev.mean_ms;
        c["median_ms_per_image"] = ev.median_ms;
        cells.push_back(c);
    }
    record["cells"] = cells;
    write_atomic((fs::path(ctx.out_dir) / "run_record.json").string(), record.dump(2) + "\n");
}

json options_json(const std::string& data, const std::string& model, const std::string& out,
                  const std::vector<std::string>& methods, const std::vector<std::string>& splits,
                  const std::vector<uint64_t>& seeds, ScoreKind score) {
    json j;
    j["data"] = data;
    j["model"] = model;
    j["out"] = out;
    j["methods"] = methods;
    j["splits"] = splits;
    j["seeds"] = seeds;
    j["score"] = score == ScoreKind::energy ? "energy" : "max_logit";
    return j;
}

}  // namespace

uint64_t config_hash(const std::string& canonical_json) {
    return fnv1a64(canonical_json.data(), canonical_json.size());
}

std::string substitute_seed(const std::string& pattern, uint64_t seed) {
    std::string out = pattern;
    const std::string token = "{seed}";
    size_t pos;
    while ((pos = out.find(token)) != std::string::npos)
        out.replace(pos, token.size(), std::to_string(seed));
    return out;
}

void run_eval(const EvalOptions& opts) {
    for (const auto& m : opts.methods)
        if (!find_method(m))
            throw ShapeError("unknown method '" + m + "'; registry: " + [&] {
                std::string all;
                for (const auto& n : registry_names()) all += n + " ";
                return all;
            }());
    EvalContext ctx;
    ctx.out_dir = opts.out_dir;
    ctx.score = opts.score;
    ctx.single_seed = opts.seeds.size() == 1;

    for (uint64_t seed : opts.seeds) {
        const std::string data_dir = substitute_seed(opts.data_dir, seed);
        const std::string model = substitute_seed(opts.model_prefix, seed);
        const DatasetManifest manifest = load_manifest(data_dir);
        const ModelCheckpoint ckpt = load_checkpoint(model);
        for (const auto& split : opts.splits) {
            const std::vector<LoadedScene> scenes = load_split(manifest, split);
            for (const auto& mname : opts.methods)
                run_cell(ctx, ckpt, *find_method(mname), split, scenes, seed);
        }
    }
    write_outputs(ctx, options_json(opts.data_dir, opts.model_prefix, opts.out_dir, opts.methods,
                                    opts.splits, opts.seeds, opts.score));
}

void run_ablate(const AblateOptions& opts) {
    EvalOptions ev;
    ev.data_dir = opts.data_dir;
    ev.model_prefix = opts.model_prefix;
    ev.out_dir = opts.out_dir;
    ev.methods = registry_names();
    ev.splits = {"clean", "corrupt"};
    ev.seeds = opts.seeds;
    ev.score = opts.score;

    EvalContext ctx;
    ctx.out_dir = opts.out_dir;
    ctx.score = opts.score;
    ctx.single_seed = ev.seeds.size() == 1;
    for (uint64_t seed : ev.seeds) {
        const std::string data_dir = substitute_seed(ev.data_dir, seed);
        const std::string model = substitute_seed(ev.model_prefix, seed);
        const DatasetManifest manifest = load_manifest(data_dir);
        const ModelCheckpoint ckpt = load_checkpoint(model);
        for (const auto& split : ev.splits) {
            const std::vector<LoadedScene> scenes = load_split(manifest, split);
            for (const auto& mname : ev.methods)
                run_cell(ctx, ckpt, *find_method(mname), split, scenes, seed);
        }
    }
    write_outputs(ctx, options_json(ev.data_dir, ev.model_prefix, ev.out_dir, ev.methods,
                                    ev.splits, ev.seeds, ev.score));

    // Module on/off grid in the style of the headline ablation table,
    // averaged over seeds on the corrupted split.
    auto mean_of = [&](const std::string& method, const std::string& split, int metric) {
        double acc = 0.0;
        int n = 0;
        for (size_t i = 0; i < ctx.keys.size(); ++i) {
            if (ctx.keys[i].method != method || ctx.keys[i].split != split) continue;
            const auto& r = ctx.evals[i].report;
            acc += metric == 0 ? r.auroc : metric == 1 ? r.ap : r.fpr95;
            ++n;
        }
        return n > 0 ? acc / n : 0.0;
    };
    std::ostringstream md;
    md << "# Ablation summary (corrupt split, mean over seeds)\n\n";
    md << "| SBN | AST | AUROC | AP | FPR95 |\n";
    md << "|-----|-----|-------|----|-------|\n";
    const std::pair<const char*, const char*> rows[4] = {
        {"frozen", "x / x"}, {"ast_only", "x / v"}, {"sbn_only", "v / x"}, {"atta", "v / v"}};
    for (const auto& [method, flags] : rows) {
        std::string sbn(1, flags[0]), ast(1, flags[4]);
        char buf[160];
        std::snprintf(buf, sizeof(buf), "| %s | %s | %.2f | %.2f | %.2f |\n", sbn.c_str(),
                      ast.c_str(), 100.0 * mean_of(method, "corrupt", 0),
                      100.0 * mean_of(method, "corrupt", 1), 100.0 * mean_of(method, "corrupt", 2));
        md << buf;
    }
    md << "\nFull per-variant results: results.csv\n";
    write_atomic((fs::path(opts.out_dir) / "summary.md").string(), md.str());
}

}  // namespace atta
