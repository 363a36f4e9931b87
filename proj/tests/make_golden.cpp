// Regenerates tests/golden: a reference checkpoint trained on the default
// benchmark (seed 0) plus recorded values for the golden-file tests.
// Usage: atta_make_golden <golden-dir>

#include <json.hpp>

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "atta/adapt.hpp"
#include "atta/experiment.hpp"
#include "atta/metrics.hpp"
#include "atta/trainer.hpp"

using namespace atta;
using nlohmann::json;
namespace fs = std::filesystem;

int main(int argc, char** argv) {
    if (argc != 2) {
        std::fprintf(stderr, "usage: atta_make_golden <golden-dir>\n");
        return 2;
    }
    const fs::path dir = argv[1];
    fs::create_directories(dir);

    DatasetSpec spec;  // defaults: 200 train, 50 test, 64x64, seed 0
    std::vector<LabeledScene> train_scenes;
    for (int i = 0; i < spec.n_train; ++i) {
        SceneSpec sp = spec.scene;
        sp.ood_enabled = false;
        sp.seed = static_cast<uint64_t>(i);
        train_scenes.push_back(generate_scene(sp));
    }
    TrainConfig cfg;
    cfg.seed = 0;
    TrainResult result = train(train_scenes, cfg);
    std::vector<const Tensor*> images;
    for (const auto& s : train_scenes) images.push_back(&s.image);
    calibrate_domain_detector(result.checkpoint, images);
    save_checkpoint(result.checkpoint, (dir / "ref_model").string());

    ScoredPixels pooled;
    for (int i = 0; i < spec.n_test; ++i) {
        SceneSpec sp = spec.scene;
        sp.ood_enabled = true;
        sp.seed = static_cast<uint64_t>(spec.n_train + i);
        LabeledScene scene = generate_scene(sp);
        AdaptResult r = frozen_inference(result.checkpoint, scene.image, ScoreKind::energy);
        for (int p = 0; p < sp.width * sp.height; ++p) {
            if (scene.labels[static_cast<size_t>(p)] == 0) continue;
            pooled.scores.push_back(r.G_out[static_cast<size_t>(p)]);
            pooled.is_ood.push_back(scene.is_ood(p) ? 1 : 0);
        }
    }
    const double auc = auroc(pooled);

    json g;
    g["data_seed"] = 0;
    g["n_train"] = spec.n_train;
    g["n_test"] = spec.n_test;
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(std::bit_cast<uint64_t>(auc)));
    g["frozen_clean_auroc_hex"] = hex;
    g["frozen_clean_auroc"] = auc;  // for human readers
    g["feature_hash"] = result.checkpoint.meta.feature_hash;
    std::ofstream out(dir / "golden.json");
    out << g.dump(2) << "\n";
    std::printf("golden files written to %s (auroc %.6f)\n", dir.string().c_str(), auc);
    return 0;
}
