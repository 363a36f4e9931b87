#include <doctest.h>

#include <cmath>

#include "atta/rng.hpp"
#include "atta/selective_bn.hpp"
#include "atta/trainer.hpp"
#include "oracles.hpp"

using namespace atta;

namespace {

std::vector<LabeledScene> tiny_scenes(int n, int size, uint64_t seed, bool one_class) {
    std::vector<LabeledScene> scenes;
    for (int i = 0; i < n; ++i) {
        SceneSpec spec;
        spec.width = spec.height = size;
        spec.ood_enabled = false;
        spec.seed = seed + static_cast<uint64_t>(i);
        LabeledScene s = generate_scene(spec);
        if (one_class) std::fill(s.labels.begin(), s.labels.end(), 1);
        scenes.push_back(std::move(s));
    }
    return scenes;
}

}  // namespace

TEST_CASE("training on one-class labels converges to that class everywhere") {
    auto scenes = tiny_scenes(12, 24, 100, /*one_class=*/true);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.min_epochs = 1;
    cfg.seed = 1;
    TrainResult result = train(scenes, cfg);
    CHECK(result.train_accuracy > 0.99);

    const BnStats stats = training_stats(result.checkpoint.net);
    BackboneResult r = forward_backbone(result.checkpoint.net, scenes[0].image, stats);
    Tensor logits = forward_head(result.checkpoint.net.head, r.features);
    const int d = 24 * 24;
    int votes = 0;
    for (int i = 0; i < d; ++i) {
        int arg = 0;
        float best = logits.data[static_cast<size_t>(i)];
        for (int c = 1; c < 4; ++c) {
            const float v = logits.data[static_cast<size_t>(c) * d + i];
            if (v > best) {
                best = v;
                arg = c;
            }
        }
        votes += arg == 0;
    }
    CHECK(votes == d);
}

TEST_CASE("training rejects scenes with novel pixels") {
    auto scenes = tiny_scenes(4, 20, 7, false);
    scenes[0].labels[0] = scenes[0].classes + 1;
    TrainConfig cfg;
    CHECK_THROWS_AS(train(scenes, cfg), ShapeError);
}

TEST_CASE("running statistics are strictly positive after training") {
    auto scenes = tiny_scenes(10, 20, 50, false);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.min_epochs = 1;
    TrainResult result = train(scenes, cfg);
    for (const auto& b : result.checkpoint.net.blocks)
        for (float s : b.bn.sigma_train) CHECK(s > 0.0f);
}

TEST_CASE("full-network training gradient matches finite differences") {
    auto scenes = tiny_scenes(1, 16, 9, false);
    SegmentationNet net = make_default_net(4, 3);
    // Healthy running stats are irrelevant here: training mode uses batch
    // statistics. Loss and gradient are both evaluated in training mode.
    const Tensor& img = scenes[0].image;
    const std::vector<int>& labels = scenes[0].labels;

    std::vector<double> analytic = train_mode_gradient(net, img, labels);
    REQUIRE(analytic.size() == trainable_param_count(net));

    // Finite differences on a deterministic subset of parameters, matched
    // against the analytic gradient at the same flat indices.
    struct Group {
        float* ptr;
        size_t size;
    };
    std::vector<Group> groups;
    for (auto& b : net.blocks) {
        groups.push_back({b.conv.weight.data(), b.conv.weight.size()});
        groups.push_back({b.conv.bias.data(), b.conv.bias.size()});
        groups.push_back({b.bn.gamma.data(), b.bn.gamma.size()});
        groups.push_back({b.bn.beta.data(), b.bn.beta.size()});
    }
    groups.push_back({net.head.weight.data(), net.head.weight.size()});
    groups.push_back({net.head.bias.data(), net.head.bias.size()});

    Rng rng(17);
    std::vector<double> picked_analytic, picked_fd;
    size_t offset = 0;
    for (const auto& g : groups) {
        for (int pick = 0; pick < 12; ++pick) {
            const size_t i = rng.below(g.size);
            const float saved = g.ptr[i];
            const double step = 1e-3;
            g.ptr[i] = static_cast<float>(saved + step);
            const double up = train_mode_loss(net, img, labels);
            g.ptr[i] = static_cast<float>(saved - step);
            const double down = train_mode_loss(net, img, labels);
            g.ptr[i] = saved;
            picked_fd.push_back((up - down) / (2 * step));
            picked_analytic.push_back(analytic[offset + i]);
        }
        offset += g.size;
    }
    CHECK(oracle::rel_error_norm(picked_analytic, picked_fd) < 5e-3);
}

TEST_CASE("loss decreases over early epochs on an easy task") {
    auto scenes = tiny_scenes(24, 24, 200, false);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.min_epochs = 4;
    cfg.seed = 2;
    TrainResult result = train(scenes, cfg);
    REQUIRE(result.loss_per_epoch.size() >= 3);
    CHECK(result.loss_per_epoch[1] < result.loss_per_epoch[0]);
    CHECK(result.loss_per_epoch[2] < result.loss_per_epoch[1]);
}

TEST_CASE("domain detector calibration follows the three-sigma placement") {
    auto scenes = tiny_scenes(16, 20, 300, false);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.min_epochs = 1;
    TrainResult result = train(scenes, cfg);
    std::vector<const Tensor*> images;
    for (const auto& s : scenes) images.push_back(&s.image);
    KlStatSummary summary = calibrate_domain_detector(result.checkpoint, images);

    CHECK(result.checkpoint.calib_a ==
          doctest::Approx(-(summary.mean_kl_sum + 3.0 * summary.std_kl_sum)).epsilon(1e-6));
    CHECK(result.checkpoint.calib_b ==
          doctest::Approx(std::max(summary.std_kl_sum, 1e-6)).epsilon(1e-6));

    // An image sitting exactly at the calibration mean maps to sigmoid(-3);
    // six sigma out maps to sigmoid(+3).
    const double p_mean = domain_shift_probability(
        summary.mean_kl_sum, result.checkpoint.calib_a, result.checkpoint.calib_b);
    CHECK(p_mean == doctest::Approx(1.0 / (1.0 + std::exp(3.0))).epsilon(1e-4));
    const double p_far = domain_shift_probability(
        summary.mean_kl_sum + 6.0 * summary.std_kl_sum, result.checkpoint.calib_a,
        result.checkpoint.calib_b);
    CHECK(p_far == doctest::Approx(1.0 / (1.0 + std::exp(-3.0))).epsilon(1e-4));
}

TEST_CASE("calibration refuses fewer than 10 images") {
    auto scenes = tiny_scenes(4, 20, 400, false);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.min_epochs = 1;
    TrainResult result = train(scenes, cfg);
    std::vector<const Tensor*> images;
    for (const auto& s : scenes) images.push_back(&s.image);
    CHECK_THROWS_AS(calibrate_domain_detector(result.checkpoint, images), ShapeError);
}

TEST_CASE("identical calibration images floor the detector scale") {
    auto scenes = tiny_scenes(1, 20, 500, false);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.min_epochs = 1;
    TrainResult result = train(scenes, cfg);
    std::vector<const Tensor*> images(12, &scenes[0].image);
    KlStatSummary summary = calibrate_domain_detector(result.checkpoint, images);
    CHECK(summary.std_kl_sum < 1e-12);
    CHECK(result.checkpoint.calib_b == doctest::Approx(1e-6));
}
