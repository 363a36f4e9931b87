#include <doctest.h>

#include <cmath>

#include "atta/adapt.hpp"
#include "atta/rng.hpp"
#include "atta/trainer.hpp"
#include "oracles.hpp"

using namespace atta;

namespace {

// One small trained checkpoint shared by the contract tests.
const ModelCheckpoint& fixture_checkpoint() {
    static const ModelCheckpoint ckpt = [] {
        std::vector<LabeledScene> scenes;
        for (int i = 0; i < 16; ++i) {
            SceneSpec spec;
            spec.width = spec.height = 32;
            spec.ood_enabled = false;
            spec.seed = 9000 + static_cast<uint64_t>(i);
            scenes.push_back(generate_scene(spec));
        }
        TrainConfig cfg;
        cfg.epochs = 3;
        cfg.min_epochs = 2;
        cfg.seed = 5;
        TrainResult result = train(scenes, cfg);
        std::vector<const Tensor*> images;
        for (const auto& s : scenes) images.push_back(&s.image);
        calibrate_domain_detector(result.checkpoint, images);
        return std::move(result.checkpoint);
    }();
    return ckpt;
}

LabeledScene test_scene(uint64_t seed, bool corrupt) {
    SceneSpec spec;
    spec.width = spec.height = 32;
    spec.seed = seed;
    LabeledScene s = generate_scene(spec);
    if (corrupt) {
        CorruptionResult r = apply_corruptions(s.image, spec.corruption,
                                               corruption_seed_for(seed));
        s.image = std::move(r.image);
    }
    return s;
}

std::vector<double> gbar_example(std::initializer_list<double> v) { return v; }

}  // namespace

TEST_CASE("pseudo labels follow the two-threshold rule") {
    PseudoLabels pl =
        build_pseudo_labels(gbar_example({0.1, 0.5, 0.9}), 0.3, 0.6, ClassWeightMode::auto_ratio);
    CHECK(pl.in_region == std::vector<uint8_t>{1, 0, 1});
    CHECK(pl.outlier[0] == 0);
    CHECK(pl.outlier[2] == 1);
    CHECK(pl.n_t0 == 1);
    CHECK(pl.n_t1 == 1);
    CHECK(pl.n_excluded == 1);
    CHECK(pl.lambda_weight == 1.0);
}

TEST_CASE("class weight is the inlier-to-outlier count ratio, floored at one") {
    std::vector<double> gbar(100, 0.1);
    for (int i = 0; i < 10; ++i) gbar[static_cast<size_t>(i)] = 0.9;
    PseudoLabels pl = build_pseudo_labels(gbar, 0.3, 0.6, ClassWeightMode::auto_ratio);
    CHECK(pl.n_t0 == 90);
    CHECK(pl.n_t1 == 10);
    CHECK(pl.lambda_weight == doctest::Approx(9.0));

    PseudoLabels forced = build_pseudo_labels(gbar, 0.3, 0.6, ClassWeightMode::one);
    CHECK(forced.lambda_weight == 1.0);

    // outlier-dominant image: the raw ratio would fall below one
    std::vector<double> flipped(100, 0.9);
    for (int i = 0; i < 10; ++i) flipped[static_cast<size_t>(i)] = 0.1;
    PseudoLabels fl = build_pseudo_labels(flipped, 0.3, 0.6, ClassWeightMode::auto_ratio);
    CHECK(fl.lambda_weight == 1.0);
}

TEST_CASE("mid-band probabilities leave the region empty") {
    std::vector<double> gbar(50, 0.45);
    PseudoLabels pl = build_pseudo_labels(gbar, 0.3, 0.6, ClassWeightMode::auto_ratio);
    CHECK(pl.n_t0 == 0);
    CHECK(pl.n_t1 == 0);
    CHECK(pl.n_excluded == 50);
    CHECK(pl.lambda_weight == 1.0);
}

TEST_CASE("anomaly entropy loss closed forms") {
    // empty region -> zero loss, zero gradient
    {
        std::vector<double> probs = {0.25, 0.25, 0.25, 0.25};
        std::vector<double> gbar = {0.5};
        PseudoLabels pl = build_pseudo_labels(gbar, 0.3, 0.6, ClassWeightMode::auto_ratio);
        ScoreGradContext ctx{1.0, ScoreKind::energy, nullptr};
        LossResult lr = anomaly_entropy_loss(probs, 4, 1, gbar, pl, ctx);
        CHECK(lr.loss == 0.0);
        for (double g : lr.dlogits) CHECK(g == 0.0);
    }
    // single inlier pixel with gbar = 0 and uniform F over 4 classes: ln 4
    {
        std::vector<double> probs = {0.25, 0.25, 0.25, 0.25};
        std::vector<double> gbar = {0.0};
        PseudoLabels pl = build_pseudo_labels(gbar, 0.3, 0.6, ClassWeightMode::auto_ratio);
        REQUIRE(pl.n_t0 == 1);
        ScoreGradContext ctx{1.0, ScoreKind::energy, nullptr};
        LossResult lr = anomaly_entropy_loss(probs, 4, 1, gbar, pl, ctx);
        CHECK(lr.loss == doctest::Approx(std::log(4.0)).epsilon(1e-9));
    }
    // single pseudo-outlier pixel with gbar = 0.5 and lambda = 1: -ln 0.5
    {
        std::vector<double> probs = {0.5, 0.5};
        std::vector<double> gbar = {0.5};
        PseudoLabels pl;
        pl.in_region = {1};
        pl.outlier = {1};
        pl.lambda_weight = 1.0;
        pl.n_t1 = 1;
        ScoreGradContext ctx{1.0, ScoreKind::energy, nullptr};
        LossResult lr = anomaly_entropy_loss(probs, 2, 1, gbar, pl, ctx);
        CHECK(lr.loss == doctest::Approx(-std::log(0.5)).epsilon(1e-9));
    }
}

TEST_CASE("anomaly entropy loss is nonnegative with clamped probabilities") {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const int C = 4, d = 16;
        std::vector<double> probs(static_cast<size_t>(C) * d);
        for (int i = 0; i < d; ++i) {
            double sum = 0.0;
            for (int c = 0; c < C; ++c) {
                const double e = std::exp(rng.normal());
                probs[static_cast<size_t>(c) * d + i] = e;
                sum += e;
            }
            for (int c = 0; c < C; ++c) probs[static_cast<size_t>(c) * d + i] /= sum;
        }
        std::vector<double> gbar(static_cast<size_t>(d));
        for (auto& v : gbar) v = rng.uniform();
        PseudoLabels pl = build_pseudo_labels(gbar, 0.3, 0.6, ClassWeightMode::auto_ratio);
        ScoreGradContext ctx{0.7, ScoreKind::energy, nullptr};
        LossResult lr = anomaly_entropy_loss(probs, C, d, gbar, pl, ctx);
        CHECK(lr.loss >= 0.0);
    }
}

TEST_CASE("seen-only entropy closed forms") {
    // one-hot distribution: zero entropy (up to the clamp)
    std::vector<double> onehot = {1.0, 0.0, 0.0, 0.0};
    LossResult zero = seen_only_entropy_loss(onehot, 4, 1);
    CHECK(zero.loss == doctest::Approx(0.0).epsilon(1e-8));

    // uniform over 4 classes, d pixels: d * ln 4
    const int d = 9;
    std::vector<double> uniform(static_cast<size_t>(4) * d, 0.25);
    LossResult u = seen_only_entropy_loss(uniform, 4, d);
    CHECK(u.loss == doctest::Approx(d * std::log(4.0)).epsilon(1e-9));
}

namespace {

// Composite head->loss evaluation used by the finite-difference checks:
// recomputes logits, softmax, score and calibrated probability in double
// from the current head parameters, holding a_x, b_x, D, t and lambda fixed.
struct FdHarness {
    Tensor features;
    Conv1x1 head;
    double a_x = 0.0, b_x = 1.0;
    PseudoLabels labels;
    EntropyMode mode = EntropyMode::anomaly_aware;
    ScoreKind kind = ScoreKind::energy;

    struct Eval {
        std::vector<double> probs, gbar, scores;
        std::vector<int> argmax;
    };

    Eval forward() const {
        const int d = features.dim(1) * features.dim(2);
        const int C = head.cout, K = head.cin;
        Eval ev;
        std::vector<double> logits(static_cast<size_t>(C) * d, 0.0);
        for (int c = 0; c < C; ++c) {
            double* row = logits.data() + static_cast<size_t>(c) * d;
            for (int i = 0; i < d; ++i) row[i] = head.bias[static_cast<size_t>(c)];
            for (int k = 0; k < K; ++k) {
                const double w = head.weight[static_cast<size_t>(c) * K + k];
                const float* f = features.ptr() + static_cast<size_t>(k) * d;
                for (int i = 0; i < d; ++i) row[i] += w * f[i];
            }
        }
        ev.probs.resize(logits.size());
        ev.gbar.resize(static_cast<size_t>(d));
        ev.scores.resize(static_cast<size_t>(d));
        ev.argmax.resize(static_cast<size_t>(d));
        for (int i = 0; i < d; ++i) {
            double mx = logits[static_cast<size_t>(i)];
            int arg = 0;
            for (int c = 1; c < C; ++c)
                if (logits[static_cast<size_t>(c) * d + i] > mx) {
                    mx = logits[static_cast<size_t>(c) * d + i];
                    arg = c;
                }
            double sum = 0.0;
            for (int c = 0; c < C; ++c)
                sum += std::exp(logits[static_cast<size_t>(c) * d + i] - mx);
            for (int c = 0; c < C; ++c)
                ev.probs[static_cast<size_t>(c) * d + i] =
                    std::exp(logits[static_cast<size_t>(c) * d + i] - mx) / sum;
            const double g = kind == ScoreKind::energy ? -(mx + std::log(sum)) : -mx;
            ev.scores[static_cast<size_t>(i)] = g;
            ev.gbar[static_cast<size_t>(i)] = 1.0 / (1.0 + std::exp(-(g - a_x) / b_x));
            ev.argmax[static_cast<size_t>(i)] = arg;
        }
        return ev;
    }

    double loss() const {
        Eval ev = forward();
        const int d = features.dim(1) * features.dim(2);
        if (mode == EntropyMode::seen_only)
            return seen_only_entropy_loss(ev.probs, head.cout, d).loss;
        ScoreGradContext ctx{b_x, kind, &ev.argmax};
        return anomaly_entropy_loss(ev.probs, head.cout, d, ev.gbar, labels, ctx).loss;
    }

    std::vector<double> analytic_gradient() const {
        Eval ev = forward();
        const int d = features.dim(1) * features.dim(2);
        LossResult lr;
        if (mode == EntropyMode::seen_only) {
            lr = seen_only_entropy_loss(ev.probs, head.cout, d);
        } else {
            ScoreGradContext ctx{b_x, kind, &ev.argmax};
            lr = anomaly_entropy_loss(ev.probs, head.cout, d, ev.gbar, labels, ctx);
        }
        HeadGradient hg = head_gradient(features, head, lr.dlogits);
        std::vector<double> flat = hg.dweight;
        flat.insert(flat.end(), hg.dbias.begin(), hg.dbias.end());
        return flat;
    }
};

FdHarness make_harness(uint64_t seed, EntropyMode mode, ScoreKind kind) {
    Rng rng(seed * 131 + 7);
    FdHarness h;
    const int K = 8, C = 4, side = 8;
    h.features = Tensor({K, side, side});
    for (auto& v : h.features.data) v = static_cast<float>(rng.uniform());
    h.head.cin = K;
    h.head.cout = C;
    h.head.weight.resize(static_cast<size_t>(C) * K);
    h.head.bias.resize(static_cast<size_t>(C));
    for (auto& v : h.head.weight) v = static_cast<float>(rng.normal() * 0.4);
    for (auto& v : h.head.bias) v = static_cast<float>(rng.normal() * 0.2);
    h.mode = mode;
    h.kind = kind;
    // Fix the Platt parameters and pseudo labels from the initial state, as
    // within one optimization step.
    FdHarness::Eval ev = h.forward();
    double mean = 0.0;
    for (double s : ev.scores) mean += s;
    mean /= static_cast<double>(ev.scores.size());
    double var = 0.0;
    for (double s : ev.scores) var += (s - mean) * (s - mean);
    h.b_x = std::max(std::sqrt(var / static_cast<double>(ev.scores.size())), 1e-3);
    h.a_x = mean;
    ev = h.forward();
    h.labels = build_pseudo_labels(ev.gbar, 0.3, 0.6, ClassWeightMode::auto_ratio);
    return h;
}

}  // namespace

TEST_CASE("both loss modes match finite differences through the head on 20 instances") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const EntropyMode mode =
            seed % 2 == 0 ? EntropyMode::anomaly_aware : EntropyMode::seen_only;
        FdHarness h = make_harness(seed, mode, ScoreKind::energy);
        std::vector<double> analytic = h.analytic_gradient();
        auto eval = [&]() { return h.loss(); };
        std::vector<double> fd =
            oracle::central_differences(h.head.weight.data(), h.head.weight.size(), eval);
        std::vector<double> fdb =
            oracle::central_differences(h.head.bias.data(), h.head.bias.size(), eval);
        fd.insert(fd.end(), fdb.begin(), fdb.end());
        CHECK(oracle::rel_error_norm(analytic, fd) < 1e-4);
    }
}

TEST_CASE("max-logit loss gradient matches finite differences away from ties") {
    int tested = 0;
    for (uint64_t seed = 100; tested < 6 && seed < 160; ++seed) {
        FdHarness h = make_harness(seed, EntropyMode::anomaly_aware, ScoreKind::max_logit);
        // Skip instances whose top-two logit margin could flip under the
        // finite-difference step.
        FdHarness::Eval ev = h.forward();
        const int d = 64, C = 4;
        bool safe = true;
        for (int i = 0; i < d && safe; ++i) {
            std::vector<double> l;
            for (int c = 0; c < C; ++c) {
                double logit = h.head.bias[static_cast<size_t>(c)];
                for (int k = 0; k < h.head.cin; ++k)
                    logit += h.head.weight[static_cast<size_t>(c) * h.head.cin + k] *
                             h.features.data[static_cast<size_t>(k) * d + i];
                l.push_back(logit);
            }
            std::sort(l.begin(), l.end());
            if (l[3] - l[2] < 0.05) safe = false;
        }
        if (!safe) continue;
        std::vector<double> analytic = h.analytic_gradient();
        auto eval = [&]() { return h.loss(); };
        std::vector<double> fd =
            oracle::central_differences(h.head.weight.data(), h.head.weight.size(), eval);
        std::vector<double> fdb =
            oracle::central_differences(h.head.bias.data(), h.head.bias.size(), eval);
        fd.insert(fd.end(), fdb.begin(), fdb.end());
        CHECK(oracle::rel_error_norm(analytic, fd) < 1e-4);
        ++tested;
    }
    CHECK(tested >= 3);
}

TEST_CASE("identity configuration is bitwise equal to frozen inference") {
    const ModelCheckpoint& ckpt = fixture_checkpoint();
    LabeledScene scene = test_scene(777, true);
    AdaptConfig cfg;
    cfg.use_sbn = false;
    cfg.use_ast = false;
    AdaptResult identity = adapt_image(ckpt, scene.image, cfg);
    AdaptResult frozen = frozen_inference(ckpt, scene.image, cfg.score_kind);
    CHECK(identity.F_out.same_bits(frozen.F_out));
    CHECK(identity.G_out == frozen.G_out);
    CHECK(identity.Gbar_out == frozen.Gbar_out);
    CHECK_FALSE(identity.adapted);
}

TEST_CASE("the checkpoint is never mutated by adaptation") {
    const ModelCheckpoint& ckpt = fixture_checkpoint();
    const std::string before = checkpoint_bytes(ckpt);
    for (bool corrupt : {false, true}) {
        LabeledScene scene = test_scene(314, corrupt);
        AdaptConfig cfg;
        adapt_image(ckpt, scene.image, cfg);
    }
    CHECK(checkpoint_bytes(ckpt) == before);
}

TEST_CASE("no-op condition: empty region leaves head parameters untouched") {
    const ModelCheckpoint& ckpt = fixture_checkpoint();
    LabeledScene scene = test_scene(2718, false);
    AdaptConfig cfg;
    cfg.calib_mode = CalibMode::zscore;  // keeps gbar in a controlled band
    cfg.tau1 = 1e-9;                     // nothing below
    cfg.tau2 = 1.0 - 1e-9;               // nothing above
    AdaptResult r = adapt_image(ckpt, scene.image, cfg);
    CHECK_FALSE(r.adapted);
    CHECK(r.loss_trace == std::vector<double>{0.0});
    CHECK(r.pl_stats.n_t0 == 0);
    CHECK(r.pl_stats.n_t1 == 0);
}

TEST_CASE("adaptation on a corrupted image produces a finite loss and both label kinds") {
    const ModelCheckpoint& ckpt = fixture_checkpoint();
    LabeledScene scene = test_scene(161, true);
    AdaptConfig cfg;
    AdaptResult r = adapt_image(ckpt, scene.image, cfg);
    REQUIRE(r.loss_trace.size() == 1);
    CHECK(std::isfinite(r.loss_trace[0]));
    CHECK_FALSE(r.failed);
    CHECK(r.domain.probability > 0.0);
    CHECK(r.F_out.all_finite());
}

TEST_CASE("selective mixing stays within the convexity bound on clean images") {
    const ModelCheckpoint& ckpt = fixture_checkpoint();
    // find a clean scene the detector is confident about
    for (uint64_t seed = 40; seed < 80; ++seed) {
        LabeledScene scene = test_scene(seed, false);
        BackboneResult first = forward_transductive(ckpt.net, scene.image);
        const BnStats train = training_stats(ckpt.net);
        DomainShiftEstimate est = estimate_domain_shift(
            first.batch_stats, train, ckpt.calib_a, ckpt.calib_b);
        if (est.probability >= 0.05) continue;
        BnStats mixed = mix_bn_statistics(train, first.batch_stats, est.probability);
        for (size_t l = 0; l < mixed.size(); ++l) {
            for (size_t c = 0; c < mixed[l].mean.size(); ++c) {
                const double moved = std::abs(mixed[l].mean[c] - train[l].mean[c]);
                const double gap = std::abs(first.batch_stats[l].mean[c] - train[l].mean[c]);
                CHECK(moved <= 0.05 * gap + 1e-12);
            }
        }
        return;
    }
    FAIL("no clean scene below the probability threshold");
}

TEST_CASE("episodic streams are order invariant") {
    const ModelCheckpoint& ckpt = fixture_checkpoint();
    std::vector<LabeledScene> scenes;
    for (uint64_t s = 0; s < 6; ++s) scenes.push_back(test_scene(600 + s, s % 2 == 0));
    std::vector<const Tensor*> order_a, order_b;
    for (const auto& s : scenes) order_a.push_back(&s.image);
    const std::vector<size_t> perm = {3, 0, 5, 1, 4, 2};
    for (size_t i : perm) order_b.push_back(&scenes[i].image);

    AdaptConfig cfg;
    auto ra = adapt_stream(ckpt, order_a, cfg);
    auto rb = adapt_stream(ckpt, order_b, cfg);
    for (size_t i = 0; i < perm.size(); ++i) {
        CHECK(rb[i].F_out.same_bits(ra[perm[i]].F_out));
        CHECK(rb[i].G_out == ra[perm[i]].G_out);
        CHECK(rb[i].Gbar_out == ra[perm[i]].Gbar_out);
    }
}

TEST_CASE("episodic stream equals independent adapt_image calls bitwise") {
    const ModelCheckpoint& ckpt = fixture_checkpoint();
    std::vector<LabeledScene> scenes;
    for (uint64_t s = 0; s < 3; ++s) scenes.push_back(test_scene(700 + s, true));
    std::vector<const Tensor*> images;
    for (const auto& s : scenes) images.push_back(&s.image);
    AdaptConfig cfg;
    auto stream = adapt_stream(ckpt, images, cfg);
    for (size_t i = 0; i < images.size(); ++i) {
        AdaptResult solo = adapt_image(ckpt, *images[i], cfg);
        CHECK(stream[i].F_out.same_bits(solo.F_out));
        CHECK(stream[i].G_out == solo.G_out);
    }
}

TEST_CASE("continue mode carries state and differs from episodic") {
    const ModelCheckpoint& ckpt = fixture_checkpoint();
    std::vector<LabeledScene> scenes;
    for (uint64_t s = 0; s < 8; ++s) scenes.push_back(test_scene(800 + s, true));
    std::vector<const Tensor*> images;
    for (const auto& s : scenes) images.push_back(&s.image);
    AdaptConfig cfg;
    auto episodic = adapt_stream(ckpt, images, cfg);
    cfg.stream_mode = StreamMode::continue_updates;
    auto continued = adapt_stream(ckpt, images, cfg);
    // later images must differ once parameters have drifted
    bool any_difference = false;
    for (size_t i = 1; i < images.size(); ++i)
        if (!continued[i].F_out.same_bits(episodic[i].F_out)) any_difference = true;
    CHECK(any_difference);
}

TEST_CASE("config validation") {
    AdaptConfig bad;
    bad.tau1 = 0.7;
    bad.tau2 = 0.3;
    CHECK_THROWS_AS(validate_config(bad), ShapeError);
    AdaptConfig zero_iter;
    zero_iter.iterations = 0;
    CHECK_THROWS_AS(validate_config(zero_iter), ShapeError);
}
