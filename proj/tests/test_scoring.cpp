#include <doctest.h>

#include <cmath>

#include "atta/net.hpp"
#include "atta/rng.hpp"
#include "atta/scoring.hpp"

using namespace atta;

TEST_CASE("energy of zero logits with two classes is -ln 2") {
    Tensor logits({2, 1, 1});
    OodScoreMap g = energy_score(logits);
    CHECK(std::abs(g.scores[0] - (-std::log(2.0))) < 1e-9);
}

TEST_CASE("energy shifts by -t when all logits shift by +t") {
    Tensor logits({4, 2, 2});
    Rng rng(3);
    for (auto& v : logits.data) v = static_cast<float>(rng.normal());
    OodScoreMap base = energy_score(logits);
    Tensor shifted = logits;
    for (auto& v : shifted.data) v += 2.0f;
    OodScoreMap moved = energy_score(shifted);
    for (size_t i = 0; i < base.scores.size(); ++i)
        CHECK(moved.scores[i] == doctest::Approx(base.scores[i] - 2.0).epsilon(1e-6));
}

TEST_CASE("energy approaches -max logit when one logit dominates") {
    Tensor logits({3, 1, 1});
    logits.data = {50.0f, -100.0f, -100.0f};
    OodScoreMap g = energy_score(logits);
    CHECK(g.scores[0] == doctest::Approx(-50.0).epsilon(1e-9));
}

TEST_CASE("max logit score basics") {
    Tensor logits({3, 1, 1});
    logits.data = {3.0f, 1.0f, -2.0f};
    CHECK(max_logit_score(logits).scores[0] == doctest::Approx(-3.0));

    // permutation invariance
    Tensor perm({3, 1, 1});
    perm.data = {-2.0f, 3.0f, 1.0f};
    CHECK(max_logit_score(perm).scores[0] == max_logit_score(logits).scores[0]);
}

TEST_CASE("max logit equals a brute-force per-pixel scan") {
    Tensor logits({5, 6, 7});
    Rng rng(9);
    for (auto& v : logits.data) v = static_cast<float>(rng.normal() * 4);
    OodScoreMap g = max_logit_score(logits);
    const int d = 42;
    for (int i = 0; i < d; ++i) {
        double mx = -1e300;
        for (int c = 0; c < 5; ++c)
            mx = std::max(mx, static_cast<double>(logits.data[static_cast<size_t>(c) * d + i]));
        CHECK(g.scores[static_cast<size_t>(i)] == -mx);
    }
}

TEST_CASE("anomaly-aware distribution boundary cases") {
    Tensor f({2, 1, 1});
    f.data = {0.5f, 0.5f};

    AnomalyAwareDistribution zero = anomaly_aware_distribution(f, {0.0});
    CHECK(zero.probs[0] == doctest::Approx(0.5));
    CHECK(zero.probs[1] == doctest::Approx(0.5));
    CHECK(zero.probs[2] == 0.0);

    AnomalyAwareDistribution one = anomaly_aware_distribution(f, {1.0});
    CHECK(one.probs[0] == 0.0);
    CHECK(one.probs[1] == 0.0);
    CHECK(one.probs[2] == 1.0);

    AnomalyAwareDistribution mid = anomaly_aware_distribution(f, {0.2});
    CHECK(mid.probs[0] == doctest::Approx(0.4));
    CHECK(mid.probs[1] == doctest::Approx(0.4));
    CHECK(mid.probs[2] == doctest::Approx(0.2));
    CHECK(mid.probs[0] + mid.probs[1] + mid.probs[2] == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("marginalization identity holds across random maps") {
    Rng rng(15);
    Tensor logits({4, 8, 8});
    for (auto& v : logits.data) v = static_cast<float>(rng.normal() * 2);
    Tensor f = softmax_per_pixel(logits);
    std::vector<double> gbar(64);
    for (auto& v : gbar) v = rng.uniform();
    AnomalyAwareDistribution y = anomaly_aware_distribution(f, gbar);
    for (int i = 0; i < 64; ++i) {
        double seen = 0.0;
        for (int c = 0; c < 4; ++c) seen += y.probs[static_cast<size_t>(c) * 64 + i];
        CHECK(std::abs(seen - (1.0 - y.probs[static_cast<size_t>(4) * 64 + i])) < 1e-7);
    }
}
