#include "atta/scoring.hpp"

#include <algorithm>
#include <cmath>

namespace atta {

OodScoreMap energy_score(const Tensor& logits) {
    require(logits.rank() == 3, "energy_score: logits must be CHW");
    require(logits.all_finite(), "energy_score: logits must be finite");
    const int c = logits.dim(0), d = logits.dim(1) * logits.dim(2);
    OodScoreMap out;
    out.kind = ScoreKind::energy;
    out.scores.resize(static_cast<size_t>(d));
    const float* in = logits.ptr();
    for (int i = 0; i < d; ++i) {
        double mx = in[i];
        for (int ch = 1; ch < c; ++ch) mx = std::max(mx, static_cast<double>(in[ch * d + i]));
        double sum = 0.0;
        for (int ch = 0; ch < c; ++ch) sum += std::exp(static_cast<double>(in[ch * d + i]) - mx);
        out.scores[static_cast<size_t>(i)] = -(mx + std::log(sum));
    }
    return out;
}

OodScoreMap max_logit_score(const Tensor& logits) {
    require(logits.rank() == 3, "max_logit_score: logits must be CHW");
    require(logits.all_finite(), "max_logit_score: logits must be finite");
    const int c = logits.dim(0), d = logits.dim(1) * logits.dim(2);
    OodScoreMap out;
    out.kind = ScoreKind::max_logit;
    out.scores.resize(static_cast<size_t>(d));
    const float* in = logits.ptr();
    for (int i = 0; i < d; ++i) {
        double mx = in[i];
        for (int ch = 1; ch < c; ++ch) mx = std::max(mx, static_cast<double>(in[ch * d + i]));
        out.scores[static_cast<size_t>(i)] = -mx;
    }
    return out;
}

OodScoreMap score_logits(const Tensor& logits, ScoreKind kind) {
    return kind == ScoreKind::energy ? energy_score(logits) : max_logit_score(logits);
}

AnomalyAwareDistribution anomaly_aware_distribution(const Tensor& inlier_probs,
                                                    const std::vector<double>& outlier_prob) {
    require(inlier_probs.rank() == 3, "anomaly_aware_distribution: probs must be CHW");
    const int c = inlier_probs.dim(0), d = inlier_probs.dim(1) * inlier_probs.dim(2);
    require(static_cast<int>(outlier_prob.size()) == d,
            "anomaly_aware_distribution: outlier_prob length mismatch");
    AnomalyAwareDistribution out;
    out.classes = c;
    out.pixels = d;
    out.probs.resize(static_cast<size_t>(c + 1) * d);
    const float* f = inlier_probs.ptr();
    for (int i = 0; i < d; ++i) {
        const double g = outlier_prob[static_cast<size_t>(i)];
        require(g >= 0.0 && g <= 1.0, "anomaly_aware_distribution: outlier_prob must be in [0,1]");
        for (int ch = 0; ch < c; ++ch)
            out.probs[static_cast<size_t>(ch) * d + i] = static_cast<double>(f[ch * d + i]) * (1.0 - g);
        out.probs[static_cast<size_t>(c) * d + i] = g;
    }
    return out;
}

}  // namespace atta
