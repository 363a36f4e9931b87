#pragma once

#include <vector>

#include "atta/tensor.hpp"

namespace atta {

enum class ScoreKind { energy, max_logit };

// Per-pixel outlier scores; higher means more likely novel. Kept in double:
// downstream calibration and the closed-form checks need the headroom.
struct OodScoreMap {
    std::vector<double> scores;
    ScoreKind kind = ScoreKind::energy;
};

// G_i = -log sum_c exp(logit_{c,i}), max-subtracted.
OodScoreMap energy_score(const Tensor& logits);

// G_i = -max_c logit_{c,i}.
OodScoreMap max_logit_score(const Tensor& logits);

OodScoreMap score_logits(const Tensor& logits, ScoreKind kind);

// (C+1)-way distribution: seen-class probabilities shrunk by the outlier
// probability, with the outlier probability appended as class C+1.
struct AnomalyAwareDistribution {
    int classes = 0;  // C (seen); probs holds C+1 rows
    int pixels = 0;
    std::vector<double> probs;  // [(C+1)][d]
};

AnomalyAwareDistribution anomaly_aware_distribution(const Tensor& inlier_probs,
                                                    const std::vector<double>& outlier_prob);

}  // namespace atta
