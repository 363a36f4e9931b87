#pragma once

#include <vector>

#include "atta/calibration.hpp"
#include "atta/checkpoint.hpp"
#include "atta/scoring.hpp"
#include "atta/selective_bn.hpp"

namespace atta {

enum class EntropyMode { anomaly_aware, seen_only };
enum class ClassWeightMode { auto_ratio, one };
enum class StreamMode { episodic, continue_updates };
enum class BnMode { selective, train_only, batch_only };

struct AdaptConfig {
    int iterations = 1;
    double learning_rate = 1e-4;
    double tau1 = 0.3, tau2 = 0.6;
    bool use_sbn = true;
    bool use_ast = true;
    EntropyMode entropy_mode = EntropyMode::anomaly_aware;
    CalibMode calib_mode = CalibMode::gmm;
    ClassWeightMode class_weight = ClassWeightMode::auto_ratio;
    StreamMode stream_mode = StreamMode::episodic;
    BnMode bn_mode = BnMode::selective;
    ScoreKind score_kind = ScoreKind::energy;
};

void validate_config(const AdaptConfig& cfg);

// High-confidence region and binarized outlier pseudo-labels:
// D = { i : gbar_i < tau1 or gbar_i > tau2 }, t_i = [gbar_i > tau2] on D.
struct PseudoLabels {
    std::vector<uint8_t> in_region;  // D
    std::vector<uint8_t> outlier;    // t, meaningful where in_region
    double lambda_weight = 1.0;
    double tau1 = 0.3, tau2 = 0.6;
    int n_t0 = 0, n_t1 = 0, n_excluded = 0;
};

PseudoLabels build_pseudo_labels(const std::vector<double>& gbar, double tau1, double tau2,
                                 ClassWeightMode mode);

struct LossResult {
    double loss = 0.0;
    std::vector<double> dlogits;  // [C][d]
};

// Context the anomaly-aware loss needs to push gradients through the
// calibrated outlier probability: the Platt scale (treated as a constant)
// and how the score map reacts to logits.
struct ScoreGradContext {
    double b_x = 1.0;
    ScoreKind kind = ScoreKind::energy;
    const std::vector<int>* argmax = nullptr;  // per pixel, for max_logit
};

// Entropy of the pseudo-labeled anomaly-aware distribution, restricted to D:
// inlier pixels tighten the seen-class prediction and push the outlier
// probability down, pseudo-outliers push it up, re-balanced by lambda.
// probs: per-pixel seen-class distribution [C][d] (doubles).
LossResult anomaly_entropy_loss(const std::vector<double>& probs, int classes, int pixels,
                                const std::vector<double>& gbar, const PseudoLabels& labels,
                                const ScoreGradContext& ctx);

// Closed-world entropy over all pixels (ablation variant).
LossResult seen_only_entropy_loss(const std::vector<double>& probs, int classes, int pixels);

struct PseudoLabelStats {
    int n_t0 = 0, n_t1 = 0, n_excluded = 0;
};

struct AdaptResult {
    Tensor F_out;                        // [C][h][w] inlier probabilities
    std::vector<double> G_out;           // raw outlier scores
    std::vector<double> Gbar_out;        // calibrated outlier probabilities
    DomainShiftEstimate domain;
    std::vector<double> loss_trace;      // one entry per self-training iteration
    PseudoLabelStats pl_stats;           // from the last iteration
    CalibrationParams calib;             // from the final calibration
    bool adapted = false;                // at least one optimizer step ran
    bool failed = false;                 // non-finite loss; frozen outputs returned
    double wall_ms = 0.0;                // filled by adapt_stream
};

// Episodic single-image adaptation: stage 1 mixes BN statistics by the
// inferred domain-shift probability, stage 2 self-trains the head on
// anomaly-aware pseudo-labels. The checkpoint is never mutated.
AdaptResult adapt_image(const ModelCheckpoint& ckpt, const Tensor& image,
                        const AdaptConfig& cfg);

// Frozen inference packaged like an adaptation result.
AdaptResult frozen_inference(const ModelCheckpoint& ckpt, const Tensor& image, ScoreKind kind);

// Episodic mode runs images independently (parallel, order-invariant);
// continue mode carries head parameters and optimizer state across the
// stream, strictly in order. A failed image yields frozen outputs and the
// stream keeps going.
std::vector<AdaptResult> adapt_stream(const ModelCheckpoint& ckpt,
                                      const std::vector<const Tensor*>& images,
                                      const AdaptConfig& cfg);

}  // namespace atta
