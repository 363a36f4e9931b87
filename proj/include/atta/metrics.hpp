#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace atta {

class MetricError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ScoredPixels {
    std::vector<double> scores;
    std::vector<uint8_t> is_ood;
};

// Probability that a random novel pixel outscores a random inlier pixel,
// ties counted half (rank-based Mann-Whitney).
double auroc(const ScoredPixels& sp);

// Step-interpolated precision-recall area, novel class positive, tied scores
// processed as one threshold group.
double average_precision(const ScoredPixels& sp);

// Minimum false-positive rate over thresholds (score >= tau) reaching a
// true-positive rate of at least 0.95.
double fpr_at_95_tpr(const ScoredPixels& sp);

struct SegScores {
    double miou = 0.0;
    double macc = 0.0;
};

// Mean IoU and mean per-class accuracy over seen classes, restricted to
// pixels outside the novel mask; classes absent from ground truth are
// excluded from the means. Label 0 is ignored.
SegScores seg_metrics(const std::vector<int>& pred, const std::vector<int>& truth,
                      const std::vector<uint8_t>& ood_mask, int classes);

struct Histogram {
    std::vector<double> edges;    // bins+1 edges
    std::vector<int64_t> inlier;  // per-bin counts
    std::vector<int64_t> outlier;
};

Histogram score_histogram(const ScoredPixels& sp, int bins = 50);

struct PerImageEval {
    bool detection_defined = false;  // both classes present
    double auroc = 0.0, ap = 0.0, fpr95 = 0.0;
    double miou = 0.0, macc = 0.0;
    double domain_probability = 0.0;
    double kl_sum = 0.0;
    double ms = 0.0;
    int n_t0 = 0, n_t1 = 0, n_excluded = 0;
    bool failed = false;
};

struct EvalReport {
    double auroc = 0.0, ap = 0.0, fpr95 = 0.0;  // pooled over all pixels
    double miou = 0.0, macc = 0.0;
    std::vector<PerImageEval> per_image;
    Histogram hist;
};

}  // namespace atta
