#include "atta/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace atta {

namespace {

struct Counts {
    long pos = 0, neg = 0;
};

Counts class_counts(const ScoredPixels& sp) {
    if (sp.scores.size() != sp.is_ood.size() || sp.scores.empty())
        throw MetricError("scored pixels: scores and labels must be same nonempty length");
    Counts c;
    for (uint8_t v : sp.is_ood) (v ? c.pos : c.neg)++;
    if (c.pos == 0 || c.neg == 0)
        throw MetricError("metric undefined: need both novel and inlier pixels");
    return c;
}

// Indices sorted by score; ties left in index order (irrelevant, ties are
// processed as groups).
std::vector<int> order_by_score(const ScoredPixels& sp, bool descending) {
    std::vector<int> idx(sp.scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (descending)
        std::stable_sort(idx.begin(), idx.end(),
                         [&](int a, int b) { return sp.scores[a] > sp.scores[b]; });
    else
        std::stable_sort(idx.begin(), idx.end(),
                         [&](int a, int b) { return sp.scores[a] < sp.scores[b]; });
    return idx;
}

}  // namespace

double auroc(const ScoredPixels& sp) {
    const Counts c = class_counts(sp);
    const auto idx = order_by_score(sp, /*descending=*/false);
    double u = 0.0;  // winning pair count, ties worth one half
    long neg_below = 0;
    size_t i = 0;
    while (i < idx.size()) {
        size_t j = i;
        long gpos = 0, gneg = 0;
        while (j < idx.size() && sp.scores[idx[j]] == sp.scores[idx[i]]) {
            (sp.is_ood[idx[j]] ? gpos : gneg)++;
            ++j;
        }
        u += static_cast<double>(gpos) * static_cast<double>(neg_below) +
             0.5 * static_cast<double>(gpos) * static_cast<double>(gneg);
        neg_below += gneg;
        i = j;
    }
    return u / (static_cast<double>(c.pos) * static_cast<double>(c.neg));
}

double average_precision(const ScoredPixels& sp) {
    const Counts c = class_counts(sp);
    const auto idx = order_by_score(sp, /*descending=*/true);
    double ap = 0.0;
    double recall_prev = 0.0;
    long tp = 0, fp = 0;
    size_t i = 0;
    while (i < idx.size()) {
        size_t j = i;
        while (j < idx.size() && sp.scores[idx[j]] == sp.scores[idx[i]]) {
            (sp.is_ood[idx[j]] ? tp : fp)++;
            ++j;
        }
        const double recall = static_cast<double>(tp) / static_cast<double>(c.pos);
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j;
    }
    return ap;
}

double fpr_at_95_tpr(const ScoredPixels& sp) {
    const Counts c = class_counts(sp);
    const auto idx = order_by_score(sp, /*descending=*/true);
    long tp = 0, fp = 0;
    size_t i = 0;
    while (i < idx.size()) {
        size_t j = i;
        while (j < idx.size() && sp.scores[idx[j]] == sp.scores[idx[i]]) {
            (sp.is_ood[idx[j]] ? tp : fp)++;
            ++j;
        }
        // FPR is nondecreasing as the threshold drops, so the first
        // qualifying threshold gives the minimum.
        if (static_cast<double>(tp) / static_cast<double>(c.pos) >= 0.95)
            return static_cast<double>(fp) / static_cast<double>(c.neg);
        i = j;
    }
    return 1.0;
}

SegScores seg_metrics(const std::vector<int>& pred, const std::vector<int>& truth,
                      const std::vector<uint8_t>& ood_mask, int classes) {
    if (pred.size() != truth.size() || pred.size() != ood_mask.size())
        throw MetricError("seg_metrics: shape mismatch");
    std::vector<long> tp(static_cast<size_t>(classes) + 1, 0);
    std::vector<long> fp(static_cast<size_t>(classes) + 1, 0);
    std::vector<long> fn(static_cast<size_t>(classes) + 1, 0);
    for (size_t i = 0; i < pred.size(); ++i) {
        if (ood_mask[i]) continue;
        const int t = truth[i];
        if (t < 1 || t > classes) continue;  // 0 is ignore
        const int p = pred[i];
        if (p == t) {
            ++tp[static_cast<size_t>(t)];
        } else {
            ++fn[static_cast<size_t>(t)];
            if (p >= 1 && p <= classes) ++fp[static_cast<size_t>(p)];
        }
    }
    SegScores out;
    int present = 0;
    for (int cl = 1; cl <= classes; ++cl) {
        const long denom_acc = tp[static_cast<size_t>(cl)] + fn[static_cast<size_t>(cl)];
        if (denom_acc == 0) continue;  // absent from ground truth
        ++present;
        const long denom_iou = denom_acc + fp[static_cast<size_t>(cl)];
        out.miou += static_cast<double>(tp[static_cast<size_t>(cl)]) / denom_iou;
        out.macc += static_cast<double>(tp[static_cast<size_t>(cl)]) / denom_acc;
    }
    if (present > 0) {
        out.miou /= present;
        out.macc /= present;
    }
    return out;
}

Histogram score_histogram(const ScoredPixels& sp, int bins) {
    if (sp.scores.empty() || bins < 1) throw MetricError("score_histogram: empty input");
    const auto [lo_it, hi_it] = std::minmax_element(sp.scores.begin(), sp.scores.end());
    double lo = *lo_it, hi = *hi_it;
    if (hi == lo) hi = lo + 1.0;  // degenerate range
    Histogram h;
    h.edges.resize(static_cast<size_t>(bins) + 1);
    for (int b = 0; b <= bins; ++b)
        h.edges[static_cast<size_t>(b)] = lo + (hi - lo) * b / bins;
    h.inlier.assign(static_cast<size_t>(bins), 0);
    h.outlier.assign(static_cast<size_t>(bins), 0);
    for (size_t i = 0; i < sp.scores.size(); ++i) {
        int b = static_cast<int>((sp.scores[i] - lo) / (hi - lo) * bins);
        b = std::clamp(b, 0, bins - 1);
        (sp.is_ood[i] ? h.outlier : h.inlier)[static_cast<size_t>(b)]++;
    }
    return h;
}

}  // namespace atta
