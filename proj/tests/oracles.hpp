#pragma once

// Brute-force reference implementations and finite-difference helpers used
// by the unit and acceptance suites. Everything here is deliberately naive
// and independent of the library's computation paths.

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "atta/metrics.hpp"

namespace oracle {

// Pair counting: P(score_ood > score_in) + 0.5 P(equal).
inline double auroc_bruteforce(const atta::ScoredPixels& sp) {
    double u = 0.0;
    long npos = 0, nneg = 0;
    for (size_t i = 0; i < sp.scores.size(); ++i) {
        if (!sp.is_ood[i]) continue;
        ++npos;
        for (size_t j = 0; j < sp.scores.size(); ++j) {
            if (sp.is_ood[j]) continue;
            if (sp.scores[i] > sp.scores[j])
                u += 1.0;
            else if (sp.scores[i] == sp.scores[j])
                u += 0.5;
        }
    }
    for (uint8_t v : sp.is_ood) nneg += !v;
    return u / (static_cast<double>(npos) * static_cast<double>(nneg));
}

// Exhaustive threshold enumeration, descending, one group per distinct
// score; counts recomputed with a full pass per threshold.
inline double ap_bruteforce(const atta::ScoredPixels& sp) {
    std::set<double, std::greater<double>> thresholds(sp.scores.begin(), sp.scores.end());
    long npos = 0;
    for (uint8_t v : sp.is_ood) npos += v;
    double ap = 0.0, recall_prev = 0.0;
    for (double tau : thresholds) {
        long tp = 0, fp = 0;
        for (size_t i = 0; i < sp.scores.size(); ++i)
            if (sp.scores[i] >= tau) (sp.is_ood[i] ? tp : fp)++;
        const double recall = static_cast<double>(tp) / static_cast<double>(npos);
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
    }
    return ap;
}

inline double fpr95_bruteforce(const atta::ScoredPixels& sp) {
    std::set<double, std::greater<double>> thresholds(sp.scores.begin(), sp.scores.end());
    long npos = 0, nneg = 0;
    for (uint8_t v : sp.is_ood) (v ? npos : nneg)++;
    double best = 1.0;
    bool found = false;
    for (double tau : thresholds) {
        long tp = 0, fp = 0;
        for (size_t i = 0; i < sp.scores.size(); ++i)
            if (sp.scores[i] >= tau) (sp.is_ood[i] ? tp : fp)++;
        if (static_cast<double>(tp) / static_cast<double>(npos) >= 0.95) {
            const double fpr = static_cast<double>(fp) / static_cast<double>(nneg);
            if (!found || fpr < best) best = fpr;
            found = true;
        }
    }
    return found ? best : 1.0;
}

// Central finite differences of a scalar function over a float parameter
// vector; the function must read the parameters through the given pointer.
inline std::vector<double> central_differences(float* params, size_t n,
                                               const std::function<double()>& eval,
                                               double step = 1e-3) {
    std::vector<double> grad(n);
    for (size_t i = 0; i < n; ++i) {
        const float saved = params[i];
        params[i] = static_cast<float>(saved + step);
        const double up = eval();
        params[i] = static_cast<float>(saved - step);
        const double down = eval();
        params[i] = saved;
        grad[i] = (up - down) / (2.0 * step);
    }
    return grad;
}

inline double rel_error_norm(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, ref = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        ref += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-300);
}

inline double gauss_pdf(double x, double mu, double sigma) {
    const double z = (x - mu) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * std::sqrt(2.0 * 3.14159265358979323846));
}

}  // namespace oracle
