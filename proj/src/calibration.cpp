#include "atta/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "atta/rng.hpp"

namespace atta {

namespace {

constexpr double kPiWeightFloor = 1e-3;
constexpr size_t kSubsampleCap = 10000;

double gauss_pdf(double x, double mu, double sigma) {
    const double z = (x - mu) / sigma;
    return std::exp(-0.5 * z * z) / (sigma * 2.5066282746310005024);
}

struct PeakInit {
    double mu1, mu2;
};

// Histogram-based initialization. Smooths with a centered moving average,
// then scans for local maxima (plateaus count once, at their left edge).
PeakInit histogram_peaks(const std::vector<double>& x, double lo, double hi,
                         const GmmOptions& opts, double stdev) {
    const int bins = opts.histogram_bins;
    std::vector<double> counts(static_cast<size_t>(bins), 0.0);
    const double width = (hi - lo) / bins;
    for (double v : x) {
        int b = static_cast<int>((v - lo) / width);
        b = std::clamp(b, 0, bins - 1);
        counts[static_cast<size_t>(b)] += 1.0;
    }
    std::vector<double> smooth(static_cast<size_t>(bins), 0.0);
    const int half = opts.smooth_window / 2;
    for (int b = 0; b < bins; ++b) {
        double acc = 0.0;
        int n = 0;
        for (int k = -half; k <= half; ++k) {
            const int j = b + k;
            if (j < 0 || j >= bins) continue;
            acc += counts[static_cast<size_t>(j)];
            ++n;
        }
        smooth[static_cast<size_t>(b)] = acc / n;
    }
    std::vector<int> peaks;
    for (int b = 0; b < bins; ++b) {
        const double c = smooth[static_cast<size_t>(b)];
        if (c <= 0.0) continue;
        const double left = b > 0 ? smooth[static_cast<size_t>(b - 1)] : -1.0;
        const double right = b + 1 < bins ? smooth[static_cast<size_t>(b + 1)] : -1.0;
        if (c > left && c >= right) peaks.push_back(b);
    }
    auto center = [&](int b) { return lo + (b + 0.5) * width; };
    PeakInit init{};
    if (peaks.empty()) {
        init.mu1 = lo + 0.25 * (hi - lo);
        init.mu2 = lo + 0.75 * (hi - lo);
        return init;
    }
    int rightmost = peaks.back();
    int global = peaks.front();
    for (int b : peaks)
        if (smooth[static_cast<size_t>(b)] > smooth[static_cast<size_t>(global)]) global = b;
    if (global == rightmost) {
        // Unimodal after smoothing: anchor the inlier component on the peak
        // and push the outlier component one std into the right tail, else
        // EM starts at a symmetric stationary point and never separates.
        init.mu1 = center(global);
        init.mu2 = center(global) + stdev;
    } else {
        init.mu1 = center(global);
        init.mu2 = center(rightmost);
    }
    return init;
}

}  // namespace

double sample_mean(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
    const double m = sample_mean(v);
    double acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size()));
}

GmmFit fit_gmm_1d(const std::vector<double>& scores, const GmmOptions& opts) {
    require(scores.size() >= 50, "fit_gmm_1d: need at least 50 samples");
    const size_t n = scores.size();
    GmmFit fit;
    const double stdev = sample_std(scores);
    if (stdev == 0.0) {
        fit.collapsed = true;
        fit.mu1 = fit.mu2 = scores[0];
        return fit;
    }
    const double lo = *std::min_element(scores.begin(), scores.end());
    const double hi = *std::max_element(scores.begin(), scores.end());
    const double sigma_floor = 1e-4 * stdev;

    PeakInit init = histogram_peaks(scores, lo, hi, opts, stdev);
    double pi[2] = {0.5, 0.5};
    double mu[2] = {init.mu1, init.mu2};
    double sg[2] = {stdev / 2.0, stdev / 2.0};

    std::vector<double> r1(n);
    double prev_ll = -std::numeric_limits<double>::infinity();
    for (int it = 0; it < opts.max_iter; ++it) {
        double ll = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double p1 = pi[0] * gauss_pdf(scores[i], mu[0], sg[0]);
            const double p2 = pi[1] * gauss_pdf(scores[i], mu[1], sg[1]);
            const double tot = p1 + p2;
            r1[i] = tot > 0.0 ? p1 / tot : 0.5;
            ll += std::log(std::max(tot, 1e-300));
        }
        fit.loglik_trace.push_back(ll);
        fit.log_likelihood = ll;
        fit.iterations = it + 1;
        if (ll - prev_ll < opts.tol && it > 0) {
            fit.converged = true;
            break;
        }
        prev_ll = ll;

        double n1 = 0.0;
        for (double r : r1) n1 += r;
        const double n2 = static_cast<double>(n) - n1;
        if (n1 / n < kPiWeightFloor || n2 / n < kPiWeightFloor) {
            fit.collapsed = true;
            break;
        }
        double m1 = 0.0, m2 = 0.0;
        for (size_t i = 0; i < n; ++i) {
            m1 += r1[i] * scores[i];
            m2 += (1.0 - r1[i]) * scores[i];
        }
        m1 /= n1;
        m2 /= n2;
        double v1 = 0.0, v2 = 0.0;
        for (size_t i = 0; i < n; ++i) {
            v1 += r1[i] * (scores[i] - m1) * (scores[i] - m1);
            v2 += (1.0 - r1[i]) * (scores[i] - m2) * (scores[i] - m2);
        }
        v1 /= n1;
        v2 /= n2;
        pi[0] = n1 / n;
        pi[1] = n2 / n;
        mu[0] = m1;
        mu[1] = m2;
        sg[0] = std::sqrt(v1);
        sg[1] = std::sqrt(v2);
        if (sg[0] < sigma_floor || sg[1] < sigma_floor) {
            fit.collapsed = true;
            break;
        }
    }
    if (fit.collapsed) fit.converged = false;

    int a = 0, b = 1;
    if (mu[0] > mu[1]) std::swap(a, b);
    fit.pi1 = pi[a];
    fit.pi2 = pi[b];
    fit.mu1 = mu[a];
    fit.mu2 = mu[b];
    fit.sigma1 = sg[a];
    fit.sigma2 = sg[b];
    return fit;
}

CrossingPoint crossing_point(const GmmFit& fit) {
    CrossingPoint out;
    const double s1 = fit.sigma1, s2 = fit.sigma2;
    const double m1 = fit.mu1, m2 = fit.mu2;
    const double range_lo = m1 - 3.0 * s1, range_hi = m2 + 3.0 * s2;
    const double midpoint = 0.5 * (m1 + m2);

    // Equate log densities: A a^2 + B a + C = 0.
    const double A = 0.5 / (s2 * s2) - 0.5 / (s1 * s1);
    const double B = m1 / (s1 * s1) - m2 / (s2 * s2);
    const double C = 0.5 * m2 * m2 / (s2 * s2) - 0.5 * m1 * m1 / (s1 * s1) -
                     std::log((fit.pi2 * s1) / (fit.pi1 * s2));

    double best = std::numeric_limits<double>::quiet_NaN();
    if (A == 0.0) {
        if (B != 0.0) best = -C / B;
    } else {
        const double disc = B * B - 4.0 * A * C;
        if (disc >= 0.0) {
            const double sq = std::sqrt(disc);
            const double r1 = (-B + sq) / (2.0 * A);
            const double r2 = (-B - sq) / (2.0 * A);
            best = std::max(r1, r2);
            // Prefer the largest root inside the plausible range.
            if (!(best >= range_lo && best <= range_hi)) {
                const double other = std::min(r1, r2);
                if (other >= range_lo && other <= range_hi) best = other;
            }
        }
    }
    if (!std::isfinite(best) || best < range_lo || best > range_hi) {
        out.a_x = midpoint;
        out.midpoint_fallback = true;
    } else {
        out.a_x = best;
    }
    return out;
}

std::vector<double> platt_calibrate(const std::vector<double>& scores,
                                    const CalibrationParams& params) {
    require(params.b_x > 0.0, "platt_calibrate: b_x must be positive");
    std::vector<double> out(scores.size());
    for (size_t i = 0; i < scores.size(); ++i)
        out[i] = 1.0 / (1.0 + std::exp(-(scores[i] - params.a_x) / params.b_x));
    return out;
}

CalibrationResult calibrate_image(const std::vector<double>& scores, CalibMode mode,
                                  const GmmOptions& opts) {
    require(scores.size() >= 50, "calibrate_image: need at least 50 pixels");
    CalibrationResult res;
    const double b_raw = sample_std(scores);
    const double b_x = std::max(b_raw, 1e-12);

    if (mode == CalibMode::gmm) {
        // Deterministic subsample seeded from the score bytes themselves, so
        // identical inputs calibrate identically no matter the stream order.
        const std::vector<double>* sample = &scores;
        std::vector<double> subsampled;
        if (scores.size() > kSubsampleCap) {
            const uint64_t seed =
                fnv1a64(scores.data(), scores.size() * sizeof(double));
            Rng rng(seed);
            std::vector<uint32_t> idx(scores.size());
            std::iota(idx.begin(), idx.end(), 0u);
            for (size_t i = 0; i < kSubsampleCap; ++i) {
                const size_t j = i + rng.below(idx.size() - i);
                std::swap(idx[i], idx[j]);
            }
            subsampled.reserve(kSubsampleCap);
            for (size_t i = 0; i < kSubsampleCap; ++i) subsampled.push_back(scores[idx[i]]);
            sample = &subsampled;
        }
        GmmFit fit = fit_gmm_1d(*sample, opts);
        if (fit.converged && !fit.collapsed) {
            CrossingPoint cp = crossing_point(fit);
            res.params.a_x = cp.a_x;
            res.params.b_x = b_x;
            res.params.fallback_used =
                cp.midpoint_fallback ? CalibFallback::midpoint : CalibFallback::none;
            res.fit = std::move(fit);
            res.gbar = platt_calibrate(scores, res.params);
            return res;
        }
        res.fit = std::move(fit);
        res.params.fallback_used = CalibFallback::zscore;
    } else {
        res.params.fallback_used = CalibFallback::none;
    }

    res.params.a_x = sample_mean(scores);
    res.params.b_x = b_x;
    res.gbar = platt_calibrate(scores, res.params);
    return res;
}

}  // namespace atta
