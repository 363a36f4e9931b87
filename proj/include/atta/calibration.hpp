#pragma once

#include <optional>
#include <vector>

#include "atta/tensor.hpp"

namespace atta {

struct GmmOptions {
    int histogram_bins = 50;
    int smooth_window = 3;
    int max_iter = 100;
    double tol = 1e-6;
};

struct GmmFit {
    double pi1 = 0.5, pi2 = 0.5;
    double mu1 = 0.0, mu2 = 0.0;      // sorted: mu1 <= mu2
    double sigma1 = 1.0, sigma2 = 1.0;
    double log_likelihood = 0.0;
    int iterations = 0;
    bool converged = false;
    bool collapsed = false;
    std::vector<double> loglik_trace;
};

// Two-component 1-D EM. Initialization from a smoothed histogram: the second
// component starts at the right-most local peak, the first at the highest
// peak. Requires at least 50 samples.
GmmFit fit_gmm_1d(const std::vector<double>& scores, const GmmOptions& opts = {});

struct CrossingPoint {
    double a_x = 0.0;
    bool midpoint_fallback = false;
};

// Largest score where the two weighted component densities are equal; falls
// back to the component-mean midpoint if no usable root exists.
CrossingPoint crossing_point(const GmmFit& fit);

enum class CalibFallback { none, midpoint, zscore };

struct CalibrationParams {
    double a_x = 0.0;
    double b_x = 1.0;
    CalibFallback fallback_used = CalibFallback::none;
};

// Elementwise sigmoid((G_i - a_x) / b_x).
std::vector<double> platt_calibrate(const std::vector<double>& scores,
                                    const CalibrationParams& params);

enum class CalibMode { gmm, zscore };

struct CalibrationResult {
    std::vector<double> gbar;
    CalibrationParams params;
    std::optional<GmmFit> fit;
};

// Full per-image calibration: GMM fit on (a deterministic subsample of) the
// scores, crossing point as the Platt shift, sample std as the Platt scale.
// GMM collapse degrades to the z-score variant.
CalibrationResult calibrate_image(const std::vector<double>& scores, CalibMode mode,
                                  const GmmOptions& opts = {});

double sample_mean(const std::vector<double>& v);
double sample_std(const std::vector<double>& v);  // biased

}  // namespace atta
