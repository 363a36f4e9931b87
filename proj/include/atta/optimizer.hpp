#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

namespace atta {

// Adam over float parameters stored in multiple vectors; moment buffers are
// indexed by a caller-managed flat offset. One step_begin() per update, then
// apply() once per parameter slice.
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step = 0;
    std::vector<double> m, v;

    void reset(size_t total) {
        step = 0;
        m.assign(total, 0.0);
        v.assign(total, 0.0);
    }

    void step_begin() {
        ++step;
        bc1_ = 1.0 - std::pow(beta1, static_cast<double>(step));
        bc2_ = 1.0 - std::pow(beta2, static_cast<double>(step));
    }

    void apply(size_t offset, float* params, const double* grad, size_t n) {
        for (size_t i = 0; i < n; ++i) {
            double& mi = m[offset + i];
            double& vi = v[offset + i];
            mi = beta1 * mi + (1.0 - beta1) * grad[i];
            vi = beta2 * vi + (1.0 - beta2) * grad[i] * grad[i];
            const double mhat = mi / bc1_;
            const double vhat = vi / bc2_;
            params[i] = static_cast<float>(params[i] - lr * mhat / (std::sqrt(vhat) + eps));
        }
    }

private:
    double bc1_ = 1.0, bc2_ = 1.0;
};

}  // namespace atta
