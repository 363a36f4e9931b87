#include "atta/selective_bn.hpp"

#include <cmath>

namespace atta {

namespace {
constexpr double kSigmaFloor = 1e-6;
}

double gaussian_kl(double mu1, double sigma1, double mu2, double sigma2) {
    require(sigma1 > 0.0 && sigma2 > 0.0, "gaussian_kl: standard deviations must be positive");
    const double dm = mu1 - mu2;
    return std::log(sigma2 / sigma1) + (sigma1 * sigma1 + dm * dm) / (2.0 * sigma2 * sigma2) - 0.5;
}

double kl_sum(const BnStats& batch, const BnStats& train) {
    require(batch.size() == train.size(), "kl_sum: layer count mismatch");
    double total = 0.0;
    for (size_t l = 0; l < batch.size(); ++l) {
        const auto& b = batch[l];
        const auto& t = train[l];
        require(b.mean.size() == t.mean.size() && b.stdd.size() == t.stdd.size(),
                "kl_sum: channel count mismatch");
        double layer = 0.0;
        const size_t c = b.mean.size();
        for (size_t ch = 0; ch < c; ++ch) {
            const double sb = std::max(static_cast<double>(b.stdd[ch]), kSigmaFloor);
            layer += gaussian_kl(b.mean[ch], sb, t.mean[ch], t.stdd[ch]);
        }
        total += layer / static_cast<double>(c);
    }
    return total;
}

double domain_shift_probability(double kl, double a, double b) {
    require(b > 0.0, "domain_shift_probability: b must be positive");
    return 1.0 / (1.0 + std::exp(-(kl + a) / b));
}

DomainShiftEstimate estimate_domain_shift(const BnStats& batch, const BnStats& train, double a,
                                          double b) {
    DomainShiftEstimate e;
    e.kl_sum = kl_sum(batch, train);
    e.probability = domain_shift_probability(e.kl_sum, a, b);
    return e;
}

BnStats mix_bn_statistics(const BnStats& train, const BnStats& batch, double p) {
    require(p >= 0.0 && p <= 1.0, "mix_bn_statistics: p must be in [0,1]");
    require(train.size() == batch.size(), "mix_bn_statistics: layer count mismatch");
    BnStats mixed(train.size());
    for (size_t l = 0; l < train.size(); ++l) {
        const auto& t = train[l];
        const auto& b = batch[l];
        require(t.mean.size() == b.mean.size(), "mix_bn_statistics: channel count mismatch");
        auto& m = mixed[l];
        const size_t c = t.mean.size();
        m.mean.resize(c);
        m.stdd.resize(c);
        for (size_t ch = 0; ch < c; ++ch) {
            const double mt = t.mean[ch], mb = b.mean[ch];
            m.mean[ch] = static_cast<float>(mt + p * (mb - mt));
            const double vt = static_cast<double>(t.stdd[ch]) * t.stdd[ch];
            const double vb = static_cast<double>(b.stdd[ch]) * b.stdd[ch];
            // Bit-exact passthrough when the stds agree: sqrt(vt) can be an
            // ulp off the stored std, which would break the identity contract.
            m.stdd[ch] = (t.stdd[ch] == b.stdd[ch])
                             ? t.stdd[ch]
                             : static_cast<float>(std::sqrt(vt + p * (vb - vt)));
        }
    }
    return mixed;
}

}  // namespace atta
