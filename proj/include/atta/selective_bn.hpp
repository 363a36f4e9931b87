#pragma once

#include "atta/net.hpp"

namespace atta {

// Closed-form KL(N(mu1,sigma1) || N(mu2,sigma2)).
double gaussian_kl(double mu1, double sigma1, double mu2, double sigma2);

// Channel KLs averaged within each layer, layer averages summed. Test-side
// stds are floored at 1e-6 before the divergence.
double kl_sum(const BnStats& batch, const BnStats& train);

// sigmoid((kl + a) / b), b > 0.
double domain_shift_probability(double kl, double a, double b);

struct DomainShiftEstimate {
    double kl_sum = 0.0;
    double probability = 0.0;
};

DomainShiftEstimate estimate_domain_shift(const BnStats& batch, const BnStats& train, double a,
                                          double b);

// mu_hat = p*mu(x) + (1-p)*mu_tr; sigma_hat^2 = p*sigma^2(x) + (1-p)*sigma_tr^2.
// Written in delta form so identical inputs pass through bit-exactly.
BnStats mix_bn_statistics(const BnStats& train, const BnStats& batch, double p);

}  // namespace atta
