#pragma once

#include <vector>

#include "latentmark/core/autograd.hpp"
#include "latentmark/core/tensor.hpp"

namespace latentmark::diffusion {

// Linear-beta DDPM schedule. alpha_bars[t] = prod_{s<=t} (1 - beta_s) with
// alpha_bars[0] = 1 (no noise); betas are 1-indexed conceptually and stored
// at betas[t-1].
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;       // size T
    std::vector<double> alpha_bars;  // size T+1, strictly decreasing after index 0

    double alpha_bar(int t) const;
    double beta(int t) const;  // t in [1, T]
};

NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

// sqrt(abar_t) * z + sqrt(1 - abar_t) * eps.
Tensor q_sample(const Tensor& z, int t, const Tensor& eps, const NoiseSchedule& schedule);
ag::Var q_sample_var(const ag::Var& z, int t, const Tensor& eps, const NoiseSchedule& schedule);

}  // namespace latentmark::diffusion
