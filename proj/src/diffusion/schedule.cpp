#include "latentmark/diffusion/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace latentmark::diffusion {

double NoiseSchedule::alpha_bar(int t) const {
    if (t < 0 || t > T) throw std::out_of_range("alpha_bar: t out of [0, T]");
    return alpha_bars[static_cast<size_t>(t)];
}

double NoiseSchedule::beta(int t) const {
    if (t < 1 || t > T) throw std::out_of_range("beta: t out of [1, T]");
    return betas[static_cast<size_t>(t - 1)];
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
        throw std::invalid_argument("make_schedule: requires 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T) + 1);
    s.alpha_bars[0] = 1.0;
    for (int t = 1; t <= T; ++t) {
        const double b =
            T == 1 ? beta_start : beta_start + (beta_end - beta_start) * double(t - 1) / (T - 1);
        s.betas[static_cast<size_t>(t - 1)] = b;
        s.alpha_bars[static_cast<size_t>(t)] = s.alpha_bars[static_cast<size_t>(t - 1)] * (1.0 - b);
    }
    return s;
}

Tensor q_sample(const Tensor& z, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    if (!z.same_shape(eps)) throw std::invalid_argument("q_sample: shape mismatch");
    const double ab = schedule.alpha_bar(t);
    const float a = float(std::sqrt(ab)), b = float(std::sqrt(1.0 - ab));
    Tensor out(z.shape());
    for (int64_t i = 0; i < z.numel(); ++i) out[i] = a * z[i] + b * eps[i];
    return out;
}

ag::Var q_sample_var(const ag::Var& z, int t, const Tensor& eps, const NoiseSchedule& schedule) {
    if (!z->val.same_shape(eps)) throw std::invalid_argument("q_sample: shape mismatch");
    const double ab = schedule.alpha_bar(t);
    const float a = float(std::sqrt(ab)), b = float(std::sqrt(1.0 - ab));
    Tensor noise(eps.shape());
    for (int64_t i = 0; i < eps.numel(); ++i) noise[i] = b * eps[i];
    return ag::add(ag::scale(z, a), ag::constant(std::move(noise)));
}

}  // namespace latentmark::diffusion
