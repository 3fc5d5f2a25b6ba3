#include "latentmark/diffusion/sampler.hpp"

#include <cmath>
#include <stdexcept>

namespace latentmark::diffusion {

SamplerSpec::Kind sampler_kind_from_name(const std::string& name) {
    if (name == "ddpm") return SamplerSpec::Kind::ddpm;
    if (name == "ddim") return SamplerSpec::Kind::ddim;
    throw std::invalid_argument("unknown sampler: " + name);
}

Tensor encode_scaled(const LatentAutoencoder& ae, const Tensor& images) {
    Tensor z = ae.encode(images);
    const float s = ae.latent_scale();
    for (int64_t i = 0; i < z.numel(); ++i) z[i] *= s;
    return z;
}

Tensor decode_scaled(const LatentAutoencoder& ae, const Tensor& latents) {
    Tensor z = latents;
    const float s = 1.0f / ae.latent_scale();
    for (int64_t i = 0; i < z.numel(); ++i) z[i] *= s;
    return ae.decode(z);
}

Tensor predict_noise(const DenoiserModel& model, const lora::LoraAdapter* adapter,
                     const wm::BitMessage* m, const Tensor& z_t, int t,
                     const std::vector<int>& conds) {
    const std::vector<int> ts(conds.size(), t);
    if (!adapter) return model.forward(z_t, ts, conds);
    if (!m)
        throw std::invalid_argument("predict_noise: message required when adapter is present");
    std::vector<float> v = adapter->modulation(*m);
    lora::WeightResolver res = lora::adapted_resolver(
        *adapter, ag::constant(Tensor({adapter->rank}, std::vector<float>(v))));
    return model.forward_var(ag::constant(z_t), ts, conds, &res)->val;
}

namespace {

// Descending timestep ladder ending at 0.
std::vector<int> timestep_ladder(int T, int steps) {
    std::vector<int> taus(static_cast<size_t>(steps));
    for (int j = 0; j < steps; ++j)
        taus[static_cast<size_t>(j)] = int(int64_t(j + 1) * T / steps);
    return taus;  // ascending; consumed back to front
}

}  // namespace

std::vector<Tensor> sample_images(const DenoiserModel& model, const LatentAutoencoder& ae,
                                  const NoiseSchedule& schedule,
                                  const std::map<std::string, Tensor>* weight_override, int cond,
                                  const SamplerSpec& spec, int n, Rng& rng) {
    if (spec.steps < 1 || spec.steps > schedule.T)
        throw std::invalid_argument("sample_images: steps must be in [1, T]");
    if (spec.guidance < 0.0f) throw std::invalid_argument("sample_images: guidance must be >= 0");
    if (spec.eta < 0.0f || spec.eta > 1.0f)
        throw std::invalid_argument("sample_images: eta must be in [0,1]");
    if (cond < 0 || cond >= model.n_styles())
        throw std::invalid_argument("sample_images: bad condition index");

    constexpr int kChunk = 16;
    const int C = DenoiserModel::kLatentC, S = DenoiserModel::kLatentHW;
    const std::vector<int> taus = timestep_ladder(schedule.T, spec.steps);
    std::vector<Tensor> images;
    images.reserve(static_cast<size_t>(n));

    std::map<std::string, Tensor> empty;
    const std::map<std::string, Tensor>& weights = weight_override ? *weight_override : empty;

    for (int done = 0; done < n; done += kChunk) {
        const int B = std::min(kChunk, n - done);
        Tensor z({B, C, S, S});
        for (int64_t i = 0; i < z.numel(); ++i) z[i] = float(rng.gaussian());

        for (int j = spec.steps - 1; j >= 0; --j) {
            const int t = taus[static_cast<size_t>(j)];
            const int t_prev = j > 0 ? taus[static_cast<size_t>(j - 1)] : 0;
            const double ab_t = schedule.alpha_bar(t);
            const double ab_p = schedule.alpha_bar(t_prev);

            // conditional and unconditional passes batched together
            Tensor both({2 * B, C, S, S});
            std::copy_n(z.data(), z.numel(), both.data());
            std::copy_n(z.data(), z.numel(), both.data() + z.numel());
            std::vector<int> ts(static_cast<size_t>(2 * B), t);
            std::vector<int> cs(static_cast<size_t>(2 * B), cond);
            for (int b = 0; b < B; ++b) cs[static_cast<size_t>(B + b)] = model.uncond_index();
            Tensor eps_both = weight_override ? model.forward_with_weights(both, ts, cs, weights)
                                              : model.forward(both, ts, cs);
            Tensor eps({B, C, S, S});
            const float g = spec.guidance;
            for (int64_t i = 0; i < eps.numel(); ++i) {
                const float ec = eps_both[i];
                const float eu = eps_both[eps.numel() + i];
                eps[i] = eu + g * (ec - eu);
            }

            if (spec.kind == SamplerSpec::Kind::ddim) {
                const double sigma =
                    spec.eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) *
                    std::sqrt(std::max(0.0, 1.0 - ab_t / ab_p));
                const double dir = std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma));
                const double inv_sq = 1.0 / std::sqrt(ab_t);
                const double noise_coef = std::sqrt(1.0 - ab_t);
                for (int64_t i = 0; i < z.numel(); ++i) {
                    const double x0 = (z[i] - noise_coef * eps[i]) * inv_sq;
                    double zi = std::sqrt(ab_p) * x0 + dir * eps[i];
                    if (sigma > 0) zi += sigma * rng.gaussian();
                    z[i] = float(zi);
                }
            } else {
                const double a_eff = ab_t / ab_p;
                const double b_eff = 1.0 - a_eff;
                const double coef = b_eff / std::sqrt(1.0 - ab_t);
                const double inv = 1.0 / std::sqrt(a_eff);
                const double var = (1.0 - ab_p) / (1.0 - ab_t) * b_eff;
                const double sd = t_prev > 0 ? std::sqrt(std::max(0.0, var)) : 0.0;
                for (int64_t i = 0; i < z.numel(); ++i) {
                    double zi = (z[i] - coef * eps[i]) * inv;
                    if (sd > 0) zi += sd * rng.gaussian();
                    z[i] = float(zi);
                }
            }
        }

        Tensor decoded = decode_scaled(ae, z);
        for (int b = 0; b < B; ++b) {
            Tensor img({3, LatentAutoencoder::kImageSize, LatentAutoencoder::kImageSize});
            std::copy_n(decoded.data() + int64_t(b) * img.numel(), img.numel(), img.data());
            for (int64_t i = 0; i < img.numel(); ++i)
                img[i] = std::min(1.0f, std::max(0.0f, img[i]));
            images.push_back(std::move(img));
        }
    }
    return images;
}

}  // namespace latentmark::diffusion
