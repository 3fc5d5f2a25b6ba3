#pragma once

#include <map>
#include <optional>
#include <vector>

#include "latentmark/diffusion/autoencoder.hpp"
#include "latentmark/diffusion/denoiser.hpp"
#include "latentmark/diffusion/schedule.hpp"

namespace latentmark::diffusion {

struct SamplerSpec {
    enum class Kind { ddpm, ddim };
    Kind kind = Kind::ddim;
    int steps = 20;
    float guidance = 3.0f;  // eps_u + g * (eps_c - eps_u)
    float eta = 0.0f;       // ddim only
};

SamplerSpec::Kind sampler_kind_from_name(const std::string& name);

// Latents are scaled to ~unit variance for the denoiser; these helpers keep
// the convention in one place.
Tensor encode_scaled(const LatentAutoencoder& ae, const Tensor& images);
Tensor decode_scaled(const LatentAutoencoder& ae, const Tensor& latents);

// eps prediction with an optional message-modulated adapter (Eq. 7 path).
// Requires a message whenever an adapter is given.
Tensor predict_noise(const DenoiserModel& model, const lora::LoraAdapter* adapter,
                     const wm::BitMessage* m, const Tensor& z_t, int t,
                     const std::vector<int>& conds);

// Classifier-free-guided reverse process from unit Gaussian latents, decoded
// through the autoencoder and clipped to [0,1]. weight_override substitutes
// merged weights for the listed targets.
std::vector<Tensor> sample_images(const DenoiserModel& model, const LatentAutoencoder& ae,
                                  const NoiseSchedule& schedule,
                                  const std::map<std::string, Tensor>* weight_override, int cond,
                                  const SamplerSpec& spec, int n, Rng& rng);

}  // namespace latentmark::diffusion
