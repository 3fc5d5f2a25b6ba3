#pragma once

#include <string>
#include <vector>

#include "latentmark/core/rng.hpp"
#include "latentmark/nn/layers.hpp"

namespace latentmark::diffusion {

struct AutoencoderTrainConfig {
    int epochs = 12;
    int batch_size = 32;
    float learning_rate = 2e-3f;
    float weight_decay = 1e-5f;
    // Gaussian latent jitter during decoder training. Keeps the decoder
    // responsive across the whole latent neighborhood instead of contracting
    // off-manifold directions, which both the latent watermark and diffusion
    // sampling rely on.
    float latent_noise = 0.1f;
};

// Toy latent autoencoder: 3x32x32 RGB <-> 4x8x8 latent. The decoder ends in a
// sigmoid so decoded images always land in [0,1]. After training, the scale
// 1/std of training latents is stored so diffusion sees ~unit-variance
// latents.
class LatentAutoencoder {
public:
    static constexpr int kImageSize = 32;
    static constexpr int kLatentChannels = 4;
    static constexpr int kLatentSize = 8;

    explicit LatentAutoencoder(uint64_t init_seed = 1);

    std::vector<int> latent_shape() const { return {kLatentChannels, kLatentSize, kLatentSize}; }

    // Batched [N,3,32,32] -> [N,4,8,8] without a tape (frozen use).
    Tensor encode(const Tensor& images) const;
    // Batched decode; the Var path lets gradients flow through frozen weights.
    Tensor decode(const Tensor& latents) const;
    ag::Var decode_var(const ag::Var& latents) const;

    // Reconstruction-MSE training; returns per-epoch held-out PSNR. The model
    // is frozen by the caller once training ends.
    std::vector<double> train(const std::vector<Tensor>& train_images,
                              const std::vector<Tensor>& heldout_images,
                              const AutoencoderTrainConfig& cfg, Rng& rng);

    double heldout_psnr(const std::vector<Tensor>& images) const;

    float latent_scale() const { return latent_scale_; }
    void freeze() { params_.freeze(); }
    nn::ParamSet& params() { return params_; }

    void save(const std::string& path) const;
    static LatentAutoencoder load(const std::string& path);

private:
    ag::Var encode_var(const ag::Var& images) const;

    nn::ParamSet params_;
    nn::Conv2d e1_, e2_, e3_, e4_;
    nn::Conv2d d1_, d2_, d3_, d4_;
    float latent_scale_ = 1.0f;
};

}  // namespace latentmark::diffusion
