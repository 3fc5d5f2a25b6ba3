#pragma once

#include <string>
#include <vector>

#include "latentmark/core/rng.hpp"
#include "latentmark/nn/layers.hpp"
#include "latentmark/wm/loss_math.hpp"
#include "latentmark/wm/message.hpp"

namespace latentmark::wm {

// Stage-1 watermark codec: a message-only latent encoder E_s (dense layer,
// reshape, three transposed-conv blocks up to the 4x8x8 latent) and a pixel
// decoder D_s (four strided conv blocks, global average pool, dense head to
// k logits).
class WatermarkCodec {
public:
    static constexpr int kImageSize = 32;
    static constexpr int kLatentC = 4;
    static constexpr int kLatentHW = 8;

    // encoder_gain sets the initial per-channel output gain of E_s; the gain
    // is trainable, so this only controls how strong the watermark starts
    // relative to the latent scale.
    WatermarkCodec(int k, HueBand band, uint64_t seed, float encoder_gain = 0.7f);

    int k() const { return k_; }
    const HueBand& band() const { return band_; }
    std::vector<int> latent_shape() const { return {kLatentC, kLatentHW, kLatentHW}; }

    // E_s over a batch of messages [N,k] -> [N,4,8,8].
    ag::Var encode_var(const Tensor& messages) const;
    // E_s(m) for a single message (deterministic in m).
    Tensor encode(const BitMessage& m) const;

    // D_s: [N,3,32,32] -> [N,k] bit probabilities (sigmoid outputs).
    ag::Var decode_var(const ag::Var& images) const;
    std::vector<double> decode_probs(const Tensor& image) const;
    BitMessage decode_bits(const Tensor& image) const;

    nn::ParamSet& params() { return params_; }
    const nn::ParamSet& params() const { return params_; }
    void freeze() { params_.freeze(); }
    std::string weight_checksum() const;

    void save(const std::string& path) const;
    static WatermarkCodec load(const std::string& path);

private:
    int k_;
    HueBand band_;
    nn::ParamSet params_;
    nn::Dense e_fc_;
    nn::ConvTranspose2d e_ct1_, e_ct2_, e_ct3_;
    ag::Var e_gain_;
    ag::Var d_blur_;
    nn::Conv2d d_c1_, d_c2_, d_c3_, d_c4_;
    nn::Dense d_fc_;
};

// z_w = z_o + E_s(m), with the all-zero message returning z_o bit-identically.
Tensor embed_latent(const Tensor& z_o, const BitMessage& m, const WatermarkCodec& codec);

}  // namespace latentmark::wm
