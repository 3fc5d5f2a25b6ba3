#pragma once

#include <map>
#include <string>
#include <vector>

#include "latentmark/core/rng.hpp"
#include "latentmark/diffusion/schedule.hpp"
#include "latentmark/lora/adapter.hpp"
#include "latentmark/nn/layers.hpp"

namespace latentmark::diffusion {

struct DenoiserTrainConfig {
    int epochs = 14;
    int batch_size = 32;
    float learning_rate = 8e-4f;
    float weight_decay = 1e-5f;
    double cond_dropout = 0.1;  // fraction trained against the uncond slot
};

// Toy conditional UNet over 4x8x8 latents: two ResNet blocks per level on an
// 8x8 -> 4x4 -> 8x8 path, a self-attention + feed-forward pair at the 4x4
// bottleneck, sinusoidal time features and learned class embeddings. Every
// adaptable weight carries exactly one scope tag (attention /
// transformer-other / resnet / conv); biases, norms, embeddings and the time
// MLP are not adaptable.
class DenoiserModel {
public:
    static constexpr int kChannels = 64;
    static constexpr int kEmb = 128;
    static constexpr int kLatentC = 4;
    static constexpr int kLatentHW = 8;

    DenoiserModel(int n_styles, uint64_t seed);

    int n_styles() const { return n_styles_; }
    int uncond_index() const { return n_styles_; }

    const std::vector<lora::LayerInfo>& inventory() const { return inventory_; }

    // eps prediction; resolver (optional) substitutes adapted weights.
    ag::Var forward_var(const ag::Var& z, const std::vector<int>& ts,
                        const std::vector<int>& conds,
                        const lora::WeightResolver* resolver = nullptr) const;
    Tensor forward(const Tensor& z, const std::vector<int>& ts,
                   const std::vector<int>& conds) const;
    // Forward with explicitly substituted weight tensors (merged models).
    Tensor forward_with_weights(const Tensor& z, const std::vector<int>& ts,
                                const std::vector<int>& conds,
                                const std::map<std::string, Tensor>& weights) const;

    // Natural-shape copies of all adaptable weights (merge targets).
    std::map<std::string, Tensor> adaptable_weights() const;

    // Standard eps-matching training over encoded latents (conditional with
    // dropout to the uncond slot). Returns per-epoch mean loss.
    std::vector<double> train_base(const std::vector<Tensor>& latents,
                                   const std::vector<int>& styles, const NoiseSchedule& schedule,
                                   const DenoiserTrainConfig& cfg, Rng& rng);

    void freeze() { params_.freeze(); }
    nn::ParamSet& params() { return params_; }
    std::string weight_checksum() const;

    void save(const std::string& path) const;
    static DenoiserModel load(const std::string& path);

private:
    struct ResBlock {
        nn::GroupNorm n1, n2;
        nn::Conv2d c1, c2;
        nn::Dense tproj;
        nn::Conv2d shortcut;  // 1x1, used when in != out
        bool has_shortcut = false;
    };

    ResBlock make_block(const std::string& prefix, int cin, int cout, Rng& rng);
    ag::Var res_forward(const ResBlock& blk, const std::string& prefix, const ag::Var& x,
                        const ag::Var& emb, const lora::WeightResolver* resolver) const;
    ag::Var resolve(const std::string& id, const ag::Var& w,
                    const lora::WeightResolver* resolver) const;

    int n_styles_;
    nn::ParamSet params_;
    std::vector<lora::LayerInfo> inventory_;

    nn::Conv2d conv_in_, down_, up_, conv_out_;
    nn::GroupNorm norm_out_;
    ResBlock d1_, d2_, m1_, m2_, u1_, u2_;
    nn::GroupNorm attn_norm_, ffn_norm_;
    ag::Var wq_, wk_, wv_, wo_;
    nn::Conv2d ffn1_, ffn2_;
    nn::Dense time1_, time2_;
    ag::Var cond_table_;
};

}  // namespace latentmark::diffusion
