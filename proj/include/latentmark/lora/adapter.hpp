#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "latentmark/core/autograd.hpp"
#include "latentmark/core/rng.hpp"
#include "latentmark/wm/message.hpp"

namespace latentmark::lora {

// Fine-tuning scopes over the denoiser layer inventory. Each scope is a
// superset of the previous one.
enum class FineTuneScope { attention_only, transformer, transformer_resnet, transformer_resnet_conv };

std::string scope_name(FineTuneScope s);
FineTuneScope scope_from_name(const std::string& name);

enum class LayerTag { attention, transformer_other, resnet, conv };

std::string tag_name(LayerTag t);
LayerTag tag_from_name(const std::string& name);

// Whether layers with this tag are adapted under the given scope.
bool scope_includes(FineTuneScope scope, LayerTag tag);

// One adaptable base weight, viewed as a d x k_out matrix.
struct LayerInfo {
    std::string target_id;
    LayerTag tag;
    int d = 0;
    int k_out = 0;
};

// Deterministically ordered (inventory order) list of adapted target ids.
std::vector<std::string> select_scope(const std::vector<LayerInfo>& inventory,
                                      FineTuneScope scope);

// Low-rank pair for one target weight. Parameters are autograd leaves so the
// same object serves training and inference; freeze by clearing needs_grad.
struct LoraLayer {
    std::string target_id;
    ag::Var A;  // [d, r]
    ag::Var B;  // [r, k_out]
    int rank = 0;
};

// f_phi: k message bits -> r diagonal entries. Two dense layers with a
// bounded output nonlinearity 2*tanh into [-2, 2].
struct MessageMapper {
    ag::Var w1, b1;  // [2r, k], [2r]
    ag::Var w2, b2;  // [r, 2r], [r]
    int k = 0;
    int r = 0;

    static MessageMapper init(int k, int r, Rng& rng);
    bool valid() const { return k > 0; }
};

// Graph-building forward (for joint training) and plain inference.
ag::Var mapper_forward_var(const MessageMapper& mapper, const wm::BitMessage& m);
std::vector<float> mapper_forward(const MessageMapper& mapper, const wm::BitMessage& m);

struct LoraAdapter {
    std::map<std::string, LoraLayer> layers;  // ordered by target_id
    std::optional<MessageMapper> mapper;      // absent for plain style adapters
    FineTuneScope scope = FineTuneScope::transformer_resnet;
    int rank = 0;
    float alpha = 1.0f;
    int k = 0;  // payload length the mapper accepts; 0 when mapper is absent

    // Diagonal vector for a message: f_phi(m) with a mapper, all-ones without.
    std::vector<float> modulation(const wm::BitMessage& m) const;
    std::vector<ag::Var> trainable_params() const;
    void freeze();
    int64_t adapter_param_count() const;  // A and B entries only
};

// Builds a zero-initialized adapter over the in-scope layers: A gaussian with
// std 1/sqrt(r), B zero, so delta_W = 0 at step 0. Per-layer init streams are
// derived from (seed, target_id), keeping shared layers identical across
// scopes.
LoraAdapter make_adapter(const std::vector<LayerInfo>& inventory, FineTuneScope scope, int rank,
                         int k, float alpha, uint64_t seed, bool with_mapper = true,
                         float init_scale = 1.0f);

// ----- pure adapter algebra (read-only on parameters) -----

// delta W = A * diag(v) * B.
Tensor delta_weight(const LoraLayer& layer, const std::vector<float>& v);

// y = W x + alpha * (A diag(v) B) x for a single input vector.
Tensor adapted_forward(const Tensor& W, const LoraLayer& layer, const std::vector<float>& v,
                       float alpha, const Tensor& x);

// W' = W + alpha * A diag(f_phi(m)) B for every adapted layer; untouched
// layers copied.
std::map<std::string, Tensor> merge_into_base(const std::map<std::string, Tensor>& base,
                                              const LoraAdapter& adapter, const wm::BitMessage& m,
                                              float alpha);

// Additive multi-adapter merge: W' = W + sum_j weight_j * alpha_j * dW_j.
// Adapters with a mapper contribute their message-modulated delta; plain
// adapters contribute A*B. Layers missing from an adapter contribute zero.
struct WeightedAdapter {
    const LoraAdapter* adapter;
    float weight = 1.0f;
    std::optional<wm::BitMessage> message;
};
std::map<std::string, Tensor> merge_adapters(const std::map<std::string, Tensor>& base,
                                             const std::vector<WeightedAdapter>& adapters);

// ----- graph-building path for joint training -----

// Maps a target id and its frozen base weight to the weight actually used in
// the forward pass.
using WeightResolver = std::function<ag::Var(const std::string& id, const ag::Var& base)>;

// Resolver computing W + alpha * A diag(v) B on the tape for adapted layers,
// with v a graph node (so mapper gradients flow); passes other weights
// through untouched.
WeightResolver adapted_resolver(const LoraAdapter& adapter, const ag::Var& v);

}  // namespace latentmark::lora
