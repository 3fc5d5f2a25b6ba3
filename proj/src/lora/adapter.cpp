#include "latentmark/lora/adapter.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

#include "latentmark/nn/layers.hpp"

namespace latentmark::lora {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

std::string scope_name(FineTuneScope s) {
    switch (s) {
        case FineTuneScope::attention_only: return "attention_only";
        case FineTuneScope::transformer: return "transformer";
        case FineTuneScope::transformer_resnet: return "transformer_resnet";
        case FineTuneScope::transformer_resnet_conv: return "transformer_resnet_conv";
    }
    throw std::logic_error("scope_name: bad enum");
}

FineTuneScope scope_from_name(const std::string& name) {
    if (name == "attention_only") return FineTuneScope::attention_only;
    if (name == "transformer") return FineTuneScope::transformer;
    if (name == "transformer_resnet") return FineTuneScope::transformer_resnet;
    if (name == "transformer_resnet_conv") return FineTuneScope::transformer_resnet_conv;
    throw std::invalid_argument("unknown fine-tune scope: " + name);
}

std::string tag_name(LayerTag t) {
    switch (t) {
        case LayerTag::attention: return "attention";
        case LayerTag::transformer_other: return "transformer-other";
        case LayerTag::resnet: return "resnet";
        case LayerTag::conv: return "conv";
    }
    throw std::logic_error("tag_name: bad enum");
}

LayerTag tag_from_name(const std::string& name) {
    if (name == "attention") return LayerTag::attention;
    if (name == "transformer-other") return LayerTag::transformer_other;
    if (name == "resnet") return LayerTag::resnet;
    if (name == "conv") return LayerTag::conv;
    throw std::invalid_argument("unknown layer tag: " + name);
}

bool scope_includes(FineTuneScope scope, LayerTag tag) {
    switch (tag) {
        case LayerTag::attention: return true;
        case LayerTag::transformer_other: return scope != FineTuneScope::attention_only;
        case LayerTag::resnet:
            return scope == FineTuneScope::transformer_resnet ||
                   scope == FineTuneScope::transformer_resnet_conv;
        case LayerTag::conv: return scope == FineTuneScope::transformer_resnet_conv;
    }
    throw std::logic_error("scope_includes: bad enum");
}

std::vector<std::string> select_scope(const std::vector<LayerInfo>& inventory,
                                      FineTuneScope scope) {
    std::vector<std::string> out;
    for (const auto& info : inventory)
        if (scope_includes(scope, info.tag)) out.push_back(info.target_id);
    return out;
}

MessageMapper MessageMapper::init(int k, int r, Rng& rng) {
    if (k < 1 || r < 1) throw std::invalid_argument("MessageMapper: k and r must be >= 1");
    MessageMapper m;
    m.k = k;
    m.r = r;
    const float s1 = 1.0f / std::sqrt(float(k));
    const float s2 = 1.0f / std::sqrt(float(2 * r));
    m.w1 = ag::leaf(nn::randn_init({2 * r, k}, s1, rng), true);
    m.b1 = ag::leaf(Tensor::zeros({2 * r}), true);
    m.w2 = ag::leaf(nn::randn_init({r, 2 * r}, s2, rng), true);
    m.b2 = ag::leaf(Tensor::zeros({r}), true);
    return m;
}

ag::Var mapper_forward_var(const MessageMapper& mapper, const wm::BitMessage& m) {
    if (!mapper.valid()) throw std::logic_error("mapper_forward: mapper not initialized");
    if (m.k() != mapper.k)
        throw std::invalid_argument("mapper_forward: message length " + std::to_string(m.k()) +
                                    " does not match mapper k=" + std::to_string(mapper.k));
    Tensor in({1, mapper.k});
    for (int i = 0; i < mapper.k; ++i) in.at2(0, i) = float(m[i]);
    ag::Var h = ag::bias_add_rows(ag::matmul(ag::constant(in), mapper.w1, false, true), mapper.b1);
    h = ag::silu(h);
    ag::Var out = ag::bias_add_rows(ag::matmul(h, mapper.w2, false, true), mapper.b2);
    out = ag::scale(ag::tanh_op(out), 2.0f);  // bounded diagonal in [-2, 2]
    return ag::reshape(out, {mapper.r});
}

std::vector<float> mapper_forward(const MessageMapper& mapper, const wm::BitMessage& m) {
    ag::Var v = mapper_forward_var(mapper, m);
    return v->val.vec();
}

std::vector<float> LoraAdapter::modulation(const wm::BitMessage& m) const {
    if (mapper) return mapper_forward(*mapper, m);
    return std::vector<float>(static_cast<size_t>(rank), 1.0f);
}

std::vector<ag::Var> LoraAdapter::trainable_params() const {
    std::vector<ag::Var> out;
    for (const auto& [id, layer] : layers) {
        out.push_back(layer.A);
        out.push_back(layer.B);
    }
    if (mapper) {
        out.push_back(mapper->w1);
        out.push_back(mapper->b1);
        out.push_back(mapper->w2);
        out.push_back(mapper->b2);
    }
    return out;
}

void LoraAdapter::freeze() {
    for (auto& v : trainable_params()) v->needs_grad = false;
}

int64_t LoraAdapter::adapter_param_count() const {
    int64_t n = 0;
    for (const auto& [id, layer] : layers) n += layer.A->val.numel() + layer.B->val.numel();
    return n;
}

LoraAdapter make_adapter(const std::vector<LayerInfo>& inventory, FineTuneScope scope, int rank,
                         int k, float alpha, uint64_t seed, bool with_mapper, float init_scale) {
    if (rank < 1) throw std::invalid_argument("make_adapter: rank must be >= 1");
    LoraAdapter adapter;
    adapter.scope = scope;
    adapter.rank = rank;
    adapter.alpha = alpha;
    adapter.k = with_mapper ? k : 0;
    Rng base(seed);
    for (const auto& info : inventory) {
        if (!scope_includes(scope, info.tag)) continue;
        if (rank > std::min(info.d, info.k_out))
            throw std::invalid_argument("make_adapter: rank " + std::to_string(rank) +
                                        " exceeds min dimension of " + info.target_id);
        Rng lr = base.stream("lora." + info.target_id);
        LoraLayer layer;
        layer.target_id = info.target_id;
        layer.rank = rank;
        layer.A = ag::leaf(
            nn::randn_init({info.d, rank}, init_scale / std::sqrt(float(rank)), lr), true);
        layer.B = ag::leaf(Tensor::zeros({rank, info.k_out}), true);
        adapter.layers.emplace(info.target_id, std::move(layer));
    }
    if (with_mapper) {
        Rng mr = base.stream("mapper");
        adapter.mapper = MessageMapper::init(k, rank, mr);
    }
    return adapter;
}

Tensor delta_weight(const LoraLayer& layer, const std::vector<float>& v) {
    if (static_cast<int>(v.size()) != layer.rank)
        throw std::invalid_argument("delta_weight: modulation length does not match rank");
    const int d = layer.A->val.dim(0), ko = layer.B->val.dim(1), r = layer.rank;
    Tensor scaled({d, r});
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < r; ++j)
            scaled.at2(i, j) = layer.A->val.at2(i, j) * v[static_cast<size_t>(j)];
    Tensor out({d, ko});
    CMap As(scaled.data(), d, r), Bs(layer.B->val.data(), r, ko);
    Map O(out.data(), d, ko);
    O.noalias() = As * Bs;
    return out;
}

Tensor adapted_forward(const Tensor& W, const LoraLayer& layer, const std::vector<float>& v,
                       float alpha, const Tensor& x) {
    if (W.rank() != 2 || x.rank() != 1 || W.dim(1) != x.dim(0))
        throw std::invalid_argument("adapted_forward: shape mismatch");
    if (W.dim(0) != layer.A->val.dim(0) || W.dim(1) != layer.B->val.dim(1))
        throw std::invalid_argument("adapted_forward: adapter does not match base weight");
    Tensor dw = delta_weight(layer, v);
    Tensor y({W.dim(0)});
    for (int i = 0; i < W.dim(0); ++i) {
        double acc = 0;
        for (int j = 0; j < W.dim(1); ++j)
            acc += double(W.at2(i, j) + alpha * dw.at2(i, j)) * x[j];
        y[i] = float(acc);
    }
    return y;
}

std::map<std::string, Tensor> merge_into_base(const std::map<std::string, Tensor>& base,
                                              const LoraAdapter& adapter, const wm::BitMessage& m,
                                              float alpha) {
    std::map<std::string, Tensor> out = base;
    const std::vector<float> v = adapter.modulation(m);
    for (const auto& [id, layer] : adapter.layers) {
        auto it = out.find(id);
        if (it == out.end())
            throw std::invalid_argument("merge_into_base: base has no weight " + id);
        Tensor& W = it->second;
        const int d = layer.A->val.dim(0), ko = layer.B->val.dim(1);
        if (W.numel() != int64_t(d) * ko)
            throw std::invalid_argument("merge_into_base: shape mismatch on " + id);
        Tensor dw = delta_weight(layer, v);
        for (int64_t i = 0; i < W.numel(); ++i) W[i] += alpha * dw[i];
    }
    return out;
}

std::map<std::string, Tensor> merge_adapters(const std::map<std::string, Tensor>& base,
                                             const std::vector<WeightedAdapter>& adapters) {
    std::map<std::string, Tensor> out = base;
    for (const auto& wa : adapters) {
        if (!wa.adapter) throw std::invalid_argument("merge_adapters: null adapter");
        std::vector<float> v;
        if (wa.adapter->mapper) {
            if (!wa.message)
                throw std::invalid_argument("merge_adapters: message required for mapped adapter");
            v = wa.adapter->modulation(*wa.message);
        } else {
            v.assign(static_cast<size_t>(wa.adapter->rank), 1.0f);
        }
        for (const auto& [id, layer] : wa.adapter->layers) {
            auto it = out.find(id);
            if (it == out.end())
                throw std::invalid_argument("merge_adapters: base has no weight " + id);
            Tensor& W = it->second;
            const int d = layer.A->val.dim(0), ko = layer.B->val.dim(1);
            if (W.numel() != int64_t(d) * ko)
                throw std::invalid_argument("merge_adapters: shape mismatch on " + id);
            Tensor dw = delta_weight(layer, v);
            const float scale = wa.weight * wa.adapter->alpha;
            for (int64_t i = 0; i < W.numel(); ++i) W[i] += scale * dw[i];
        }
    }
    return out;
}

WeightResolver adapted_resolver(const LoraAdapter& adapter, const ag::Var& v) {
    if (v->val.rank() != 1 || v->val.dim(0) != adapter.rank)
        throw std::invalid_argument("adapted_resolver: modulation must be [rank]");
    const LoraAdapter* ad = &adapter;
    const float alpha = adapter.alpha;
    return [ad, v, alpha](const std::string& id, const ag::Var& base) -> ag::Var {
        auto it = ad->layers.find(id);
        if (it == ad->layers.end()) return base;
        const LoraLayer& layer = it->second;
        const int d = layer.A->val.dim(0), ko = layer.B->val.dim(1);
        if (base->val.numel() != int64_t(d) * ko)
            throw std::invalid_argument("adapted_resolver: shape mismatch on " + id);
        ag::Var delta = ag::matmul(ag::col_scale(layer.A, v), layer.B);
        ag::Var flat = ag::reshape(base, {d, ko});
        return ag::reshape(ag::add(flat, ag::scale(delta, alpha)), base->val.shape());
    };
}

}  // namespace latentmark::lora
