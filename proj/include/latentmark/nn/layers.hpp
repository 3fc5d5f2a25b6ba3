#pragma once

#include <string>
#include <vector>

#include "latentmark/core/autograd.hpp"
#include "latentmark/core/rng.hpp"

namespace latentmark::nn {

// Flat registry of named parameters. Layers register their tensors here so
// optimizers and checkpoint containers can walk a model without reflection.
struct ParamSet {
    struct Item {
        std::string name;
        ag::Var var;
    };
    std::vector<Item> items;

    ag::Var add(const std::string& name, Tensor init, bool trainable = true) {
        items.push_back({name, ag::leaf(std::move(init), trainable)});
        return items.back().var;
    }
    ag::Var find(const std::string& name) const {
        for (const auto& it : items)
            if (it.name == name) return it.var;
        throw std::out_of_range("ParamSet: no parameter named " + name);
    }
    std::vector<ag::Var> vars() const {
        std::vector<ag::Var> v;
        v.reserve(items.size());
        for (const auto& it : items) v.push_back(it.var);
        return v;
    }
    int64_t count() const {
        int64_t n = 0;
        for (const auto& it : items) n += it.var->val.numel();
        return n;
    }
    void freeze() {
        for (auto& it : items) it.var->needs_grad = false;
    }
};

Tensor randn_init(std::vector<int> shape, float std_dev, Rng& rng);

struct Dense {
    ag::Var w, b;  // w: [out, in]
    Dense() = default;
    Dense(ParamSet& ps, const std::string& prefix, int in, int out, Rng& rng);
    ag::Var forward(const ag::Var& x) const {  // x: [N, in]
        return ag::bias_add_rows(ag::matmul(x, w, false, true), b);
    }
};

struct Conv2d {
    ag::Var w, b;  // w: [Cout, Cin, kh, kw]
    int stride = 1, pad = 1;
    Conv2d() = default;
    Conv2d(ParamSet& ps, const std::string& prefix, int cin, int cout, int k, int stride, int pad,
           Rng& rng);
    ag::Var forward(const ag::Var& x) const {
        return ag::bias_add_channels(ag::conv2d(x, w, stride, pad), b);
    }
};

struct ConvTranspose2d {
    ag::Var w, b;  // w: [Cin, Cout, kh, kw]
    int stride = 2, pad = 1;
    ConvTranspose2d() = default;
    ConvTranspose2d(ParamSet& ps, const std::string& prefix, int cin, int cout, int k, int stride,
                    int pad, Rng& rng);
    ag::Var forward(const ag::Var& x) const {
        return ag::bias_add_channels(ag::conv_transpose2d(x, w, stride, pad), b);
    }
};

struct GroupNorm {
    ag::Var gamma, beta;
    int groups = 8;
    GroupNorm() = default;
    GroupNorm(ParamSet& ps, const std::string& prefix, int channels, int groups);
    ag::Var forward(const ag::Var& x) const { return ag::group_norm(x, gamma, beta, groups); }
};

}  // namespace latentmark::nn
