#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "latentmark/core/autograd.hpp"

namespace latentmark::nn {

// AdamW: adaptive moments with decoupled weight decay.
class AdamW {
public:
    AdamW(std::vector<ag::Var> params, float lr, float weight_decay, float beta1 = 0.9f,
          float beta2 = 0.999f, float eps = 1e-8f)
        : params_(std::move(params)), lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
        for (auto& p : params_) {
            m_.push_back(Tensor::zeros(p->val.shape()));
            v_.push_back(Tensor::zeros(p->val.shape()));
        }
    }

    void zero_grad() {
        for (auto& p : params_)
            if (p->grad_ready) p->grad.fill(0.0f);
    }

    void step() {
        ++t_;
        const float bc1 = 1.0f - std::pow(b1_, float(t_));
        const float bc2 = 1.0f - std::pow(b2_, float(t_));
        for (size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p->grad_ready) continue;
            const int64_t n = p->val.numel();
            for (int64_t i = 0; i < n; ++i) {
                const float g = p->grad[i];
                m_[k][i] = b1_ * m_[k][i] + (1.0f - b1_) * g;
                v_[k][i] = b2_ * v_[k][i] + (1.0f - b2_) * g * g;
                const float mh = m_[k][i] / bc1;
                const float vh = v_[k][i] / bc2;
                p->val[i] -= lr_ * (mh / (std::sqrt(vh) + eps_) + wd_ * p->val[i]);
            }
        }
    }

    void set_lr(float lr) { lr_ = lr; }
    float lr() const { return lr_; }
    int64_t step_count() const { return t_; }

    // Optimizer state round-trips through checkpoints so training can resume
    // bit-exactly.
    struct State {
        int64_t t;
        std::vector<Tensor> m, v;
    };
    State state() const { return {t_, m_, v_}; }
    void set_state(const State& s) {
        if (s.m.size() != params_.size() || s.v.size() != params_.size())
            throw std::invalid_argument("AdamW::set_state: parameter count mismatch");
        t_ = s.t;
        m_ = s.m;
        v_ = s.v;
    }

private:
    std::vector<ag::Var> params_;
    float lr_, wd_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace latentmark::nn
