#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "latentmark/core/tensor.hpp"

namespace latentmark::ag {

// Reverse-mode autodiff over a dynamically built tape. A Node owns its value,
// its (lazily allocated) gradient, and a closure that scatters the gradient to
// its parents. Graphs are acyclic by construction; releasing the root frees
// the whole tape. Ops skip closure construction entirely when no input needs
// a gradient, so frozen-model forward passes cost the same as plain inference.
struct Node {
    Tensor val;
    Tensor grad;
    bool needs_grad = false;
    bool grad_ready = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> back;

    explicit Node(Tensor v, bool req = false) : val(std::move(v)), needs_grad(req) {}

    Tensor& ensure_grad() {
        if (!grad_ready) {
            grad = Tensor::zeros(val.shape());
            grad_ready = true;
        }
        return grad;
    }
};

using Var = std::shared_ptr<Node>;

inline Var leaf(Tensor v, bool requires_grad = true) {
    return std::make_shared<Node>(std::move(v), requires_grad);
}
inline Var constant(Tensor v) { return std::make_shared<Node>(std::move(v), false); }

// Runs reverse-mode accumulation from a scalar root.
void backward(const Var& root);

// --- elementwise ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, float s);
Var affine(const Var& a, float mul, float add);  // mul*x + add
Var relu(const Var& a);
Var silu(const Var& a);
Var sigmoid(const Var& a);
Var tanh_op(const Var& a);
// Clamp to [0,1]; gradient is passed through inside the interval and zero outside.
Var clamp01(const Var& a);

// --- shape ---
Var reshape(const Var& a, std::vector<int> shape);
Var concat_channels(const Var& a, const Var& b);  // [N,Ca,H,W] + [N,Cb,H,W]

// --- linear algebra ---
// y = op_a(a) * op_b(b) for 2-d tensors; transposes selected by flags.
Var matmul(const Var& a, const Var& b, bool ta = false, bool tb = false);
// Scales column j of a [m,r] matrix by v[j]; the building block of
// A * diag(v) * B.
Var col_scale(const Var& a, const Var& v);
Var bias_add_rows(const Var& x, const Var& b);      // [N,D] + [D]
Var bias_add_channels(const Var& x, const Var& b);  // [N,C,H,W] + [C]
// [N,C,H,W] + [N,C] broadcast over spatial positions (time-embedding inject).
Var add_sample_channel_bias(const Var& x, const Var& b);
// [N,C,H,W] * [C] per-channel gain.
Var channel_scale(const Var& x, const Var& g);
// Normalizes each sample of a [N,...] tensor to unit RMS (weight-norm style:
// magnitude is factored out so a separate gain carries it).
Var sample_rms_normalize(const Var& x, float eps = 1e-6f);
// Multiplies sample n of a [N,...] tensor by mask[n] (e.g. zeroing the
// watermark perturbation for all-zero messages).
Var scale_rows(const Var& x, const std::vector<float>& mask);

// --- convolution (x: [N,Cin,H,W], w: [Cout,Cin,kh,kw]) ---
Var conv2d(const Var& x, const Var& w, int stride, int pad);
// Transposed convolution (x: [N,Cin,h,w], w: [Cin,Cout,kh,kw]).
Var conv_transpose2d(const Var& x, const Var& w, int stride, int pad);

// --- normalization / pooling / resampling ---
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps = 1e-5f);
Var upsample2x_nearest(const Var& x);
Var avgpool2x(const Var& x);
Var global_avgpool(const Var& x);  // [N,C,H,W] -> [N,C]

// --- attention (x: [N,C,HW]; weight matrices [C,C]) ---
Var self_attention(const Var& x, const Var& wq, const Var& wk, const Var& wv, const Var& wo);

// --- reductions / losses ---
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var mse_mean(const Var& a, const Var& b);  // mean over all entries of (a-b)^2
// Mean binary cross-entropy of probabilities against 0/1 targets, with the
// probabilities clamped to [eps, 1-eps].
Var bce_mean(const Var& probs, const Tensor& targets, float eps);

}  // namespace latentmark::ag
