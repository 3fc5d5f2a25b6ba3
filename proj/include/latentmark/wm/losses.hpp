#pragma once

#include <vector>

#include "latentmark/core/autograd.hpp"
#include "latentmark/core/tensor.hpp"
#include "latentmark/wm/loss_math.hpp"
#include "latentmark/wm/message.hpp"

namespace latentmark::wm {

// --- single-image reference surface (images are [3,H,W] in [0,1]) ---

Tensor residual_normalize(const Tensor& iw, const Tensor& ic);

// Returns H, S, V planes, each [H,W].
void rgb_to_hsv_smooth(const Tensor& rgb, Tensor& h, Tensor& s, Tensor& v);

double prts_loss(const Tensor& iw, const Tensor& ic, const HueBand& band);
Tensor prts_loss_grad(const Tensor& iw, const Tensor& ic, const HueBand& band);

double prvl_loss(const Tensor& ir, const Tensor& iw, int patch = 8);

double perceptual_loss(const Tensor& ir, const Tensor& iw);

// Mean BCE between bit probabilities and a 0/1 message; probabilities are
// clamped to [eps, 1-eps].
double message_loss(const std::vector<double>& probs, const BitMessage& m, double eps = 1e-7);

// --- batched autograd ops for training ([N,3,H,W]) ---

ag::Var prts_op(const ag::Var& iw, const Tensor& ic, const HueBand& band);
ag::Var prvl_op(const ag::Var& iw, const Tensor& ir, int patch = 8);
ag::Var perceptual_op(const ag::Var& iw, const Tensor& ir);

}  // namespace latentmark::wm
