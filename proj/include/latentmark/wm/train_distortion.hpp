#pragma once

#include "latentmark/core/autograd.hpp"
#include "latentmark/core/rng.hpp"
#include "latentmark/eval/distortion.hpp"

namespace latentmark::wm {

// Differentiable counterparts of the distortion menu for codec pretraining.
// JPEG here is the block-DCT + soft-quantization approximation, distinct from
// the real codec round-trip used by the evaluation harness. Supported kinds:
// identity, gaussian_blur, jpeg, additive_noise, sharpen; crop and jitter are
// evaluation-only.
ag::Var apply_train_distortion(const ag::Var& images, const eval::DistortionSpec& spec, Rng& rng);

// Exposed for tests: differentiable JPEG approximation on [N,3,H,W] with
// H, W divisible by 8.
ag::Var jpeg_approx_op(const ag::Var& images, int quality);

}  // namespace latentmark::wm
