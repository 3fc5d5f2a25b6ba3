#pragma once

#include "latentmark/core/tensor.hpp"

namespace latentmark::eval {

// PSNR in dB against unit peak; MSE = 0 is capped at 100 dB.
double psnr(const Tensor& a, const Tensor& b);

// SSIM with the standard 11-tap Gaussian window (sigma 1.5) and constants
// C1 = 0.01^2, C2 = 0.03^2 on unit dynamic range; valid-window mean over
// positions, averaged across channels.
double ssim(const Tensor& a, const Tensor& b);

}  // namespace latentmark::eval
