#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latentmark/core/tensor.hpp"

namespace latentmark::io {

// PNG round trip for [3,H,W] float images in [0,1] (8-bit RGB on disk).
void write_png(const std::string& path, const Tensor& image);
Tensor read_png(const std::string& path);

// In-memory JPEG round trip through libjpeg at the given quality. This is the
// real codec used by the evaluation harness, not the differentiable
// training-time approximation.
std::vector<uint8_t> encode_jpeg(const Tensor& image, int quality);
Tensor decode_jpeg(const std::vector<uint8_t>& bytes);
Tensor jpeg_roundtrip(const Tensor& image, int quality);

}  // namespace latentmark::io
