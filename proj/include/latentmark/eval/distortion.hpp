#pragma once

#include <cstdint>
#include <string>

#include "latentmark/core/tensor.hpp"

namespace latentmark::eval {

// Image-space attack menu. Deterministic given `seed`; suites vary the seed
// per image.
struct DistortionSpec {
    enum class Kind { identity, gaussian_blur, color_jitter, random_crop, jpeg, additive_noise, sharpen };
    Kind kind = Kind::identity;
    double sigma = 1.0;         // gaussian_blur
    double jitter = 0.25;       // color_jitter range (+-)
    double area = 0.75;         // random_crop area ratio
    int quality = 80;           // jpeg
    double noise_sigma = 0.05;  // additive_noise
    double factor = 2.0;        // sharpen
    uint64_t seed = 0;

    // "jpeg:80", "blur:1.0", "noise:0.05", "crop:0.75", "jitter:0.25",
    // "sharpen:2.0", "identity".
    static DistortionSpec parse(const std::string& text);
    std::string id() const;
    void validate() const;
};

// Applies the named transform; output clipped to [0,1]; crops are resized
// back to the original size.
Tensor apply_distortion(const Tensor& image, const DistortionSpec& spec);

}  // namespace latentmark::eval
