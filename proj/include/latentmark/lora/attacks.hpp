#pragma once

#include "latentmark/lora/adapter.hpp"

namespace latentmark::lora {

struct PruneSpec {
    double ratio = 0.0;  // fraction of adapter parameters zeroed, in [0,1]
};

struct QuantSpec {
    enum class Format { fp8_e4m3, bf16, int8_symmetric, int4_symmetric };
    Format format = Format::int8_symmetric;

    static QuantSpec parse(const std::string& name);
    std::string name() const;
};

// Deep copy with fresh parameter leaves (attacks never mutate their input).
LoraAdapter clone_adapter(const LoraAdapter& adapter);

// Globally ranks all A/B entries by (|value|, layer id, matrix, flat index)
// and zeroes the smallest fraction. The mapper is left intact.
LoraAdapter magnitude_prune(const LoraAdapter& adapter, const PruneSpec& spec);

// Simulated precision round trip per matrix; integer formats use a symmetric
// per-matrix scale max|v| / (2^(b-1) - 1), with scale 1 for all-zero
// matrices. Applies to A/B and mapper parameters.
LoraAdapter quantize(const LoraAdapter& adapter, const QuantSpec& spec);

// Scalar round trips (exposed for tests).
float fp8_e4m3_roundtrip(float x);
float bf16_roundtrip(float x);

}  // namespace latentmark::lora
