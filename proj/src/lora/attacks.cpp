#include "latentmark/lora/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <tuple>

namespace latentmark::lora {

QuantSpec QuantSpec::parse(const std::string& name) {
    QuantSpec s;
    if (name == "fp8" || name == "fp8_e4m3") s.format = Format::fp8_e4m3;
    else if (name == "bf16") s.format = Format::bf16;
    else if (name == "int8" || name == "int8_symmetric") s.format = Format::int8_symmetric;
    else if (name == "int4" || name == "int4_symmetric") s.format = Format::int4_symmetric;
    else throw std::invalid_argument("unknown quantization format: " + name);
    return s;
}

std::string QuantSpec::name() const {
    switch (format) {
        case Format::fp8_e4m3: return "fp8_e4m3";
        case Format::bf16: return "bf16";
        case Format::int8_symmetric: return "int8_symmetric";
        case Format::int4_symmetric: return "int4_symmetric";
    }
    throw std::logic_error("QuantSpec::name: bad enum");
}

LoraAdapter clone_adapter(const LoraAdapter& adapter) {
    LoraAdapter out;
    out.scope = adapter.scope;
    out.rank = adapter.rank;
    out.alpha = adapter.alpha;
    out.k = adapter.k;
    for (const auto& [id, layer] : adapter.layers) {
        LoraLayer copy;
        copy.target_id = layer.target_id;
        copy.rank = layer.rank;
        copy.A = ag::leaf(layer.A->val, layer.A->needs_grad);
        copy.B = ag::leaf(layer.B->val, layer.B->needs_grad);
        out.layers.emplace(id, std::move(copy));
    }
    if (adapter.mapper) {
        MessageMapper m;
        m.k = adapter.mapper->k;
        m.r = adapter.mapper->r;
        m.w1 = ag::leaf(adapter.mapper->w1->val, adapter.mapper->w1->needs_grad);
        m.b1 = ag::leaf(adapter.mapper->b1->val, adapter.mapper->b1->needs_grad);
        m.w2 = ag::leaf(adapter.mapper->w2->val, adapter.mapper->w2->needs_grad);
        m.b2 = ag::leaf(adapter.mapper->b2->val, adapter.mapper->b2->needs_grad);
        out.mapper = std::move(m);
    }
    return out;
}

LoraAdapter magnitude_prune(const LoraAdapter& adapter, const PruneSpec& spec) {
    if (spec.ratio < 0.0 || spec.ratio > 1.0)
        throw std::invalid_argument("magnitude_prune: ratio out of [0,1]");
    LoraAdapter out = clone_adapter(adapter);

    struct Entry {
        float mag;
        int layer_idx;
        int matrix;  // 0 = A, 1 = B
        int64_t flat;
    };
    std::vector<Entry> entries;
    std::vector<Tensor*> mats;  // 2 per layer, in map order
    int layer_idx = 0;
    for (auto& [id, layer] : out.layers) {
        mats.push_back(&layer.A->val);
        mats.push_back(&layer.B->val);
        for (int m = 0; m < 2; ++m) {
            const Tensor& t = m == 0 ? layer.A->val : layer.B->val;
            for (int64_t i = 0; i < t.numel(); ++i)
                entries.push_back({std::abs(t[i]), layer_idx, m, i});
        }
        ++layer_idx;
    }
    const int64_t total = static_cast<int64_t>(entries.size());
    const int64_t to_zero = std::llround(spec.ratio * double(total));
    if (to_zero == 0) return out;

    std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
        return std::tie(a.mag, a.layer_idx, a.matrix, a.flat) <
               std::tie(b.mag, b.layer_idx, b.matrix, b.flat);
    });
    for (int64_t i = 0; i < to_zero; ++i) {
        const Entry& e = entries[static_cast<size_t>(i)];
        (*mats[static_cast<size_t>(e.layer_idx * 2 + e.matrix)])[e.flat] = 0.0f;
    }
    return out;
}

float bf16_roundtrip(float x) {
    if (std::isnan(x)) return x;
    uint32_t u;
    std::memcpy(&u, &x, 4);
    const uint32_t lsb = (u >> 16) & 1u;
    u += 0x7fffu + lsb;  // round to nearest even
    u &= 0xffff0000u;
    float out;
    std::memcpy(&out, &u, 4);
    return out;
}

float fp8_e4m3_roundtrip(float x) {
    if (std::isnan(x)) return x;
    if (x == 0.0f) return x;
    const float sign = x < 0 ? -1.0f : 1.0f;
    double ax = std::abs(double(x));
    constexpr double kMax = 448.0;  // e4m3 max finite magnitude
    if (ax >= kMax) return sign * float(kMax);
    int e;
    std::frexp(ax, &e);
    const int ve = e - 1;  // value exponent: ax in [2^ve, 2^(ve+1))
    // 3 mantissa bits for normals; subnormal spacing 2^-9 below 2^-6
    const double step = ve < -6 ? std::ldexp(1.0, -9) : std::ldexp(1.0, ve - 3);
    double q = std::nearbyint(ax / step) * step;
    if (q > kMax) q = kMax;
    return sign * float(q);
}

namespace {

void quantize_matrix(Tensor& t, QuantSpec::Format fmt) {
    switch (fmt) {
        case QuantSpec::Format::bf16:
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = bf16_roundtrip(t[i]);
            return;
        case QuantSpec::Format::fp8_e4m3:
            for (int64_t i = 0; i < t.numel(); ++i) t[i] = fp8_e4m3_roundtrip(t[i]);
            return;
        case QuantSpec::Format::int8_symmetric:
        case QuantSpec::Format::int4_symmetric: {
            const int qmax = fmt == QuantSpec::Format::int8_symmetric ? 127 : 7;
            float maxabs = 0;
            for (int64_t i = 0; i < t.numel(); ++i) maxabs = std::max(maxabs, std::abs(t[i]));
            const float scale = maxabs > 0 ? maxabs / float(qmax) : 1.0f;
            for (int64_t i = 0; i < t.numel(); ++i) {
                const float q = std::min(float(qmax), std::max(float(-qmax),
                                                               std::nearbyint(t[i] / scale)));
                t[i] = q * scale;
            }
            return;
        }
    }
    throw std::logic_error("quantize_matrix: bad enum");
}

}  // namespace

LoraAdapter quantize(const LoraAdapter& adapter, const QuantSpec& spec) {
    LoraAdapter out = clone_adapter(adapter);
    for (auto& [id, layer] : out.layers) {
        quantize_matrix(layer.A->val, spec.format);
        quantize_matrix(layer.B->val, spec.format);
    }
    if (out.mapper) {
        quantize_matrix(out.mapper->w1->val, spec.format);
        quantize_matrix(out.mapper->b1->val, spec.format);
        quantize_matrix(out.mapper->w2->val, spec.format);
        quantize_matrix(out.mapper->b2->val, spec.format);
    }
    return out;
}

}  // namespace latentmark::lora
