#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentmark/core/tensor.hpp"

namespace latentmark::io {

// IEEE 754 binary16 conversion (round-to-nearest-even).
uint16_t float_to_half(float x);
float half_to_float(uint16_t h);

// Versioned checkpoint container shared by codec, adapter and model files:
// magic, format version, a JSON manifest (kind, metadata, tensor table with
// names/shapes/dtypes/offsets) and little-endian tensor payloads. Storage is
// f32 by default; f16 is available for the adapter size accounting.
class Container {
public:
    static constexpr uint32_t kVersion = 1;
    enum class Dtype { f32, f16 };

    std::string kind;
    nlohmann::json meta = nlohmann::json::object();

    void add(const std::string& name, Tensor value, Dtype dtype = Dtype::f32) {
        tensors_.push_back({name, std::move(value), dtype});
    }
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const;
    const std::vector<std::string> names() const;
    size_t size() const { return tensors_.size(); }
    const Tensor& at(size_t i) const { return tensors_[i].value; }
    const std::string& name_at(size_t i) const { return tensors_[i].name; }

    // Total element count across stored tensors.
    int64_t param_count() const;

    std::vector<uint8_t> serialize() const;
    static Container deserialize(const std::vector<uint8_t>& bytes);

    void save(const std::string& path) const;
    static Container load(const std::string& path);

private:
    struct Entry {
        std::string name;
        Tensor value;
        Dtype dtype;
    };
    std::vector<Entry> tensors_;
};

// Whole-file helpers.
std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<uint8_t>& bytes);
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

// SHA-256 of a byte buffer, lowercase hex.
std::string sha256_hex(const uint8_t* data, size_t len);
inline std::string sha256_hex(const std::vector<uint8_t>& v) {
    return sha256_hex(v.data(), v.size());
}
inline std::string sha256_hex(const std::string& s) {
    return sha256_hex(reinterpret_cast<const uint8_t*>(s.data()), s.size());
}

}  // namespace latentmark::io
