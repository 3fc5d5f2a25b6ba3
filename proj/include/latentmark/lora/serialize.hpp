#pragma once

#include <string>

#include "latentmark/lora/adapter.hpp"

namespace latentmark::lora {

// Adapter container: versioned header, manifest (rank, alpha, scope, k,
// layer table with shapes), parameter payloads. fp16 storage reproduces the
// half-precision file-size accounting.
void save_adapter(const LoraAdapter& adapter, const std::string& path, bool fp16 = false);
LoraAdapter load_adapter(const std::string& path);

// Serialized byte size without touching the filesystem.
int64_t adapter_serialized_bytes(const LoraAdapter& adapter, bool fp16 = false);

}  // namespace latentmark::lora
