#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "latentmark/core/rng.hpp"

namespace latentmark::wm {

// Fixed-length binary payload m in {0,1}^k.
class BitMessage {
public:
    explicit BitMessage(std::vector<uint8_t> bits) : bits_(std::move(bits)) {
        if (bits_.empty()) throw std::invalid_argument("BitMessage: k must be >= 1");
        for (uint8_t b : bits_)
            if (b > 1) throw std::invalid_argument("BitMessage: bits must be 0 or 1");
    }

    static BitMessage zeros(int k) {
        if (k < 1) throw std::invalid_argument("BitMessage: k must be >= 1");
        return BitMessage(std::vector<uint8_t>(static_cast<size_t>(k), 0));
    }
    static BitMessage random(int k, Rng& rng) {
        if (k < 1) throw std::invalid_argument("BitMessage: k must be >= 1");
        std::vector<uint8_t> b(static_cast<size_t>(k));
        for (auto& x : b) x = static_cast<uint8_t>(rng.bit());
        return BitMessage(std::move(b));
    }

    int k() const { return static_cast<int>(bits_.size()); }
    uint8_t operator[](int i) const { return bits_[static_cast<size_t>(i)]; }
    const std::vector<uint8_t>& bits() const { return bits_; }

    bool all_zero() const {
        for (uint8_t b : bits_)
            if (b) return false;
        return true;
    }
    bool all_one() const {
        for (uint8_t b : bits_)
            if (!b) return false;
        return true;
    }
    bool operator==(const BitMessage& o) const { return bits_ == o.bits_; }

    // Wire format: big-endian bit string packed into ceil(k/8) bytes, message
    // bit 0 at the most significant end; unused high-order bits must be zero.
    std::string to_hex() const;
    static BitMessage from_hex(const std::string& hex, int k);

private:
    std::vector<uint8_t> bits_;
};

// Message sampling for codec pretraining: the all-zero message with
// probability p_zero, otherwise i.i.d. uniform bits.
BitMessage sample_training_message(int k, double p_zero, Rng& rng);

}  // namespace latentmark::wm
