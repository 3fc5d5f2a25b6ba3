#include "latentmark/wm/message.hpp"

#include <cctype>

namespace latentmark::wm {

namespace {
int hex_digit(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw std::invalid_argument(std::string("invalid hex digit '") + c + "'");
}
}  // namespace

std::string BitMessage::to_hex() const {
    const int k = this->k();
    const int nbytes = (k + 7) / 8;
    const int pad = nbytes * 8 - k;
    std::string out;
    out.reserve(static_cast<size_t>(nbytes) * 2);
    static const char* digits = "0123456789abcdef";
    int acc = 0, nb = pad;  // leading pad bits are zero
    for (int i = 0; i < k; ++i) {
        acc = (acc << 1) | bits_[static_cast<size_t>(i)];
        if (++nb == 8) {
            out.push_back(digits[(acc >> 4) & 0xf]);
            out.push_back(digits[acc & 0xf]);
            acc = 0;
            nb = 0;
        }
    }
    return out;
}

BitMessage BitMessage::from_hex(const std::string& hex, int k) {
    if (k < 1) throw std::invalid_argument("BitMessage: k must be >= 1");
    const int nbytes = (k + 7) / 8;
    if (static_cast<int>(hex.size()) != nbytes * 2)
        throw std::invalid_argument("BitMessage: expected " + std::to_string(nbytes * 2) +
                                    " hex characters for k=" + std::to_string(k) + ", got " +
                                    std::to_string(hex.size()));
    std::vector<uint8_t> raw(static_cast<size_t>(nbytes));
    for (int i = 0; i < nbytes; ++i)
        raw[static_cast<size_t>(i)] =
            static_cast<uint8_t>((hex_digit(hex[static_cast<size_t>(2 * i)]) << 4) |
                                 hex_digit(hex[static_cast<size_t>(2 * i + 1)]));
    const int pad = nbytes * 8 - k;
    for (int i = 0; i < pad; ++i)
        if ((raw[0] >> (7 - i)) & 1)
            throw std::invalid_argument("BitMessage: nonzero high-order padding bits");
    std::vector<uint8_t> bits(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        const int bitpos = pad + i;
        bits[static_cast<size_t>(i)] =
            (raw[static_cast<size_t>(bitpos / 8)] >> (7 - bitpos % 8)) & 1;
    }
    return BitMessage(std::move(bits));
}

BitMessage sample_training_message(int k, double p_zero, Rng& rng) {
    if (k < 1) throw std::invalid_argument("sample_training_message: k must be >= 1");
    if (p_zero < 0.0 || p_zero > 1.0)
        throw std::invalid_argument("sample_training_message: p_zero must be in [0,1]");
    if (rng.uniform() < p_zero) return BitMessage::zeros(k);
    return BitMessage::random(k, rng);
}

}  // namespace latentmark::wm
