#include "latentmark/io/container.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace latentmark::io {

using nlohmann::json;

uint16_t float_to_half(float x) {
    uint32_t bits;
    std::memcpy(&bits, &x, 4);
    const uint32_t sign = (bits >> 16) & 0x8000u;
    const int32_t exp = int32_t((bits >> 23) & 0xff) - 127 + 15;
    uint32_t mant = bits & 0x7fffffu;
    if (((bits >> 23) & 0xff) == 0xff) {  // inf/nan
        return uint16_t(sign | 0x7c00u | (mant ? 0x200u : 0));
    }
    if (exp >= 0x1f) return uint16_t(sign | 0x7c00u);  // overflow -> inf
    if (exp <= 0) {
        if (exp < -10) return uint16_t(sign);  // underflow -> signed zero
        // subnormal: shift mantissa (with implicit leading 1) into place
        mant |= 0x800000u;
        const int shift = 14 - exp;
        uint32_t half_mant = mant >> shift;
        const uint32_t rem = mant & ((1u << shift) - 1);
        const uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_mant & 1))) ++half_mant;
        return uint16_t(sign | half_mant);
    }
    uint32_t half = sign | (uint32_t(exp) << 10) | (mant >> 13);
    const uint32_t rem = mant & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half & 1))) ++half;  // may carry into exponent
    return uint16_t(half);
}

float half_to_float(uint16_t h) {
    const uint32_t sign = uint32_t(h & 0x8000u) << 16;
    const uint32_t exp = (h >> 10) & 0x1f;
    uint32_t mant = h & 0x3ffu;
    uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign;
        } else {
            int e = -1;
            do {
                ++e;
                mant <<= 1;
            } while (!(mant & 0x400u));
            bits = sign | uint32_t(127 - 15 - e) << 23 | ((mant & 0x3ffu) << 13);
        }
    } else if (exp == 0x1f) {
        bits = sign | 0x7f800000u | (mant << 13);
    } else {
        bits = sign | uint32_t(exp - 15 + 127) << 23 | (mant << 13);
    }
    float out;
    std::memcpy(&out, &bits, 4);
    return out;
}

namespace {
constexpr char kMagic[4] = {'L', 'M', 'T', 'C'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(uint8_t(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(uint8_t(v >> (8 * i)));
}
uint32_t get_u32(const uint8_t* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(p[i]) << (8 * i);
    return v;
}
uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
    return v;
}
}  // namespace

const Tensor& Container::get(const std::string& name) const {
    for (const auto& e : tensors_)
        if (e.name == name) return e.value;
    throw std::out_of_range("Container: no tensor named " + name);
}

bool Container::has(const std::string& name) const {
    for (const auto& e : tensors_)
        if (e.name == name) return true;
    return false;
}

const std::vector<std::string> Container::names() const {
    std::vector<std::string> out;
    out.reserve(tensors_.size());
    for (const auto& e : tensors_) out.push_back(e.name);
    return out;
}

int64_t Container::param_count() const {
    int64_t n = 0;
    for (const auto& e : tensors_) n += e.value.numel();
    return n;
}

std::vector<uint8_t> Container::serialize() const {
    json manifest;
    manifest["kind"] = kind;
    manifest["meta"] = meta;
    json table = json::array();
    uint64_t offset = 0;
    for (const auto& e : tensors_) {
        const uint64_t elem = e.dtype == Dtype::f32 ? 4 : 2;
        const uint64_t nbytes = uint64_t(e.value.numel()) * elem;
        table.push_back({{"name", e.name},
                         {"shape", e.value.shape()},
                         {"dtype", e.dtype == Dtype::f32 ? "f32" : "f16"},
                         {"offset", offset},
                         {"bytes", nbytes}});
        offset += nbytes;
    }
    manifest["tensors"] = table;
    const std::string mtext = manifest.dump();

    std::vector<uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kVersion);
    put_u64(out, mtext.size());
    out.insert(out.end(), mtext.begin(), mtext.end());
    out.reserve(out.size() + offset);
    for (const auto& e : tensors_) {
        if (e.dtype == Dtype::f32) {
            const auto* p = reinterpret_cast<const uint8_t*>(e.value.data());
            out.insert(out.end(), p, p + e.value.numel() * 4);
        } else {
            for (int64_t i = 0; i < e.value.numel(); ++i) {
                const uint16_t h = float_to_half(e.value[i]);
                out.push_back(uint8_t(h & 0xff));
                out.push_back(uint8_t(h >> 8));
            }
        }
    }
    return out;
}

Container Container::deserialize(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw std::runtime_error("container: bad magic");
    const uint32_t version = get_u32(bytes.data() + 4);
    if (version != kVersion)
        throw std::runtime_error("container: unsupported format version " +
                                 std::to_string(version));
    const uint64_t msize = get_u64(bytes.data() + 8);
    if (16 + msize > bytes.size()) throw std::runtime_error("container: truncated manifest");
    json manifest;
    try {
        manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + ptrdiff_t(msize));
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("container: manifest parse error: ") + e.what());
    }
    Container c;
    c.kind = manifest.at("kind").get<std::string>();
    c.meta = manifest.value("meta", json::object());
    const uint64_t payload_base = 16 + msize;
    for (const auto& t : manifest.at("tensors")) {
        const std::string name = t.at("name").get<std::string>();
        const std::vector<int> shape = t.at("shape").get<std::vector<int>>();
        const std::string dtype = t.at("dtype").get<std::string>();
        const uint64_t offset = t.at("offset").get<uint64_t>();
        const uint64_t nbytes = t.at("bytes").get<uint64_t>();
        const uint64_t elem = dtype == "f32" ? 4 : dtype == "f16" ? 2 : 0;
        if (!elem) throw std::runtime_error("container: unknown dtype " + dtype);
        const int64_t numel = Tensor::count(shape);
        if (uint64_t(numel) * elem != nbytes)
            throw std::runtime_error("container: manifest/shape disagreement for " + name);
        if (payload_base + offset + nbytes > bytes.size())
            throw std::runtime_error("container: truncated payload for " + name);
        Tensor value(shape);
        const uint8_t* p = bytes.data() + payload_base + offset;
        if (dtype == "f32") {
            std::memcpy(value.data(), p, size_t(nbytes));
        } else {
            for (int64_t i = 0; i < numel; ++i)
                value[i] = half_to_float(uint16_t(p[2 * i]) | uint16_t(p[2 * i + 1]) << 8);
        }
        c.tensors_.push_back({name, std::move(value), dtype == "f32" ? Dtype::f32 : Dtype::f16});
    }
    return c;
}

void Container::save(const std::string& path) const { write_file(path, serialize()); }

Container Container::load(const std::string& path) { return deserialize(read_file(path)); }

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    f.seekg(0, std::ios::end);
    const auto size = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> bytes(static_cast<size_t>(size));
    f.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!f) throw std::runtime_error("short read on " + path);
    return bytes;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot create " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!f) throw std::runtime_error("short write on " + path);
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot create " + path);
    f << text;
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

// ----------------------------------------------------------------- sha-256

namespace {
inline uint32_t rotr(uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }
}  // namespace

std::string sha256_hex(const uint8_t* data, size_t len) {
    static const uint32_t K[64] = {
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
        0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
        0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
        0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
        0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
        0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
        0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
        0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
        0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
        0xc67178f2};
    uint32_t h[8] = {0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a,
                     0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19};
    std::vector<uint8_t> msg(data, data + len);
    msg.push_back(0x80);
    while (msg.size() % 64 != 56) msg.push_back(0);
    const uint64_t bits = uint64_t(len) * 8;
    for (int i = 7; i >= 0; --i) msg.push_back(uint8_t(bits >> (8 * i)));

    for (size_t block = 0; block < msg.size(); block += 64) {
        uint32_t w[64];
        for (int i = 0; i < 16; ++i)
            w[i] = uint32_t(msg[block + 4 * i]) << 24 | uint32_t(msg[block + 4 * i + 1]) << 16 |
                   uint32_t(msg[block + 4 * i + 2]) << 8 | uint32_t(msg[block + 4 * i + 3]);
        for (int i = 16; i < 64; ++i) {
            const uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
            const uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16] + s0 + w[i - 7] + s1;
        }
        uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6], hh = h[7];
        for (int i = 0; i < 64; ++i) {
            const uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
            const uint32_t ch = (e & f) ^ (~e & g);
            const uint32_t t1 = hh + s1 + ch + K[i] + w[i];
            const uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
            const uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
            const uint32_t t2 = s0 + maj;
            hh = g;
            g = f;
            f = e;
            e = d + t1;
            d = c;
            c = b;
            b = a;
            a = t1 + t2;
        }
        h[0] += a;
        h[1] += b;
        h[2] += c;
        h[3] += d;
        h[4] += e;
        h[5] += f;
        h[6] += g;
        h[7] += hh;
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(64);
    for (uint32_t v : h)
        for (int i = 7; i >= 0; --i) out.push_back(hex[(v >> (4 * i)) & 0xf]);
    return out;
}

}  // namespace latentmark::io
