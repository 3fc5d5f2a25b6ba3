#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace latentmark {

// xoshiro256** with splitmix64 seeding. Self-contained so that streams are
// bit-identical across standard libraries and platforms; std::normal_distribution
// et al. are implementation-defined and would break the determinism contract.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& si : s_) si = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    int bit() { return int(next_u64() >> 63); }

    // Box-Muller; one value per call (the twin is dropped to keep stream
    // accounting simple).
    double gaussian() {
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = last - first;
        for (decltype(n) i = n - 1; i > 0; --i) {
            auto j = static_cast<decltype(n)>(below(static_cast<uint64_t>(i + 1)));
            std::swap(first[i], first[j]);
        }
    }

    // Derive an independent stream for a named purpose. Stable across runs.
    Rng stream(const std::string& name) const {
        uint64_t h = 1469598103934665603ull;  // FNV-1a
        for (unsigned char c : name) {
            h ^= c;
            h *= 1099511628211ull;
        }
        Rng r;
        uint64_t x = s_[0] ^ h;
        for (auto& si : r.s_) si = splitmix64(x);
        return r;
    }

    std::vector<uint64_t> state() const { return {s_[0], s_[1], s_[2], s_[3]}; }
    void set_state(const std::vector<uint64_t>& st) {
        for (int i = 0; i < 4; ++i) s_[i] = st[static_cast<size_t>(i)];
    }

private:
    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t s_[4] = {};
};

}  // namespace latentmark
