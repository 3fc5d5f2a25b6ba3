#include "latentmark/eval/detection.hpp"

#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>

namespace latentmark::eval {

using boost::multiprecision::cpp_int;

int detection_threshold(int k, double fpr) {
    if (k < 1) throw std::invalid_argument("detection_threshold: k must be >= 1");
    if (!(fpr > 0.0) || fpr > 1.0)
        throw std::invalid_argument("detection_threshold: fpr must be in (0, 1]");

    // fpr = F * 2^(e-53) exactly, F integer in [2^52, 2^53).
    int e = 0;
    const double frac = std::frexp(fpr, &e);
    const auto F = cpp_int(uint64_t(std::ldexp(frac, 53)));
    // tail(m) <= fpr * 2^k  <=>  tail(m) * 2^(53-e) <= F * 2^k
    const cpp_int rhs = F << k;
    const int lshift = 53 - e;  // e <= 1 for fpr <= 1, so lshift >= 52

    // Pascal row k, then suffix sums from the top.
    std::vector<cpp_int> binom(static_cast<size_t>(k) + 1);
    binom[0] = 1;
    for (int row = 1; row <= k; ++row)
        for (int i = row; i >= 1; --i) binom[static_cast<size_t>(i)] += binom[static_cast<size_t>(i - 1)];

    cpp_int tail = 0;
    int best = -1;
    for (int m = k; m >= 0; --m) {
        tail += binom[static_cast<size_t>(m)];
        if ((tail << lshift) <= rhs)
            best = m;
        else
            break;  // tail grows as m decreases; once violated, always violated
    }
    if (best < 0)
        throw std::domain_error("detection_threshold: fpr " + std::to_string(fpr) +
                                " unreachable with k=" + std::to_string(k));
    return best;
}

double bit_accuracy(const wm::BitMessage& expected, const wm::BitMessage& decoded) {
    if (expected.k() != decoded.k()) throw std::invalid_argument("bit_accuracy: length mismatch");
    int matches = 0;
    for (int i = 0; i < expected.k(); ++i) matches += expected[i] == decoded[i];
    return double(matches) / expected.k();
}

bool detect(const wm::BitMessage& decoded, const wm::BitMessage& expected,
            const DetectionPolicy& policy) {
    if (decoded.k() != policy.k || expected.k() != policy.k)
        throw std::invalid_argument("detect: length does not match policy payload size");
    int matches = 0;
    for (int i = 0; i < policy.k; ++i) matches += expected[i] == decoded[i];
    return matches >= policy.threshold_bits;
}

}  // namespace latentmark::eval
