#include <doctest.h>

#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>

#include "latentmark/core/rng.hpp"
#include "latentmark/eval/detection.hpp"
#include "latentmark/eval/metrics.hpp"

using namespace latentmark;
using namespace latentmark::eval;
using boost::multiprecision::cpp_int;

namespace {

// Independent oracle: binomial coefficients from the multiplicative formula
// (exact division), exhaustive scan of all thresholds, rational comparison
// tail / 2^k <= fpr with fpr decomposed exactly from the double.
int oracle_threshold(int k, double fpr) {
    int e = 0;
    const double frac = std::frexp(fpr, &e);
    const cpp_int F = cpp_int(uint64_t(std::ldexp(frac, 53)));
    const cpp_int rhs = F << k;
    for (int m = 0; m <= k; ++m) {
        cpp_int tail = 0;
        cpp_int c = 1;  // C(k, 0)
        for (int i = 0; i <= k; ++i) {
            if (i >= m) tail += c;
            c = c * (k - i) / (i + 1);
        }
        if ((tail << (53 - e)) <= rhs) return m;
    }
    return -1;
}

wm::BitMessage with_matches(const wm::BitMessage& expected, int matches, Rng& rng) {
    std::vector<uint8_t> bits(expected.bits());
    std::vector<int> idx(static_cast<size_t>(expected.k()));
    for (int i = 0; i < expected.k(); ++i) idx[static_cast<size_t>(i)] = i;
    rng.shuffle(idx.begin(), idx.end());
    for (int i = 0; i < expected.k() - matches; ++i)
        bits[static_cast<size_t>(idx[static_cast<size_t>(i)])] ^= 1;
    return wm::BitMessage(bits);
}

}  // namespace

TEST_CASE("detection_threshold: pinned values") {
    CHECK(detection_threshold(48, 1e-6) == 41);
    CHECK(detection_threshold(48, 0.5) == 25);
    CHECK(detection_threshold(48, 1.0) == 0);
    CHECK(detection_threshold(5, 1.0) == 0);
    // unreachable: k=10 cannot express fpr 1e-9 (2^-10 ~ 1e-3)
    CHECK_THROWS_AS(detection_threshold(10, 1e-9), std::domain_error);
    CHECK_THROWS(detection_threshold(0, 0.5));
    CHECK_THROWS(detection_threshold(8, 0.0));
}

TEST_CASE("detection_threshold: agrees with exact oracle for k <= 64") {
    for (double fpr : {1e-3, 1e-6, 1e-9}) {
        for (int k = 1; k <= 64; ++k) {
            const int want = oracle_threshold(k, fpr);
            if (want < 0) {
                CHECK_THROWS_AS(detection_threshold(k, fpr), std::domain_error);
            } else {
                CHECK(detection_threshold(k, fpr) == want);
            }
        }
    }
}

TEST_CASE("bit_accuracy and detect") {
    Rng rng(7);
    wm::BitMessage m = wm::BitMessage::random(48, rng);
    CHECK(bit_accuracy(m, m) == 1.0);
    std::vector<uint8_t> inv(m.bits());
    for (auto& b : inv) b ^= 1;
    CHECK(bit_accuracy(m, wm::BitMessage(inv)) == 0.0);
    CHECK(bit_accuracy(m, with_matches(m, 36, rng)) == doctest::Approx(0.75));
    CHECK_THROWS(bit_accuracy(m, wm::BitMessage::zeros(24)));

    DetectionPolicy policy(48, 1e-6);
    CHECK(policy.threshold_bits == 41);
    CHECK(detect(with_matches(m, 41, rng), m, policy));
    CHECK_FALSE(detect(with_matches(m, 40, rng), m, policy));
    CHECK(detect(m, m, policy));
    CHECK_THROWS(detect(wm::BitMessage::zeros(32), m, policy));

    // monotonicity: flipping a mismatched bit to match never breaks detection
    for (int trial = 0; trial < 50; ++trial) {
        int matches = int(rng.below(49));
        wm::BitMessage d = with_matches(m, matches, rng);
        bool was = detect(d, m, policy);
        std::vector<uint8_t> bits(d.bits());
        for (int i = 0; i < 48; ++i)
            if (bits[size_t(i)] != m[i]) {
                bits[size_t(i)] = m[i];
                break;
            }
        bool now = detect(wm::BitMessage(bits), m, policy);
        CHECK((!was || now));
    }
}

TEST_CASE("classify_clean: partition of message space") {
    CHECK(classify_clean(wm::BitMessage::zeros(48)) == Provenance::clean);
    CHECK(classify_clean(wm::BitMessage(std::vector<uint8_t>(48, 1))) == Provenance::clean);
    Rng rng(11);
    int clean_count = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        auto m = wm::BitMessage::random(48, rng);
        if (classify_clean(m) == Provenance::clean) ++clean_count;
    }
    CHECK(clean_count == 0);  // astronomically unlikely to hit all-0/all-1
    // exhaustive partition at k=8: exactly 2 clean vectors
    int clean8 = 0;
    for (int v = 0; v < 256; ++v) {
        std::vector<uint8_t> bits(8);
        for (int i = 0; i < 8; ++i) bits[size_t(i)] = (v >> i) & 1;
        clean8 += classify_clean(wm::BitMessage(bits)) == Provenance::clean;
    }
    CHECK(clean8 == 2);
}

TEST_CASE("classification report identities") {
    auto r = ClassificationReport::from_counts(500, 494, 6, 0);
    CHECK(r.precision == doctest::Approx(500.0 / 506.0));
    CHECK(r.recall == 1.0);
    CHECK(r.fpr == doctest::Approx(6.0 / 500.0));
    CHECK(r.accuracy == doctest::Approx(994.0 / 1000.0));
    auto degenerate = ClassificationReport::from_counts(0, 0, 0, 0);
    CHECK(degenerate.precision == 0.0);
    CHECK(degenerate.f1 == 0.0);
    // always-positive classifier at balanced corpus
    auto ap = ClassificationReport::from_counts(500, 0, 500, 0);
    CHECK(ap.recall == 1.0);
    CHECK(ap.fpr == 1.0);
    CHECK(ap.precision == doctest::Approx(0.5));
}

TEST_CASE("psnr: closed forms") {
    Tensor a = Tensor::full({3, 16, 16}, 0.5f);
    CHECK(psnr(a, a) == 100.0);
    Tensor b = Tensor::full({3, 16, 16}, 0.6f);
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-4));
    CHECK_THROWS(psnr(a, Tensor({3, 8, 8})));
}

TEST_CASE("ssim: identity, symmetry, degradation ordering") {
    Rng rng(13);
    Tensor a({3, 16, 16});
    for (int64_t i = 0; i < a.numel(); ++i) a[i] = float(rng.uniform());
    CHECK(ssim(a, a) == doctest::Approx(1.0));
    Tensor b = a;
    for (int64_t i = 0; i < b.numel(); ++i)
        b[i] = std::min(1.0f, std::max(0.0f, b[i] + float(rng.uniform(-0.05, 0.05))));
    Tensor c = a;
    for (int64_t i = 0; i < c.numel(); ++i)
        c[i] = std::min(1.0f, std::max(0.0f, c[i] + float(rng.uniform(-0.3, 0.3))));
    const double sab = ssim(a, b), sba = ssim(b, a), sac = ssim(a, c);
    CHECK(sab == doctest::Approx(sba).epsilon(1e-12));
    CHECK(sab > sac);
    CHECK(sab < 1.0);
    CHECK(sac >= -1.0);
}
