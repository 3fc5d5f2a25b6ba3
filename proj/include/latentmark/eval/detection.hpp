#pragma once

#include <stdexcept>

#include "latentmark/wm/message.hpp"

namespace latentmark::eval {

// Minimal matched-bit count m such that P[Bin(k, 1/2) >= m] <= fpr, evaluated
// in exact integer arithmetic (the fpr double is interpreted as the exact
// binary rational it represents). Throws std::domain_error when even m = k
// exceeds the target.
int detection_threshold(int k, double fpr);

// Matched-bit detection policy at a fixed false-positive rate under the
// uniform-bit null.
struct DetectionPolicy {
    int k;
    double target_fpr;
    int threshold_bits;

    DetectionPolicy(int k_, double fpr) : k(k_), target_fpr(fpr) {
        threshold_bits = detection_threshold(k_, fpr);
    }
};

double bit_accuracy(const wm::BitMessage& expected, const wm::BitMessage& decoded);

bool detect(const wm::BitMessage& decoded, const wm::BitMessage& expected,
            const DetectionPolicy& policy);

enum class Provenance { watermarked, clean };

// Zero-message classification rule: all-zero and all-one decoded vectors are
// interpreted as clean.
inline Provenance classify_clean(const wm::BitMessage& decoded) {
    return (decoded.all_zero() || decoded.all_one()) ? Provenance::clean
                                                     : Provenance::watermarked;
}

struct ClassificationReport {
    long tp = 0, tn = 0, fp = 0, fn = 0;
    double precision = 0, recall = 0, accuracy = 0, f1 = 0, fpr = 0;

    static ClassificationReport from_counts(long tp, long tn, long fp, long fn) {
        ClassificationReport r;
        r.tp = tp;
        r.tn = tn;
        r.fp = fp;
        r.fn = fn;
        r.precision = (tp + fp) ? double(tp) / double(tp + fp) : 0.0;
        r.recall = (tp + fn) ? double(tp) / double(tp + fn) : 0.0;
        r.accuracy = (tp + tn + fp + fn) ? double(tp + tn) / double(tp + tn + fp + fn) : 0.0;
        r.f1 = (r.precision + r.recall > 0)
                   ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                   : 0.0;
        r.fpr = (fp + tn) ? double(fp) / double(fp + tn) : 0.0;
        return r;
    }
};

}  // namespace latentmark::eval
