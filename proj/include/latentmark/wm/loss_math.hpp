#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace latentmark::wm {

// Hue band for the residual tone-suppression loss. The mask is a product of
// two sigmoids centered at the band edges; softness -> infinity recovers the
// indicator of [h_low, h_high]. Wrapping bands (h_low > h_high) are rejected;
// callers split them into two bands.
struct HueBand {
    double h_low = 0.70;
    double h_high = 0.95;
    double softness = 50.0;

    HueBand() = default;
    HueBand(double lo, double hi, double soft = 50.0) : h_low(lo), h_high(hi), softness(soft) {
        validate();
    }
    void validate() const {
        if (!(h_low >= 0.0 && h_low < h_high && h_high <= 1.0))
            throw std::invalid_argument("HueBand: requires 0 <= h_low < h_high <= 1");
        if (!(softness > 0.0)) throw std::invalid_argument("HueBand: softness must be > 0");
    }
};

namespace detail {

constexpr double kAchromaticEps = 1e-6;  // below this max-min, hue is 0 with zero gradient
constexpr double kValueEps = 1e-8;       // below this max, saturation is 0 with zero gradient

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

// Smooth RGB -> HSV for one pixel, with optional analytic Jacobian rows for
// H, S and V with respect to (r, g, b). Ties in max/min resolve in r, g, b
// order; the achromatic singularity follows the documented convention.
template <typename T>
void rgb_to_hsv_pixel(T r, T g, T b, T& h, T& s, T& v, T dh[3] = nullptr, T ds[3] = nullptr,
                      T dv[3] = nullptr) {
    const T c[3] = {r, g, b};
    int imax = 0, imin = 0;
    for (int i = 1; i < 3; ++i) {
        if (c[i] > c[imax]) imax = i;
        if (c[i] < c[imin]) imin = i;
    }
    const T maxc = c[imax], minc = c[imin];
    const T delta = maxc - minc;
    v = maxc;
    if (dv) {
        dv[0] = dv[1] = dv[2] = T(0);
        dv[imax] = T(1);
    }

    if (maxc < T(detail::kValueEps)) {
        s = T(0);
        if (ds) ds[0] = ds[1] = ds[2] = T(0);
    } else {
        s = delta / maxc;
        if (ds) {
            ds[0] = ds[1] = ds[2] = T(0);
            ds[imax] += minc / (maxc * maxc);
            ds[imin] += -T(1) / maxc;
        }
    }

    if (delta < T(detail::kAchromaticEps)) {
        h = T(0);
        if (dh) dh[0] = dh[1] = dh[2] = T(0);
        return;
    }
    // h6 = base + (x - y) / delta with (x, y) chosen per dominant channel.
    int ix, iy;
    T base;
    if (imax == 0) {
        ix = 1;
        iy = 2;
        base = T(0);
    } else if (imax == 1) {
        ix = 2;
        iy = 0;
        base = T(2);
    } else {
        ix = 0;
        iy = 1;
        base = T(4);
    }
    const T num = c[ix] - c[iy];
    T h6 = base + num / delta;
    h = h6 / T(6);
    h -= std::floor(h);
    if (dh) {
        dh[0] = dh[1] = dh[2] = T(0);
        const T inv = T(1) / (T(6) * delta);
        dh[ix] += inv;
        dh[iy] -= inv;
        const T dd = -num / (T(6) * delta * delta);
        dh[imax] += dd;
        dh[imin] -= dd;
    }
}

// Soft band mask and its derivative in hue.
template <typename T>
T hue_band_mask(T h, const HueBand& band, T* dmask = nullptr) {
    const T s = T(band.softness);
    const T a = detail::sigmoid(s * (h - T(band.h_low)));
    const T b = detail::sigmoid(s * (T(band.h_high) - h));
    if (dmask) *dmask = s * (a * (T(1) - a) * b - a * b * (T(1) - b));
    return a * b;
}

// Normalized residual R = clip((iw - ic + 1) / 2, 0, 1), written per entry.
template <typename T>
void residual_normalize_array(const T* iw, const T* ic, T* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        T r = (iw[i] - ic[i] + T(1)) / T(2);
        out[i] = std::min(T(1), std::max(T(0), r));
    }
}

// PRTS on planar [3, H*W] images: mean over pixels of mask(H_i) * S_i computed
// on the normalized residual. When grad_iw is non-null it receives
// d(loss)/d(iw), including the clip and 1/2 factors of the residual map.
template <typename T>
T prts_loss_array(const T* iw, const T* ic, int64_t npix, const HueBand& band,
                  T* grad_iw = nullptr) {
    band.validate();
    if (grad_iw) std::fill(grad_iw, grad_iw + 3 * npix, T(0));
    double acc = 0;
    for (int64_t i = 0; i < npix; ++i) {
        T pre[3], rclip[3];
        bool interior[3];
        for (int ch = 0; ch < 3; ++ch) {
            pre[ch] = (iw[ch * npix + i] - ic[ch * npix + i] + T(1)) / T(2);
            rclip[ch] = std::min(T(1), std::max(T(0), pre[ch]));
            interior[ch] = pre[ch] > T(0) && pre[ch] < T(1);
        }
        T h, s, v, dh[3], ds[3];
        rgb_to_hsv_pixel(rclip[0], rclip[1], rclip[2], h, s, v, dh, ds, (T*)nullptr);
        T dmask;
        const T m = hue_band_mask(h, band, &dmask);
        acc += double(m) * double(s);
        if (grad_iw) {
            for (int ch = 0; ch < 3; ++ch) {
                if (!interior[ch]) continue;
                const T dcontrib = dmask * s * dh[ch] + m * ds[ch];
                grad_iw[ch * npix + i] = dcontrib * T(0.5) / T(npix);
            }
        }
    }
    return T(acc / double(npix));
}

// Peak regional variation: maximum over non-overlapping patch x patch tiles of
// the mean squared residual inside the tile (partial tiles use their own pixel
// count). Returns the loss; when grad_iw is non-null, the subgradient flows to
// the first maximal tile in scan order.
template <typename T>
T prvl_loss_array(const T* ir, const T* iw, int h, int w, int patch, T* grad_iw = nullptr) {
    if (patch < 1) throw std::invalid_argument("prvl: patch must be >= 1");
    const int64_t npix = int64_t(h) * w;
    if (grad_iw) std::fill(grad_iw, grad_iw + 3 * npix, T(0));
    double best = -1.0;
    int best_i = 0, best_j = 0;
    int64_t best_count = 1;
    for (int pi = 0; pi < h; pi += patch)
        for (int pj = 0; pj < w; pj += patch) {
            const int hi = std::min(h, pi + patch), wj = std::min(w, pj + patch);
            double acc = 0;
            const int64_t count = int64_t(3) * (hi - pi) * (wj - pj);
            for (int ch = 0; ch < 3; ++ch)
                for (int i = pi; i < hi; ++i)
                    for (int j = pj; j < wj; ++j) {
                        const int64_t k = int64_t(ch) * npix + int64_t(i) * w + j;
                        const double d = double(ir[k]) - double(iw[k]);
                        acc += d * d;
                    }
            acc /= double(count);
            if (acc > best) {
                best = acc;
                best_i = pi;
                best_j = pj;
                best_count = count;
            }
        }
    if (grad_iw) {
        const int hi = std::min(h, best_i + patch), wj = std::min(w, best_j + patch);
        for (int ch = 0; ch < 3; ++ch)
            for (int i = best_i; i < hi; ++i)
                for (int j = best_j; j < wj; ++j) {
                    const int64_t k = int64_t(ch) * npix + int64_t(i) * w + j;
                    grad_iw[k] = T(2) * (iw[k] - ir[k]) / T(best_count);
                }
    }
    return T(best);
}

// Multi-scale mean-squared difference standing in for a perceptual metric:
// dyadic 2x average-pool pyramids at scales {1, 1/2, 1/4} with weights
// {0.5, 0.3, 0.2}.
inline const double kPerceptualWeights[3] = {0.5, 0.3, 0.2};

template <typename T>
double perceptual_proxy_array(const T* a, const T* b, int h, int w) {
    std::vector<double> da(a, a + int64_t(3) * h * w), db(b, b + int64_t(3) * h * w);
    double total = 0;
    int ch_h = h, ch_w = w;
    for (int s = 0; s < 3; ++s) {
        const int64_t n = int64_t(3) * ch_h * ch_w;
        double mse = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double d = da[size_t(i)] - db[size_t(i)];
            mse += d * d;
        }
        total += kPerceptualWeights[s] * mse / double(n);
        if (s == 2) break;
        if (ch_h % 2 || ch_w % 2)
            throw std::invalid_argument("perceptual proxy: spatial size must be divisible by 4");
        // 2x2 average pool, in place into the front of the buffers.
        const int nh = ch_h / 2, nw = ch_w / 2;
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < nh; ++i)
                for (int j = 0; j < nw; ++j) {
                    auto idx = [&](std::vector<double>& v, int ii, int jj) {
                        return v[size_t(int64_t(c) * ch_h * ch_w + int64_t(ii) * ch_w + jj)];
                    };
                    const double pa = 0.25 * (idx(da, 2 * i, 2 * j) + idx(da, 2 * i, 2 * j + 1) +
                                              idx(da, 2 * i + 1, 2 * j) + idx(da, 2 * i + 1, 2 * j + 1));
                    const double pb = 0.25 * (idx(db, 2 * i, 2 * j) + idx(db, 2 * i, 2 * j + 1) +
                                              idx(db, 2 * i + 1, 2 * j) + idx(db, 2 * i + 1, 2 * j + 1));
                    da[size_t(int64_t(c) * nh * nw + int64_t(i) * nw + j)] = pa;
                    db[size_t(int64_t(c) * nh * nw + int64_t(i) * nw + j)] = pb;
                }
        ch_h = nh;
        ch_w = nw;
    }
    return total;
}

}  // namespace latentmark::wm
