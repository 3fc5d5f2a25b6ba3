#include "latentmark/wm/train_distortion.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace latentmark::wm {

namespace {

// Standard JPEG base quantization tables (Annex K), zigzag-free layout.
const int kLumaQ[64] = {16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
                        14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
                        18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
                        49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
const int kChromaQ[64] = {17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
                          24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
                          99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
                          99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

void quality_tables(int quality, double luma[64], double chroma[64]) {
    const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
    for (int i = 0; i < 64; ++i) {
        luma[i] = std::max(1.0, std::min(255.0, std::floor((kLumaQ[i] * scale + 50) / 100.0)));
        chroma[i] = std::max(1.0, std::min(255.0, std::floor((kChromaQ[i] * scale + 50) / 100.0)));
    }
}

// Orthonormal DCT-II matrix, 8x8.
struct DctMatrix {
    double c[8][8];
    DctMatrix() {
        for (int k = 0; k < 8; ++k)
            for (int n = 0; n < 8; ++n)
                c[k][n] = (k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0)) *
                          std::cos(M_PI * (2 * n + 1) * k / 16.0);
    }
};
const DctMatrix kDct;

// RGB->YCbCr (JFIF full range), x in 0..255 pixel units.
const double kRgb2Ycc[3][3] = {{0.299, 0.587, 0.114},
                               {-0.168736, -0.331264, 0.5},
                               {0.5, -0.418688, -0.081312}};
const double kYcc2Rgb[3][3] = {{1.0, 0.0, 1.402},
                               {1.0, -0.344136, -0.714136},
                               {1.0, 1.772, 0.0}};

void dct8x8(const double in[8][8], double out[8][8], bool inverse) {
    double tmp[8][8];
    // rows
    for (int i = 0; i < 8; ++i)
        for (int k = 0; k < 8; ++k) {
            double acc = 0;
            for (int n = 0; n < 8; ++n)
                acc += (inverse ? kDct.c[n][k] : kDct.c[k][n]) * in[i][n];
            tmp[i][k] = acc;
        }
    // columns
    for (int j = 0; j < 8; ++j)
        for (int k = 0; k < 8; ++k) {
            double acc = 0;
            for (int n = 0; n < 8; ++n)
                acc += (inverse ? kDct.c[n][k] : kDct.c[k][n]) * tmp[n][j];
            out[k][j] = acc;
        }
}

}  // namespace

ag::Var jpeg_approx_op(const ag::Var& images, int quality) {
    const Tensor& x = images->val;
    if (x.rank() != 4 || x.dim(1) != 3)
        throw std::invalid_argument("jpeg_approx: expects [N,3,H,W]");
    if (x.dim(2) % 8 || x.dim(3) % 8)
        throw std::invalid_argument("jpeg_approx: spatial size must be divisible by 8");
    if (quality < 1 || quality > 100)
        throw std::invalid_argument("jpeg_approx: quality out of [1,100]");
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int64_t hw = int64_t(H) * W;

    double luma[64], chroma[64];
    quality_tables(quality, luma, chroma);

    // Cache of soft-round inputs (u) for the backward diagonal.
    auto ucache = std::make_shared<std::vector<float>>(size_t(x.numel()));
    Tensor out(x.shape());

    auto soft_round = [](double v) { return v - std::sin(2.0 * M_PI * v) / (2.0 * M_PI); };

    for (int n = 0; n < N; ++n) {
        // RGB [0,1] -> centered YCbCr in pixel units
        std::vector<double> ycc(size_t(3 * hw));
        for (int64_t i = 0; i < hw; ++i) {
            const double r = 255.0 * x[n * 3 * hw + i];
            const double g = 255.0 * x[n * 3 * hw + hw + i];
            const double b = 255.0 * x[n * 3 * hw + 2 * hw + i];
            for (int c = 0; c < 3; ++c)
                ycc[size_t(c * hw + i)] =
                    kRgb2Ycc[c][0] * r + kRgb2Ycc[c][1] * g + kRgb2Ycc[c][2] * b -
                    (c == 0 ? 128.0 : 0.0);
        }
        // per channel, per block: DCT, soft-quantize, IDCT
        for (int c = 0; c < 3; ++c) {
            const double* q = c == 0 ? luma : chroma;
            for (int by = 0; by < H; by += 8)
                for (int bx = 0; bx < W; bx += 8) {
                    double block[8][8], coef[8][8];
                    for (int i = 0; i < 8; ++i)
                        for (int j = 0; j < 8; ++j)
                            block[i][j] = ycc[size_t(c * hw + (by + i) * W + bx + j)];
                    dct8x8(block, coef, false);
                    for (int i = 0; i < 8; ++i)
                        for (int j = 0; j < 8; ++j) {
                            const double u = coef[i][j] / q[i * 8 + j];
                            (*ucache)[size_t(n * 3 * hw + c * hw + (by + i) * W + bx + j)] =
                                float(u);
                            coef[i][j] = soft_round(u) * q[i * 8 + j];
                        }
                    dct8x8(coef, block, true);
                    for (int i = 0; i < 8; ++i)
                        for (int j = 0; j < 8; ++j)
                            ycc[size_t(c * hw + (by + i) * W + bx + j)] = block[i][j];
                }
        }
        // back to RGB [0,1]
        for (int64_t i = 0; i < hw; ++i) {
            const double y = ycc[size_t(i)] + 128.0;
            const double cb = ycc[size_t(hw + i)];
            const double cr = ycc[size_t(2 * hw + i)];
            out[n * 3 * hw + i] = float((kYcc2Rgb[0][0] * y + kYcc2Rgb[0][2] * cr) / 255.0);
            out[n * 3 * hw + hw + i] =
                float((kYcc2Rgb[1][0] * y + kYcc2Rgb[1][1] * cb + kYcc2Rgb[1][2] * cr) / 255.0);
            out[n * 3 * hw + 2 * hw + i] =
                float((kYcc2Rgb[2][0] * y + kYcc2Rgb[2][1] * cb) / 255.0);
        }
    }

    auto node = std::make_shared<ag::Node>(std::move(out), images->needs_grad);
    if (node->needs_grad) {
        node->parents = {images};
        ag::Node* np = node.get();
        node->back = [images, np, ucache, N, H, W, hw]() {
            Tensor& gx = images->ensure_grad();
            for (int n = 0; n < N; ++n) {
                // transpose color map (no /255 * 255 crossing: they cancel)
                std::vector<double> gycc(size_t(3 * hw));
                for (int64_t i = 0; i < hw; ++i) {
                    const double g0 = np->grad[n * 3 * hw + i];
                    const double g1 = np->grad[n * 3 * hw + hw + i];
                    const double g2 = np->grad[n * 3 * hw + 2 * hw + i];
                    gycc[size_t(i)] = kYcc2Rgb[0][0] * g0 + kYcc2Rgb[1][0] * g1 + kYcc2Rgb[2][0] * g2;
                    gycc[size_t(hw + i)] = kYcc2Rgb[1][1] * g1 + kYcc2Rgb[2][1] * g2;
                    gycc[size_t(2 * hw + i)] = kYcc2Rgb[0][2] * g0 + kYcc2Rgb[1][2] * g1;
                }
                for (int c = 0; c < 3; ++c) {
                    for (int by = 0; by < H; by += 8)
                        for (int bx = 0; bx < W; bx += 8) {
                            double block[8][8], coef[8][8];
                            for (int i = 0; i < 8; ++i)
                                for (int j = 0; j < 8; ++j)
                                    block[i][j] = gycc[size_t(c * hw + (by + i) * W + bx + j)];
                            // transpose of IDCT is forward DCT (orthonormal)
                            dct8x8(block, coef, false);
                            for (int i = 0; i < 8; ++i)
                                for (int j = 0; j < 8; ++j) {
                                    const double u = (*ucache)[size_t(n * 3 * hw + c * hw +
                                                                      (by + i) * W + bx + j)];
                                    // d soft_round(u)/du = 1 - cos(2 pi u); the
                                    // quantizer scale cancels between u and v*Q
                                    coef[i][j] *= 1.0 - std::cos(2.0 * M_PI * u);
                                }
                            dct8x8(coef, block, true);
                            for (int i = 0; i < 8; ++i)
                                for (int j = 0; j < 8; ++j)
                                    gycc[size_t(c * hw + (by + i) * W + bx + j)] = block[i][j];
                        }
                }
                for (int64_t i = 0; i < hw; ++i) {
                    const double gy = gycc[size_t(i)];
                    const double gcb = gycc[size_t(hw + i)];
                    const double gcr = gycc[size_t(2 * hw + i)];
                    gx[n * 3 * hw + i] +=
                        float(kRgb2Ycc[0][0] * gy + kRgb2Ycc[1][0] * gcb + kRgb2Ycc[2][0] * gcr);
                    gx[n * 3 * hw + hw + i] +=
                        float(kRgb2Ycc[0][1] * gy + kRgb2Ycc[1][1] * gcb + kRgb2Ycc[2][1] * gcr);
                    gx[n * 3 * hw + 2 * hw + i] +=
                        float(kRgb2Ycc[0][2] * gy + kRgb2Ycc[1][2] * gcb + kRgb2Ycc[2][2] * gcr);
                }
            }
        };
    }
    return node;
}

namespace {

ag::Var blur_var(const ag::Var& images, double sigma, int taps) {
    const int C = images->val.dim(1);
    std::vector<double> k(static_cast<size_t>(taps));
    const int r = taps / 2;
    double sum = 0;
    for (int i = 0; i < taps; ++i) {
        const double d = i - r;
        k[size_t(i)] = std::exp(-d * d / (2 * sigma * sigma));
        sum += k[size_t(i)];
    }
    // depthwise blur as a grouped conv emulated by a sparse dense kernel
    Tensor w({C, C, taps, taps});
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < taps; ++i)
            for (int j = 0; j < taps; ++j)
                w.at4(c, c, i, j) = float(k[size_t(i)] * k[size_t(j)] / (sum * sum));
    return ag::conv2d(images, ag::constant(std::move(w)), 1, r);
}

}  // namespace

ag::Var apply_train_distortion(const ag::Var& images, const eval::DistortionSpec& spec, Rng& rng) {
    using Kind = eval::DistortionSpec::Kind;
    spec.validate();
    switch (spec.kind) {
        case Kind::identity: return images;
        case Kind::gaussian_blur: {
            if (spec.sigma == 0) return images;
            return ag::clamp01(blur_var(images, spec.sigma, 7));
        }
        case Kind::jpeg: return ag::clamp01(jpeg_approx_op(images, spec.quality));
        case Kind::additive_noise: {
            Tensor noise(images->val.shape());
            for (int64_t i = 0; i < noise.numel(); ++i)
                noise[i] = float(spec.noise_sigma * rng.gaussian());
            return ag::clamp01(ag::add(images, ag::constant(std::move(noise))));
        }
        case Kind::sharpen: {
            ag::Var blurred = blur_var(images, 1.0, 3);
            ag::Var detail = ag::sub(images, blurred);
            return ag::clamp01(ag::add(blurred, ag::scale(detail, float(spec.factor))));
        }
        default:
            throw std::invalid_argument(
                "apply_train_distortion: crop and color jitter are evaluation-only");
    }
}

}  // namespace latentmark::wm
