#include "latentmark/eval/distortion.hpp"

#include <cmath>
#include <stdexcept>

#include "latentmark/core/rng.hpp"
#include "latentmark/io/image_io.hpp"

namespace latentmark::eval {

namespace {

float clamp01f(float v) { return std::min(1.0f, std::max(0.0f, v)); }

int reflect(int i, int n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - 1 - i;
    return std::min(n - 1, std::max(0, i));
}

Tensor separable_blur(const Tensor& img, const std::vector<double>& kernel) {
    const int H = img.dim(1), W = img.dim(2);
    const int r = int(kernel.size()) / 2;
    Tensor tmp(img.shape()), out(img.shape());
    for (int c = 0; c < 3; ++c) {
        const float* src = img.data() + int64_t(c) * H * W;
        float* t = tmp.data() + int64_t(c) * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0;
                for (int k = -r; k <= r; ++k)
                    acc += kernel[size_t(k + r)] * src[y * W + reflect(x + k, W)];
                t[y * W + x] = float(acc);
            }
        float* o = out.data() + int64_t(c) * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0;
                for (int k = -r; k <= r; ++k)
                    acc += kernel[size_t(k + r)] * t[reflect(y + k, H) * W + x];
                o[y * W + x] = float(acc);
            }
    }
    return out;
}

std::vector<double> gaussian_kernel(int taps, double sigma) {
    std::vector<double> k(static_cast<size_t>(taps));
    const int r = taps / 2;
    double sum = 0;
    for (int i = 0; i < taps; ++i) {
        const double d = i - r;
        k[size_t(i)] = std::exp(-d * d / (2 * sigma * sigma));
        sum += k[size_t(i)];
    }
    for (auto& v : k) v /= sum;
    return k;
}

Tensor bilinear_resize(const Tensor& img, int out_h, int out_w) {
    const int H = img.dim(1), W = img.dim(2);
    Tensor out({3, out_h, out_w});
    for (int c = 0; c < 3; ++c) {
        const float* src = img.data() + int64_t(c) * H * W;
        float* dst = out.data() + int64_t(c) * out_h * out_w;
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) {
                const double fy = (y + 0.5) * H / out_h - 0.5;
                const double fx = (x + 0.5) * W / out_w - 0.5;
                const int y0 = std::max(0, std::min(H - 1, int(std::floor(fy))));
                const int x0 = std::max(0, std::min(W - 1, int(std::floor(fx))));
                const int y1 = std::min(H - 1, y0 + 1), x1 = std::min(W - 1, x0 + 1);
                const double wy = std::min(1.0, std::max(0.0, fy - y0));
                const double wx = std::min(1.0, std::max(0.0, fx - x0));
                const double v = (1 - wy) * ((1 - wx) * src[y0 * W + x0] + wx * src[y0 * W + x1]) +
                                 wy * ((1 - wx) * src[y1 * W + x0] + wx * src[y1 * W + x1]);
                dst[y * out_w + x] = float(v);
            }
    }
    return out;
}

}  // namespace

DistortionSpec DistortionSpec::parse(const std::string& text) {
    DistortionSpec s;
    const auto colon = text.find(':');
    const std::string name = text.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : text.substr(colon + 1);
    auto num = [&](double fallback) { return arg.empty() ? fallback : std::stod(arg); };
    if (name == "identity") {
        s.kind = Kind::identity;
    } else if (name == "blur" || name == "gaussian_blur") {
        s.kind = Kind::gaussian_blur;
        s.sigma = num(1.0);
    } else if (name == "jitter" || name == "color_jitter") {
        s.kind = Kind::color_jitter;
        s.jitter = num(0.25);
    } else if (name == "crop" || name == "random_crop") {
        s.kind = Kind::random_crop;
        s.area = num(0.75);
    } else if (name == "jpeg") {
        s.kind = Kind::jpeg;
        s.quality = arg.empty() ? 80 : std::stoi(arg);
    } else if (name == "noise" || name == "additive_noise") {
        s.kind = Kind::additive_noise;
        s.noise_sigma = num(0.05);
    } else if (name == "sharpen") {
        s.kind = Kind::sharpen;
        s.factor = num(2.0);
    } else {
        throw std::invalid_argument("unknown distortion: " + text);
    }
    s.validate();
    return s;
}

std::string DistortionSpec::id() const {
    char buf[48];
    switch (kind) {
        case Kind::identity: return "identity";
        case Kind::gaussian_blur: std::snprintf(buf, sizeof(buf), "blur:%.2f", sigma); break;
        case Kind::color_jitter: std::snprintf(buf, sizeof(buf), "jitter:%.2f", jitter); break;
        case Kind::random_crop: std::snprintf(buf, sizeof(buf), "crop:%.2f", area); break;
        case Kind::jpeg: std::snprintf(buf, sizeof(buf), "jpeg:%d", quality); break;
        case Kind::additive_noise: std::snprintf(buf, sizeof(buf), "noise:%.3f", noise_sigma); break;
        case Kind::sharpen: std::snprintf(buf, sizeof(buf), "sharpen:%.2f", factor); break;
    }
    return buf;
}

void DistortionSpec::validate() const {
    switch (kind) {
        case Kind::identity: break;
        case Kind::gaussian_blur:
            if (sigma < 0 || sigma > 8) throw std::invalid_argument("blur: sigma out of [0,8]");
            break;
        case Kind::color_jitter:
            if (jitter < 0 || jitter >= 1) throw std::invalid_argument("jitter out of [0,1)");
            break;
        case Kind::random_crop:
            if (area <= 0.05 || area > 1.0) throw std::invalid_argument("crop area out of (0.05,1]");
            break;
        case Kind::jpeg:
            if (quality < 1 || quality > 100) throw std::invalid_argument("jpeg quality out of [1,100]");
            break;
        case Kind::additive_noise:
            if (noise_sigma < 0 || noise_sigma > 1)
                throw std::invalid_argument("noise sigma out of [0,1]");
            break;
        case Kind::sharpen:
            if (factor < 0 || factor > 8) throw std::invalid_argument("sharpen factor out of [0,8]");
            break;
    }
}

Tensor apply_distortion(const Tensor& image, const DistortionSpec& spec) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw std::invalid_argument("apply_distortion: expects [3,H,W]");
    spec.validate();
    const int H = image.dim(1), W = image.dim(2);
    Rng rng(spec.seed);
    Tensor out = image;
    switch (spec.kind) {
        case DistortionSpec::Kind::identity: return out;
        case DistortionSpec::Kind::gaussian_blur: {
            if (spec.sigma == 0) return out;
            out = separable_blur(image, gaussian_kernel(7, spec.sigma));
            break;
        }
        case DistortionSpec::Kind::color_jitter: {
            const double fb = 1.0 + rng.uniform(-spec.jitter, spec.jitter);
            const double fc = 1.0 + rng.uniform(-spec.jitter, spec.jitter);
            const double fs = 1.0 + rng.uniform(-spec.jitter, spec.jitter);
            // brightness
            for (int64_t i = 0; i < out.numel(); ++i) out[i] = float(out[i] * fb);
            // contrast about the mean luma
            double mean = 0;
            const int64_t hw = int64_t(H) * W;
            for (int64_t i = 0; i < hw; ++i)
                mean += 0.299 * out[i] + 0.587 * out[hw + i] + 0.114 * out[2 * hw + i];
            mean /= double(hw);
            for (int64_t i = 0; i < out.numel(); ++i)
                out[i] = float(mean + fc * (out[i] - mean));
            // saturation toward per-pixel luma
            for (int64_t i = 0; i < hw; ++i) {
                const double l = 0.299 * out[i] + 0.587 * out[hw + i] + 0.114 * out[2 * hw + i];
                out[i] = float(l + fs * (out[i] - l));
                out[hw + i] = float(l + fs * (out[hw + i] - l));
                out[2 * hw + i] = float(l + fs * (out[2 * hw + i] - l));
            }
            break;
        }
        case DistortionSpec::Kind::random_crop: {
            const int ch = std::max(1, int(std::lround(H * std::sqrt(spec.area))));
            const int cw = std::max(1, int(std::lround(W * std::sqrt(spec.area))));
            const int oy = int(rng.below(uint64_t(H - ch + 1)));
            const int ox = int(rng.below(uint64_t(W - cw + 1)));
            Tensor crop({3, ch, cw});
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < ch; ++y)
                    for (int x = 0; x < cw; ++x)
                        crop[(int64_t(c) * ch + y) * cw + x] =
                            image[(int64_t(c) * H + oy + y) * W + ox + x];
            out = bilinear_resize(crop, H, W);
            break;
        }
        case DistortionSpec::Kind::jpeg: {
            out = io::jpeg_roundtrip(image, spec.quality);
            break;
        }
        case DistortionSpec::Kind::additive_noise: {
            for (int64_t i = 0; i < out.numel(); ++i)
                out[i] = float(out[i] + spec.noise_sigma * rng.gaussian());
            break;
        }
        case DistortionSpec::Kind::sharpen: {
            Tensor blurred = separable_blur(image, gaussian_kernel(3, 1.0));
            for (int64_t i = 0; i < out.numel(); ++i)
                out[i] = float(blurred[i] + spec.factor * (image[i] - blurred[i]));
            break;
        }
    }
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = clamp01f(out[i]);
    return out;
}

}  // namespace latentmark::eval
