#include "latentmark/eval/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace latentmark::eval {

namespace {
void check_pair(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.same_shape(b)) throw std::invalid_argument(std::string(who) + ": shape mismatch");
    if (a.rank() != 3 || a.dim(0) != 3)
        throw std::invalid_argument(std::string(who) + ": expects [3,H,W]");
}
}  // namespace

double psnr(const Tensor& a, const Tensor& b) {
    check_pair(a, b, "psnr");
    double mse = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double d = double(a[i]) - double(b[i]);
        mse += d * d;
    }
    mse /= double(a.numel());
    if (mse <= 0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Tensor& a, const Tensor& b) {
    check_pair(a, b, "ssim");
    const int H = a.dim(1), W = a.dim(2);
    constexpr int win = 11;
    if (H < win || W < win) throw std::invalid_argument("ssim: image smaller than 11x11 window");
    constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

    double g[win];
    double gsum = 0;
    for (int i = 0; i < win; ++i) {
        const double d = i - (win - 1) / 2.0;
        g[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        gsum += g[i];
    }
    for (double& x : g) x /= gsum;

    double total = 0;
    for (int c = 0; c < 3; ++c) {
        const float* pa = a.data() + int64_t(c) * H * W;
        const float* pb = b.data() + int64_t(c) * H * W;
        double chan = 0;
        int count = 0;
        for (int y = 0; y + win <= H; ++y)
            for (int x = 0; x + win <= W; ++x) {
                double mu_a = 0, mu_b = 0, aa = 0, bb = 0, ab = 0;
                for (int i = 0; i < win; ++i)
                    for (int j = 0; j < win; ++j) {
                        const double wgt = g[i] * g[j];
                        const double va = pa[(y + i) * W + x + j];
                        const double vb = pb[(y + i) * W + x + j];
                        mu_a += wgt * va;
                        mu_b += wgt * vb;
                        aa += wgt * va * va;
                        bb += wgt * vb * vb;
                        ab += wgt * va * vb;
                    }
                const double var_a = aa - mu_a * mu_a;
                const double var_b = bb - mu_b * mu_b;
                const double cov = ab - mu_a * mu_b;
                const double s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                                 ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                chan += s;
                ++count;
            }
        total += chan / count;
    }
    return total / 3.0;
}

}  // namespace latentmark::eval
