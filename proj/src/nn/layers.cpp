#include "latentmark/nn/layers.hpp"

#include <cmath>

namespace latentmark::nn {

Tensor randn_init(std::vector<int> shape, float std_dev, Rng& rng) {
    Tensor t(std::move(shape));
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) t[i] = float(rng.gaussian()) * std_dev;
    return t;
}

Dense::Dense(ParamSet& ps, const std::string& prefix, int in, int out, Rng& rng) {
    const float s = 1.0f / std::sqrt(float(in));
    w = ps.add(prefix + ".w", randn_init({out, in}, s, rng));
    b = ps.add(prefix + ".b", Tensor::zeros({out}));
}

Conv2d::Conv2d(ParamSet& ps, const std::string& prefix, int cin, int cout, int k, int stride_,
               int pad_, Rng& rng) {
    stride = stride_;
    pad = pad_;
    const float s = 1.0f / std::sqrt(float(cin * k * k));
    w = ps.add(prefix + ".w", randn_init({cout, cin, k, k}, s, rng));
    b = ps.add(prefix + ".b", Tensor::zeros({cout}));
}

ConvTranspose2d::ConvTranspose2d(ParamSet& ps, const std::string& prefix, int cin, int cout, int k,
                                 int stride_, int pad_, Rng& rng) {
    stride = stride_;
    pad = pad_;
    const float s = 1.0f / std::sqrt(float(cin * k * k));
    w = ps.add(prefix + ".w", randn_init({cin, cout, k, k}, s, rng));
    b = ps.add(prefix + ".b", Tensor::zeros({cout}));
}

GroupNorm::GroupNorm(ParamSet& ps, const std::string& prefix, int channels, int groups_) {
    groups = groups_;
    gamma = ps.add(prefix + ".gamma", Tensor::full({channels}, 1.0f));
    beta = ps.add(prefix + ".beta", Tensor::zeros({channels}));
}

}  // namespace latentmark::nn
