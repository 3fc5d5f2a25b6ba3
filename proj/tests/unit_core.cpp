#include <doctest.h>

#include <cmath>
#include <functional>

#include "latentmark/core/autograd.hpp"
#include "latentmark/core/rng.hpp"
#include "latentmark/core/tensor.hpp"
#include "latentmark/nn/layers.hpp"
#include "latentmark/nn/optim.hpp"

using namespace latentmark;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, float scale = 1.0f) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = float(rng.uniform(-1.0, 1.0)) * scale;
    return t;
}

// Central-difference check of d(loss)/d(x) for a scalar-valued graph builder.
// Float forward passes limit the attainable precision, so the tolerance is
// loose; structural mistakes (wrong transpose, missing term) fail by orders
// of magnitude.
void gradcheck(const std::function<ag::Var(const ag::Var&)>& build, Tensor x0, float h = 1e-2f,
               float rel_tol = 3e-2f, float abs_tol = 2e-3f) {
    ag::Var x = ag::leaf(x0, true);
    ag::Var loss = build(x);
    ag::backward(loss);
    REQUIRE(x->grad_ready);
    Tensor analytic = x->grad;
    for (int64_t i = 0; i < x0.numel(); ++i) {
        Tensor xp = x0, xm = x0;
        xp[i] += h;
        xm[i] -= h;
        float lp = build(ag::leaf(xp, false))->val[0];
        float lm = build(ag::leaf(xm, false))->val[0];
        float fd = (lp - lm) / (2 * h);
        float a = analytic[i];
        float err = std::abs(a - fd);
        CHECK(err <= rel_tol * std::max(std::abs(a), std::abs(fd)) + abs_tol);
    }
}

}  // namespace

TEST_CASE("rng: deterministic and stream-independent") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42);
    auto s1 = c.stream("one"), s2 = c.stream("two");
    CHECK(s1.next_u64() != s2.next_u64());
    // state save/restore
    Rng d(7);
    d.next_u64();
    auto st = d.state();
    uint64_t expect = d.next_u64();
    d.set_state(st);
    CHECK(d.next_u64() == expect);
}

TEST_CASE("rng: gaussian moments") {
    Rng rng(1);
    double sum = 0, sq = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double g = rng.gaussian();
        sum += g;
        sq += g * g;
    }
    CHECK(std::abs(sum / n) < 0.02);
    CHECK(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("tensor: shape bookkeeping") {
    Tensor t({2, 3, 4, 5});
    CHECK(t.numel() == 120);
    t.at4(1, 2, 3, 4) = 7.0f;
    CHECK(t[119] == 7.0f);
    CHECK_THROWS(t.reshaped({7, 7}));
    CHECK(t.reshaped({6, 20}).dim(1) == 20);
}

TEST_CASE("autograd: elementwise and reductions") {
    Rng rng(3);
    gradcheck([](const ag::Var& x) { return ag::mean_all(ag::relu(x)); },
              random_tensor({4, 5}, rng));
    gradcheck([](const ag::Var& x) { return ag::mean_all(ag::silu(x)); },
              random_tensor({4, 5}, rng));
    gradcheck([](const ag::Var& x) { return ag::mean_all(ag::sigmoid(x)); },
              random_tensor({4, 5}, rng));
    gradcheck([](const ag::Var& x) { return ag::mean_all(ag::tanh_op(x)); },
              random_tensor({4, 5}, rng));
    gradcheck([](const ag::Var& x) { return ag::sum_all(ag::mul(x, x)); },
              random_tensor({3, 3}, rng));
    gradcheck([](const ag::Var& x) { return ag::mean_all(ag::affine(x, 2.5f, -1.0f)); },
              random_tensor({3, 3}, rng));
}

TEST_CASE("autograd: matmul all transpose combinations") {
    Rng rng(4);
    Tensor b0 = random_tensor({4, 6}, rng);
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            Tensor bmat = tb ? random_tensor({6, 4}, rng) : b0;
            std::vector<int> ashape = ta ? std::vector<int>{4, 3} : std::vector<int>{3, 4};
            gradcheck(
                [&](const ag::Var& x) {
                    return ag::mean_all(ag::matmul(x, ag::leaf(bmat, false), ta, tb));
                },
                random_tensor(ashape, rng));
            // gradient w.r.t. the second operand
            Tensor amat = ta ? random_tensor({4, 3}, rng) : random_tensor({3, 4}, rng);
            std::vector<int> bshape = tb ? std::vector<int>{6, 4} : std::vector<int>{4, 6};
            gradcheck(
                [&](const ag::Var& x) {
                    return ag::mean_all(ag::matmul(ag::leaf(amat, false), x, ta, tb));
                },
                random_tensor(bshape, rng));
        }
}

TEST_CASE("autograd: conv2d matches naive reference") {
    Rng rng(5);
    const int N = 2, Cin = 3, H = 5, W = 6, Cout = 4, k = 3, stride = 2, pad = 1;
    Tensor x = random_tensor({N, Cin, H, W}, rng);
    Tensor w = random_tensor({Cout, Cin, k, k}, rng);
    ag::Var y = ag::conv2d(ag::leaf(x, false), ag::leaf(w, false), stride, pad);
    const int OH = (H + 2 * pad - k) / stride + 1, OW = (W + 2 * pad - k) / stride + 1;
    REQUIRE(y->val.shape() == std::vector<int>({N, Cout, OH, OW}));
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Cout; ++co)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = 0;
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int ki = 0; ki < k; ++ki)
                            for (int kj = 0; kj < k; ++kj) {
                                int ih = oh * stride - pad + ki, iw = ow * stride - pad + kj;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += double(x.at4(n, ci, ih, iw)) * w.at4(co, ci, ki, kj);
                            }
                    CHECK(y->val.at4(n, co, oh, ow) == doctest::Approx(acc).epsilon(1e-4));
                }
}

TEST_CASE("autograd: conv2d gradients") {
    Rng rng(6);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    gradcheck(
        [&](const ag::Var& x) {
            return ag::mean_all(ag::conv2d(x, ag::leaf(w, false), 2, 1));
        },
        random_tensor({2, 3, 6, 6}, rng));
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    gradcheck(
        [&](const ag::Var& wv) {
            return ag::mean_all(ag::mul(ag::conv2d(ag::leaf(x, false), wv, 1, 1),
                                        ag::conv2d(ag::leaf(x, false), wv, 1, 1)));
        },
        random_tensor({4, 3, 3, 3}, rng));
}

TEST_CASE("autograd: conv_transpose2d shape and gradients") {
    Rng rng(7);
    // stride-2 k=4 p=1 doubles spatial size
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor w = random_tensor({3, 5, 4, 4}, rng);
    ag::Var y = ag::conv_transpose2d(ag::leaf(x, false), ag::leaf(w, false), 2, 1);
    CHECK(y->val.shape() == std::vector<int>({2, 5, 8, 8}));
    gradcheck(
        [&](const ag::Var& xv) {
            return ag::mean_all(ag::conv_transpose2d(xv, ag::leaf(w, false), 2, 1));
        },
        random_tensor({2, 3, 4, 4}, rng));
    gradcheck(
        [&](const ag::Var& wv) {
            auto out = ag::conv_transpose2d(ag::leaf(x, false), wv, 2, 1);
            return ag::mse_mean(out, ag::leaf(Tensor::zeros(out->val.shape()), false));
        },
        random_tensor({3, 5, 4, 4}, rng));
}

TEST_CASE("autograd: conv_transpose2d is adjoint of conv2d") {
    // <conv(x), y> == <x, convT(y)> for matching weights: the defining
    // property of the transposed convolution.
    Rng rng(8);
    // conv weight [Cout=5, Cin=3, 4, 4]; the same tensor read as
    // [Cin_t=5, Cout_t=3, 4, 4] drives the transposed direction.
    Tensor w = random_tensor({5, 3, 4, 4}, rng);
    Tensor x = random_tensor({1, 3, 8, 8}, rng);
    Tensor y = random_tensor({1, 5, 4, 4}, rng);
    ag::Var cx = ag::conv2d(ag::leaf(x, false), ag::leaf(w, false), 2, 1);
    REQUIRE(cx->val.shape() == y.shape());
    ag::Var cty = ag::conv_transpose2d(ag::leaf(y, false),
                                       ag::leaf(w.reshaped({5, 3, 4, 4}), false), 2, 1);
    REQUIRE(cty->val.shape() == x.shape());
    double lhs = 0, rhs = 0;
    for (int64_t i = 0; i < y.numel(); ++i) lhs += double(cx->val[i]) * y[i];
    for (int64_t i = 0; i < x.numel(); ++i) rhs += double(x[i]) * cty->val[i];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-4));
}

TEST_CASE("autograd: group_norm normalizes and differentiates") {
    Rng rng(9);
    Tensor x = random_tensor({2, 8, 3, 3}, rng, 2.0f);
    ag::Var g = ag::leaf(Tensor::full({8}, 1.0f), false);
    ag::Var b = ag::leaf(Tensor::zeros({8}), false);
    ag::Var y = ag::group_norm(ag::leaf(x, false), g, b, 4);
    // each group of 2 channels has ~zero mean, ~unit variance
    for (int n = 0; n < 2; ++n)
        for (int grp = 0; grp < 4; ++grp) {
            double mean = 0, var = 0;
            for (int c = grp * 2; c < grp * 2 + 2; ++c)
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j) mean += y->val.at4(n, c, i, j);
            mean /= 18.0;
            for (int c = grp * 2; c < grp * 2 + 2; ++c)
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j) {
                        double d = y->val.at4(n, c, i, j) - mean;
                        var += d * d;
                    }
            var /= 18.0;
            CHECK(std::abs(mean) < 1e-4);
            CHECK(var == doctest::Approx(1.0).epsilon(0.01));
        }
    Tensor gamma = random_tensor({8}, rng);
    Tensor beta = random_tensor({8}, rng);
    gradcheck(
        [&](const ag::Var& xv) {
            auto out = ag::group_norm(xv, ag::leaf(gamma, false), ag::leaf(beta, false), 4);
            return ag::mse_mean(out, ag::leaf(Tensor::zeros(out->val.shape()), false));
        },
        random_tensor({2, 8, 3, 3}, rng), 1e-2f, 5e-2f, 5e-3f);
}

TEST_CASE("autograd: pooling, upsample, concat, global pool") {
    Rng rng(10);
    gradcheck([](const ag::Var& x) { return ag::mean_all(ag::avgpool2x(x)); },
              random_tensor({2, 3, 4, 4}, rng));
    gradcheck([](const ag::Var& x) { return ag::mean_all(ag::upsample2x_nearest(x)); },
              random_tensor({2, 3, 3, 3}, rng));
    gradcheck(
        [](const ag::Var& x) {
            auto y = ag::global_avgpool(x);
            return ag::mse_mean(y, ag::leaf(Tensor::zeros(y->val.shape()), false));
        },
        random_tensor({2, 5, 3, 3}, rng));
    Tensor other = random_tensor({2, 2, 3, 3}, rng);
    gradcheck(
        [&](const ag::Var& x) {
            return ag::mean_all(
                ag::mul(ag::concat_channels(x, ag::leaf(other, true)),
                        ag::concat_channels(x, ag::leaf(other, true))));
        },
        random_tensor({2, 3, 3, 3}, rng));
}

TEST_CASE("autograd: self_attention gradients") {
    Rng rng(11);
    const int C = 6, T = 5;
    Tensor wq = random_tensor({C, C}, rng, 0.5f), wk = random_tensor({C, C}, rng, 0.5f);
    Tensor wv = random_tensor({C, C}, rng, 0.5f), wo = random_tensor({C, C}, rng, 0.5f);
    gradcheck(
        [&](const ag::Var& x) {
            return ag::mean_all(ag::mul(
                ag::self_attention(x, ag::leaf(wq, false), ag::leaf(wk, false),
                                   ag::leaf(wv, false), ag::leaf(wo, false)),
                ag::self_attention(x, ag::leaf(wq, false), ag::leaf(wk, false),
                                   ag::leaf(wv, false), ag::leaf(wo, false))));
        },
        random_tensor({2, C, T}, rng, 0.5f), 5e-3f, 5e-2f, 5e-3f);
    Tensor x = random_tensor({2, C, T}, rng, 0.5f);
    auto check_w = [&](int which) {
        gradcheck(
            [&](const ag::Var& wvar) {
                ag::Var q = which == 0 ? wvar : ag::leaf(wq, false);
                ag::Var k = which == 1 ? wvar : ag::leaf(wk, false);
                ag::Var v = which == 2 ? wvar : ag::leaf(wv, false);
                ag::Var o = which == 3 ? wvar : ag::leaf(wo, false);
                return ag::mean_all(ag::self_attention(ag::leaf(x, false), q, k, v, o));
            },
            which == 0 ? wq : which == 1 ? wk : which == 2 ? wv : wo, 5e-3f, 5e-2f, 5e-3f);
    };
    for (int i = 0; i < 4; ++i) check_w(i);
}

TEST_CASE("autograd: bce and mse") {
    Rng rng(12);
    Tensor targets({2, 4});
    for (int64_t i = 0; i < 8; ++i) targets[i] = float(rng.bit());
    gradcheck(
        [&](const ag::Var& x) { return ag::bce_mean(ag::sigmoid(x), targets, 1e-7f); },
        random_tensor({2, 4}, rng));
    Tensor ref = random_tensor({3, 4}, rng);
    gradcheck([&](const ag::Var& x) { return ag::mse_mean(x, ag::leaf(ref, false)); },
              random_tensor({3, 4}, rng));
}

TEST_CASE("autograd: no-grad paths build no tape") {
    Rng rng(13);
    ag::Var x = ag::leaf(random_tensor({2, 3}, rng), false);
    ag::Var y = ag::mean_all(ag::relu(x));
    CHECK_FALSE(y->needs_grad);
    CHECK(y->parents.empty());
    CHECK_FALSE(bool(y->back));
}

TEST_CASE("nn: dense trains a linear map with AdamW") {
    Rng rng(14);
    nn::ParamSet ps;
    nn::Dense layer(ps, "lin", 3, 2, rng);
    // target: y = M x with fixed M
    Tensor M({2, 3}, {0.5f, -1.0f, 2.0f, 1.5f, 0.25f, -0.75f});
    nn::AdamW opt(ps.vars(), 5e-2f, 0.0f);
    float last = 1e9f;
    for (int step = 0; step < 300; ++step) {
        Tensor x = random_tensor({8, 3}, rng);
        Tensor target({8, 2});
        for (int n = 0; n < 8; ++n)
            for (int o = 0; o < 2; ++o) {
                double acc = 0;
                for (int i = 0; i < 3; ++i) acc += double(M.at2(o, i)) * x.at2(n, i);
                target.at2(n, o) = float(acc);
            }
        opt.zero_grad();
        ag::Var loss = ag::mse_mean(layer.forward(ag::leaf(x, false)), ag::leaf(target, false));
        ag::backward(loss);
        opt.step();
        last = loss->val[0];
    }
    CHECK(last < 1e-3f);
}
