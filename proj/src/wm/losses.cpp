#include "latentmark/wm/losses.hpp"

#include <cmath>

namespace latentmark::wm {

namespace {

void check_image(const Tensor& t, const char* who) {
    if (t.rank() != 3 || t.dim(0) != 3)
        throw std::invalid_argument(std::string(who) + ": expects [3,H,W], got " + t.shape_str());
}

void check_pair(const Tensor& a, const Tensor& b, const char* who) {
    check_image(a, who);
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(who) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

}  // namespace

Tensor residual_normalize(const Tensor& iw, const Tensor& ic) {
    check_pair(iw, ic, "residual_normalize");
    Tensor out(iw.shape());
    residual_normalize_array(iw.data(), ic.data(), out.data(), iw.numel());
    return out;
}

void rgb_to_hsv_smooth(const Tensor& rgb, Tensor& h, Tensor& s, Tensor& v) {
    check_image(rgb, "rgb_to_hsv_smooth");
    const int H = rgb.dim(1), W = rgb.dim(2);
    const int64_t npix = int64_t(H) * W;
    h = Tensor({H, W});
    s = Tensor({H, W});
    v = Tensor({H, W});
    for (int64_t i = 0; i < npix; ++i) {
        double hh, ss, vv;
        rgb_to_hsv_pixel<double>(rgb[i], rgb[npix + i], rgb[2 * npix + i], hh, ss, vv);
        h[i] = float(hh);
        s[i] = float(ss);
        v[i] = float(vv);
    }
}

double prts_loss(const Tensor& iw, const Tensor& ic, const HueBand& band) {
    check_pair(iw, ic, "prts_loss");
    const int64_t npix = int64_t(iw.dim(1)) * iw.dim(2);
    std::vector<double> w(iw.data(), iw.data() + iw.numel());
    std::vector<double> c(ic.data(), ic.data() + ic.numel());
    return prts_loss_array<double>(w.data(), c.data(), npix, band);
}

Tensor prts_loss_grad(const Tensor& iw, const Tensor& ic, const HueBand& band) {
    check_pair(iw, ic, "prts_loss_grad");
    const int64_t npix = int64_t(iw.dim(1)) * iw.dim(2);
    std::vector<double> w(iw.data(), iw.data() + iw.numel());
    std::vector<double> c(ic.data(), ic.data() + ic.numel());
    std::vector<double> g(static_cast<size_t>(iw.numel()));
    prts_loss_array<double>(w.data(), c.data(), npix, band, g.data());
    Tensor out(iw.shape());
    for (int64_t i = 0; i < iw.numel(); ++i) out[i] = float(g[static_cast<size_t>(i)]);
    return out;
}

double prvl_loss(const Tensor& ir, const Tensor& iw, int patch) {
    check_pair(ir, iw, "prvl_loss");
    std::vector<double> r(ir.data(), ir.data() + ir.numel());
    std::vector<double> w(iw.data(), iw.data() + iw.numel());
    return prvl_loss_array<double>(r.data(), w.data(), ir.dim(1), ir.dim(2), patch);
}

double perceptual_loss(const Tensor& ir, const Tensor& iw) {
    check_pair(ir, iw, "perceptual_loss");
    return perceptual_proxy_array<float>(ir.data(), iw.data(), ir.dim(1), ir.dim(2));
}

double message_loss(const std::vector<double>& probs, const BitMessage& m, double eps) {
    if (static_cast<int>(probs.size()) != m.k())
        throw std::invalid_argument("message_loss: length mismatch");
    double acc = 0;
    for (int i = 0; i < m.k(); ++i) {
        double p = std::min(1.0 - eps, std::max(eps, probs[static_cast<size_t>(i)]));
        acc -= m[i] ? std::log(p) : std::log(1.0 - p);
    }
    return acc / m.k();
}

// ------------------------------------------------------------- autograd ops

namespace {
void check_batch_pair(const ag::Var& a, const Tensor& b, const char* who) {
    if (a->val.rank() != 4 || a->val.dim(1) != 3)
        throw std::invalid_argument(std::string(who) + ": expects [N,3,H,W]");
    if (!a->val.same_shape(b)) throw std::invalid_argument(std::string(who) + ": shape mismatch");
}
}  // namespace

ag::Var prts_op(const ag::Var& iw, const Tensor& ic, const HueBand& band) {
    check_batch_pair(iw, ic, "prts_op");
    const int N = iw->val.dim(0);
    const int64_t npix = int64_t(iw->val.dim(2)) * iw->val.dim(3);
    const int64_t per = 3 * npix;
    double acc = 0;
    for (int n = 0; n < N; ++n)
        acc += prts_loss_array<float>(iw->val.data() + n * per, ic.data() + n * per, npix, band);
    auto node = std::make_shared<ag::Node>(Tensor::scalar(float(acc / N)), iw->needs_grad);
    if (node->needs_grad) {
        node->parents = {iw};
        ag::Node* np = node.get();
        Tensor icc = ic;
        node->back = [iw, np, icc, N, npix, per, band]() {
            Tensor& g = iw->ensure_grad();
            std::vector<float> buf(static_cast<size_t>(per));
            const float scale = np->grad[0] / float(N);
            for (int n = 0; n < N; ++n) {
                prts_loss_array<float>(iw->val.data() + n * per, icc.data() + n * per, npix, band,
                                       buf.data());
                float* gn = g.data() + n * per;
                for (int64_t i = 0; i < per; ++i) gn[i] += scale * buf[static_cast<size_t>(i)];
            }
        };
    }
    return node;
}

ag::Var prvl_op(const ag::Var& iw, const Tensor& ir, int patch) {
    check_batch_pair(iw, ir, "prvl_op");
    const int N = iw->val.dim(0), H = iw->val.dim(2), W = iw->val.dim(3);
    const int64_t per = int64_t(3) * H * W;
    double acc = 0;
    for (int n = 0; n < N; ++n)
        acc += prvl_loss_array<float>(ir.data() + n * per, iw->val.data() + n * per, H, W, patch);
    auto node = std::make_shared<ag::Node>(Tensor::scalar(float(acc / N)), iw->needs_grad);
    if (node->needs_grad) {
        node->parents = {iw};
        ag::Node* np = node.get();
        Tensor irc = ir;
        node->back = [iw, np, irc, N, H, W, per, patch]() {
            Tensor& g = iw->ensure_grad();
            std::vector<float> buf(static_cast<size_t>(per));
            const float scale = np->grad[0] / float(N);
            for (int n = 0; n < N; ++n) {
                prvl_loss_array<float>(irc.data() + n * per, iw->val.data() + n * per, H, W, patch,
                                       buf.data());
                float* gn = g.data() + n * per;
                for (int64_t i = 0; i < per; ++i) gn[i] += scale * buf[static_cast<size_t>(i)];
            }
        };
    }
    return node;
}

ag::Var perceptual_op(const ag::Var& iw, const Tensor& ir) {
    check_batch_pair(iw, ir, "perceptual_op");
    // Composed from differentiable pyramid ops so the gradient comes from the
    // tape rather than a bespoke backward.
    ag::Var cur = iw;
    ag::Var ref = ag::constant(ir);
    ag::Var total;
    for (int s = 0; s < 3; ++s) {
        ag::Var term = ag::scale(ag::mse_mean(cur, ref), float(kPerceptualWeights[s]));
        total = total ? ag::add(total, term) : term;
        if (s < 2) {
            cur = ag::avgpool2x(cur);
            ref = ag::avgpool2x(ref);
        }
    }
    return total;
}

}  // namespace latentmark::wm
