#include "latentmark/core/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace latentmark::ag {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<RowMat>;
using CMap = Eigen::Map<const RowMat>;

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->val.same_shape(b->val))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a->val.shape_str() +
                                    " vs " + b->val.shape_str());
}

Var make_node(Tensor val, std::vector<Var> parents) {
    bool req = false;
    for (auto& p : parents) req = req || p->needs_grad;
    auto n = std::make_shared<Node>(std::move(val), req);
    if (req) n->parents = std::move(parents);
    return n;
}

// Elementwise op with backward dx = dy * dfn(x, y).
template <typename F, typename G>
Var unary_ew(const Var& a, F fn, G dfn) {
    Tensor out(a->val.shape());
    const int64_t n = a->val.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = fn(a->val[i]);
    Var node = make_node(std::move(out), {a});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [a, np, dfn]() {
            Tensor& ga = a->ensure_grad();
            const int64_t n = ga.numel();
            for (int64_t i = 0; i < n; ++i) ga[i] += np->grad[i] * dfn(a->val[i], np->val[i]);
        };
    }
    return node;
}

}  // namespace

void backward(const Var& root) {
    if (root->val.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar");
    // Iterative post-order DFS to get a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.get(), 0});
    visited.insert(root.get());
    while (!stack.empty()) {
        auto [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            ++stack.back().second;  // advance before any push may reallocate
            Node* p = node->parents[idx].get();
            if (p->needs_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->back && n->grad_ready) n->back();
    }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a->val.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = a->val[i] + b->val[i];
    Var node = make_node(std::move(out), {a, b});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [a, b, np]() {
            const int64_t n = np->grad.numel();
            if (a->needs_grad) {
                Tensor& ga = a->ensure_grad();
                for (int64_t i = 0; i < n; ++i) ga[i] += np->grad[i];
            }
            if (b->needs_grad) {
                Tensor& gb = b->ensure_grad();
                for (int64_t i = 0; i < n; ++i) gb[i] += np->grad[i];
            }
        };
    }
    return node;
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a->val.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = a->val[i] - b->val[i];
    Var node = make_node(std::move(out), {a, b});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [a, b, np]() {
            const int64_t n = np->grad.numel();
            if (a->needs_grad) {
                Tensor& ga = a->ensure_grad();
                for (int64_t i = 0; i < n; ++i) ga[i] += np->grad[i];
            }
            if (b->needs_grad) {
                Tensor& gb = b->ensure_grad();
                for (int64_t i = 0; i < n; ++i) gb[i] -= np->grad[i];
            }
        };
    }
    return node;
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a->val.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = a->val[i] * b->val[i];
    Var node = make_node(std::move(out), {a, b});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [a, b, np]() {
            const int64_t n = np->grad.numel();
            if (a->needs_grad) {
                Tensor& ga = a->ensure_grad();
                for (int64_t i = 0; i < n; ++i) ga[i] += np->grad[i] * b->val[i];
            }
            if (b->needs_grad) {
                Tensor& gb = b->ensure_grad();
                for (int64_t i = 0; i < n; ++i) gb[i] += np->grad[i] * a->val[i];
            }
        };
    }
    return node;
}

Var scale(const Var& a, float s) { return affine(a, s, 0.0f); }

Var affine(const Var& a, float mul, float add_c) {
    Tensor out(a->val.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = mul * a->val[i] + add_c;
    Var node = make_node(std::move(out), {a});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [a, np, mul]() {
            Tensor& ga = a->ensure_grad();
            const int64_t n = ga.numel();
            for (int64_t i = 0; i < n; ++i) ga[i] += mul * np->grad[i];
        };
    }
    return node;
}

Var relu(const Var& a) {
    return unary_ew(
        a, [](float x) { return x > 0 ? x : 0.0f; },
        [](float x, float) { return x > 0 ? 1.0f : 0.0f; });
}

Var silu(const Var& a) {
    return unary_ew(
        a,
        [](float x) {
            float s = 1.0f / (1.0f + std::exp(-x));
            return x * s;
        },
        [](float x, float) {
            float s = 1.0f / (1.0f + std::exp(-x));
            return s * (1.0f + x * (1.0f - s));
        });
}

Var sigmoid(const Var& a) {
    return unary_ew(
        a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
        [](float, float y) { return y * (1.0f - y); });
}

Var tanh_op(const Var& a) {
    return unary_ew(
        a, [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; });
}

Var clamp01(const Var& a) {
    return unary_ew(
        a, [](float x) { return x < 0.0f ? 0.0f : (x > 1.0f ? 1.0f : x); },
        [](float x, float) { return (x > 0.0f && x < 1.0f) ? 1.0f : 0.0f; });
}

// --------------------------------------------------------------------- shape

Var reshape(const Var& a, std::vector<int> shape) {
    Tensor out = a->val.reshaped(std::move(shape));
    Var node = make_node(std::move(out), {a});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [a, np]() {
            Tensor& ga = a->ensure_grad();
            const int64_t n = ga.numel();
            for (int64_t i = 0; i < n; ++i) ga[i] += np->grad[i];
        };
    }
    return node;
}

Var concat_channels(const Var& a, const Var& b) {
    const auto& sa = a->val.shape();
    const auto& sb = b->val.shape();
    if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
        throw std::invalid_argument("concat_channels: incompatible shapes");
    const int N = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
    const int64_t hw = int64_t(H) * W;
    Tensor out({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a->val.data() + n * Ca * hw, Ca * hw, out.data() + int64_t(n) * (Ca + Cb) * hw);
        std::copy_n(b->val.data() + n * Cb * hw, Cb * hw,
                    out.data() + int64_t(n) * (Ca + Cb) * hw + Ca * hw);
    }
    Var node = make_node(std::move(out), {a, b});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [a, b, np, N, Ca, Cb, hw]() {
            for (int n = 0; n < N; ++n) {
                const float* g = np->grad.data() + int64_t(n) * (Ca + Cb) * hw;
                if (a->needs_grad) {
                    float* ga = a->ensure_grad().data() + int64_t(n) * Ca * hw;
                    for (int64_t i = 0; i < Ca * hw; ++i) ga[i] += g[i];
                }
                if (b->needs_grad) {
                    float* gb = b->ensure_grad().data() + int64_t(n) * Cb * hw;
                    for (int64_t i = 0; i < Cb * hw; ++i) gb[i] += g[Ca * hw + i];
                }
            }
        };
    }
    return node;
}

// ------------------------------------------------------------ linear algebra

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
    if (a->val.rank() != 2 || b->val.rank() != 2)
        throw std::invalid_argument("matmul: expects 2-d tensors");
    const int am = a->val.dim(0), an = a->val.dim(1);
    const int bm = b->val.dim(0), bn = b->val.dim(1);
    const int m = ta ? an : am, k = ta ? am : an;
    const int k2 = tb ? bn : bm, n = tb ? bm : bn;
    if (k != k2) throw std::invalid_argument("matmul: inner dimension mismatch");
    Tensor out({m, n});
    {
        CMap A(a->val.data(), am, an), B(b->val.data(), bm, bn);
        Map C(out.data(), m, n);
        if (!ta && !tb) C.noalias() = A * B;
        else if (ta && !tb) C.noalias() = A.transpose() * B;
        else if (!ta && tb) C.noalias() = A * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
    Var node = make_node(std::move(out), {a, b});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [a, b, np, ta, tb, am, an, bm, bn, m, n]() {
            CMap G(np->grad.data(), m, n);
            CMap A(a->val.data(), am, an), B(b->val.data(), bm, bn);
            if (a->needs_grad) {
                Map GA(a->ensure_grad().data(), am, an);
                // dA = op_a^-1(G * op_b(B)^T)
                if (!ta && !tb) GA.noalias() += G * B.transpose();
                else if (!ta && tb) GA.noalias() += G * B;
                else if (ta && !tb) GA.noalias() += B * G.transpose();
                else GA.noalias() += B.transpose() * G.transpose();
            }
            if (b->needs_grad) {
                Map GB(b->ensure_grad().data(), bm, bn);
                if (!ta && !tb) GB.noalias() += A.transpose() * G;
                else if (ta && !tb) GB.noalias() += A * G;
                else if (!ta && tb) GB.noalias() += G.transpose() * A;
                else GB.noalias() += G.transpose() * A.transpose();
            }
        };
    }
    return node;
}

Var col_scale(const Var& a, const Var& v) {
    if (a->val.rank() != 2 || v->val.rank() != 1 || a->val.dim(1) != v->val.dim(0))
        throw std::invalid_argument("col_scale: expects [m,r] and [r]");
    const int m = a->val.dim(0), r = a->val.dim(1);
    Tensor out({m, r});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < r; ++j) out.at2(i, j) = a->val.at2(i, j) * v->val[j];
    Var node = make_node(std::move(out), {a, v});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [a, v, np, m, r]() {
            if (a->needs_grad) {
                Tensor& ga = a->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < r; ++j) ga.at2(i, j) += np->grad.at2(i, j) * v->val[j];
            }
            if (v->needs_grad) {
                Tensor& gv = v->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < r; ++j) gv[j] += np->grad.at2(i, j) * a->val.at2(i, j);
            }
        };
    }
    return node;
}

Var bias_add_rows(const Var& x, const Var& b) {
    if (x->val.rank() != 2 || b->val.rank() != 1 || x->val.dim(1) != b->val.dim(0))
        throw std::invalid_argument("bias_add_rows: shape mismatch");
    const int N = x->val.dim(0), D = x->val.dim(1);
    Tensor out({N, D});
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < D; ++j) out.at2(i, j) = x->val.at2(i, j) + b->val[j];
    Var node = make_node(std::move(out), {x, b});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [x, b, np, N, D]() {
            if (x->needs_grad) {
                Tensor& gx = x->ensure_grad();
                const int64_t n = gx.numel();
                for (int64_t i = 0; i < n; ++i) gx[i] += np->grad[i];
            }
            if (b->needs_grad) {
                Tensor& gb = b->ensure_grad();
                for (int i = 0; i < N; ++i)
                    for (int j = 0; j < D; ++j) gb[j] += np->grad.at2(i, j);
            }
        };
    }
    return node;
}

Var bias_add_channels(const Var& x, const Var& b) {
    if (x->val.rank() != 4 || b->val.rank() != 1 || x->val.dim(1) != b->val.dim(0))
        throw std::invalid_argument("bias_add_channels: shape mismatch");
    const int N = x->val.dim(0), C = x->val.dim(1);
    const int64_t hw = int64_t(x->val.dim(2)) * x->val.dim(3);
    Tensor out(x->val.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float bv = b->val[c];
            const float* xi = x->val.data() + (int64_t(n) * C + c) * hw;
            float* oi = out.data() + (int64_t(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) oi[i] = xi[i] + bv;
        }
    Var node = make_node(std::move(out), {x, b});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [x, b, np, N, C, hw]() {
            if (x->needs_grad) {
                Tensor& gx = x->ensure_grad();
                const int64_t n = gx.numel();
                for (int64_t i = 0; i < n; ++i) gx[i] += np->grad[i];
            }
            if (b->needs_grad) {
                Tensor& gb = b->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const float* gi = np->grad.data() + (int64_t(n) * C + c) * hw;
                        float acc = 0;
                        for (int64_t i = 0; i < hw; ++i) acc += gi[i];
                        gb[c] += acc;
                    }
            }
        };
    }
    return node;
}

Var add_sample_channel_bias(const Var& x, const Var& b) {
    if (x->val.rank() != 4 || b->val.rank() != 2 || x->val.dim(0) != b->val.dim(0) ||
        x->val.dim(1) != b->val.dim(1))
        throw std::invalid_argument("add_sample_channel_bias: expects [N,C,H,W] and [N,C]");
    const int N = x->val.dim(0), C = x->val.dim(1);
    const int64_t hw = int64_t(x->val.dim(2)) * x->val.dim(3);
    Tensor out(x->val.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float bv = b->val.at2(n, c);
            const float* xi = x->val.data() + (int64_t(n) * C + c) * hw;
            float* oi = out.data() + (int64_t(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) oi[i] = xi[i] + bv;
        }
    Var node = make_node(std::move(out), {x, b});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [x, b, np, N, C, hw]() {
            if (x->needs_grad) {
                Tensor& gx = x->ensure_grad();
                const int64_t n = gx.numel();
                for (int64_t i = 0; i < n; ++i) gx[i] += np->grad[i];
            }
            if (b->needs_grad) {
                Tensor& gb = b->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const float* gi = np->grad.data() + (int64_t(n) * C + c) * hw;
                        double acc = 0;
                        for (int64_t i = 0; i < hw; ++i) acc += gi[i];
                        gb.at2(n, c) += float(acc);
                    }
            }
        };
    }
    return node;
}

Var channel_scale(const Var& x, const Var& g) {
    if (x->val.rank() != 4 || g->val.rank() != 1 || x->val.dim(1) != g->val.dim(0))
        throw std::invalid_argument("channel_scale: expects [N,C,H,W] and [C]");
    const int N = x->val.dim(0), C = x->val.dim(1);
    const int64_t hw = int64_t(x->val.dim(2)) * x->val.dim(3);
    Tensor out(x->val.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float gv = g->val[c];
            const float* xi = x->val.data() + (int64_t(n) * C + c) * hw;
            float* oi = out.data() + (int64_t(n) * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) oi[i] = gv * xi[i];
        }
    Var node = make_node(std::move(out), {x, g});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [x, g, np, N, C, hw]() {
            if (x->needs_grad) {
                Tensor& gx = x->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const float gv = g->val[c];
                        const float* gi = np->grad.data() + (int64_t(n) * C + c) * hw;
                        float* go = gx.data() + (int64_t(n) * C + c) * hw;
                        for (int64_t i = 0; i < hw; ++i) go[i] += gv * gi[i];
                    }
            }
            if (g->needs_grad) {
                Tensor& gg = g->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const float* gi = np->grad.data() + (int64_t(n) * C + c) * hw;
                        const float* xi = x->val.data() + (int64_t(n) * C + c) * hw;
                        double acc = 0;
                        for (int64_t i = 0; i < hw; ++i) acc += double(gi[i]) * xi[i];
                        gg[c] += float(acc);
                    }
            }
        };
    }
    return node;
}

Var sample_rms_normalize(const Var& x, float eps) {
    if (x->val.rank() < 2) throw std::invalid_argument("sample_rms_normalize: expects [N,...]");
    const int N = x->val.dim(0);
    const int64_t per = x->val.numel() / N;
    Tensor out(x->val.shape());
    auto inv_rms = std::make_shared<std::vector<float>>(static_cast<size_t>(N));
    for (int n = 0; n < N; ++n) {
        const float* xi = x->val.data() + n * per;
        double sq = 0;
        for (int64_t i = 0; i < per; ++i) sq += double(xi[i]) * xi[i];
        const float inv = 1.0f / std::sqrt(float(sq / double(per)) + eps);
        (*inv_rms)[static_cast<size_t>(n)] = inv;
        float* oi = out.data() + n * per;
        for (int64_t i = 0; i < per; ++i) oi[i] = xi[i] * inv;
    }
    Var node = make_node(std::move(out), {x});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [x, np, inv_rms, N, per]() {
            Tensor& gx = x->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const float inv = (*inv_rms)[static_cast<size_t>(n)];
                const float* g = np->grad.data() + n * per;
                const float* y = np->val.data() + n * per;  // normalized values
                double dot = 0;
                for (int64_t i = 0; i < per; ++i) dot += double(g[i]) * y[i];
                const float corr = float(dot / double(per));
                float* go = gx.data() + n * per;
                for (int64_t i = 0; i < per; ++i) go[i] += inv * (g[i] - y[i] * corr);
            }
        };
    }
    return node;
}

Var scale_rows(const Var& x, const std::vector<float>& mask) {
    if (x->val.rank() < 1 || x->val.dim(0) != static_cast<int>(mask.size()))
        throw std::invalid_argument("scale_rows: mask length does not match leading dimension");
    const int N = x->val.dim(0);
    const int64_t per = x->val.numel() / N;
    Tensor out(x->val.shape());
    for (int n = 0; n < N; ++n) {
        const float m = mask[static_cast<size_t>(n)];
        const float* xi = x->val.data() + n * per;
        float* oi = out.data() + n * per;
        for (int64_t i = 0; i < per; ++i) oi[i] = m * xi[i];
    }
    Var node = make_node(std::move(out), {x});
    if (node->needs_grad) {
        Node* np = node.get();
        auto mk = mask;
        node->back = [x, np, mk, N, per]() {
            Tensor& gx = x->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const float m = mk[static_cast<size_t>(n)];
                const float* gi = np->grad.data() + n * per;
                float* go = gx.data() + n * per;
                for (int64_t i = 0; i < per; ++i) go[i] += m * gi[i];
            }
        };
    }
    return node;
}

// --------------------------------------------------------------- convolution

namespace {

struct ConvDims {
    int N, Cin, H, W, Cout, kh, kw, OH, OW;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.rank() != 4 || w.rank() != 4) throw std::invalid_argument("conv2d: expects 4-d tensors");
    ConvDims d;
    d.N = x.dim(0);
    d.Cin = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.Cout = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    if (w.dim(1) != d.Cin) throw std::invalid_argument("conv2d: channel mismatch");
    d.OH = (d.H + 2 * pad - d.kh) / stride + 1;
    d.OW = (d.W + 2 * pad - d.kw) / stride + 1;
    if (d.OH <= 0 || d.OW <= 0) throw std::invalid_argument("conv2d: empty output");
    return d;
}

void im2col(const float* x, const ConvDims& d, int stride, int pad, float* col) {
    const int P = d.OH * d.OW;
    for (int c = 0; c < d.Cin; ++c)
        for (int ki = 0; ki < d.kh; ++ki)
            for (int kj = 0; kj < d.kw; ++kj) {
                float* row = col + int64_t((c * d.kh + ki) * d.kw + kj) * P;
                for (int oh = 0; oh < d.OH; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= d.H) {
                        for (int ow = 0; ow < d.OW; ++ow) row[oh * d.OW + ow] = 0.0f;
                        continue;
                    }
                    const float* xr = x + int64_t(c) * d.H * d.W + int64_t(ih) * d.W;
                    for (int ow = 0; ow < d.OW; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        row[oh * d.OW + ow] = (iw >= 0 && iw < d.W) ? xr[iw] : 0.0f;
                    }
                }
            }
}

void col2im_add(const float* col, const ConvDims& d, int stride, int pad, float* x) {
    const int P = d.OH * d.OW;
    for (int c = 0; c < d.Cin; ++c)
        for (int ki = 0; ki < d.kh; ++ki)
            for (int kj = 0; kj < d.kw; ++kj) {
                const float* row = col + int64_t((c * d.kh + ki) * d.kw + kj) * P;
                for (int oh = 0; oh < d.OH; ++oh) {
                    const int ih = oh * stride - pad + ki;
                    if (ih < 0 || ih >= d.H) continue;
                    float* xr = x + int64_t(c) * d.H * d.W + int64_t(ih) * d.W;
                    for (int ow = 0; ow < d.OW; ++ow) {
                        const int iw = ow * stride - pad + kj;
                        if (iw >= 0 && iw < d.W) xr[iw] += row[oh * d.OW + ow];
                    }
                }
            }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, int stride, int pad) {
    const ConvDims d = conv_dims(x->val, w->val, stride, pad);
    const int K = d.Cin * d.kh * d.kw, P = d.OH * d.OW;
    // Column buffers are cached for the backward pass.
    auto cols = std::make_shared<std::vector<float>>(size_t(d.N) * K * P);
    Tensor out({d.N, d.Cout, d.OH, d.OW});
#pragma omp parallel for schedule(static)
    for (int n = 0; n < d.N; ++n) {
        float* col = cols->data() + size_t(n) * K * P;
        im2col(x->val.data() + int64_t(n) * d.Cin * d.H * d.W, d, stride, pad, col);
        CMap W(w->val.data(), d.Cout, K);
        CMap C(col, K, P);
        Map Y(out.data() + int64_t(n) * d.Cout * P, d.Cout, P);
        Y.noalias() = W * C;
    }
    Var node = make_node(std::move(out), {x, w});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [x, w, np, d, stride, pad, K, P, cols]() {
            if (w->needs_grad) {
                // Partition dW by output-row blocks: each thread owns disjoint
                // rows across all samples, keeping the reduction order fixed.
                Tensor& gw = w->ensure_grad();
                Map GW(gw.data(), d.Cout, K);
#pragma omp parallel
                {
                    int nt = 1, tid = 0;
#ifdef _OPENMP
                    nt = omp_get_num_threads();
                    tid = omp_get_thread_num();
#endif
                    const int rows = (d.Cout + nt - 1) / nt;
                    const int r0 = tid * rows, r1 = std::min(d.Cout, r0 + rows);
                    if (r0 < r1) {
                        for (int n = 0; n < d.N; ++n) {
                            CMap G(np->grad.data() + int64_t(n) * d.Cout * P, d.Cout, P);
                            CMap C(cols->data() + size_t(n) * K * P, K, P);
                            GW.middleRows(r0, r1 - r0).noalias() +=
                                G.middleRows(r0, r1 - r0) * C.transpose();
                        }
                    }
                }
            }
            if (x->needs_grad) {
                Tensor& gx = x->ensure_grad();
#pragma omp parallel for schedule(static)
                for (int n = 0; n < d.N; ++n) {
                    RowMat dcol(K, P);
                    CMap W(w->val.data(), d.Cout, K);
                    CMap G(np->grad.data() + int64_t(n) * d.Cout * P, d.Cout, P);
                    dcol.noalias() = W.transpose() * G;
                    col2im_add(dcol.data(), d, stride, pad,
                               gx.data() + int64_t(n) * d.Cin * d.H * d.W);
                }
            }
        };
    }
    return node;
}

Var conv_transpose2d(const Var& x, const Var& w, int stride, int pad) {
    // Forward of a transposed conv is the input-gradient of a regular conv
    // whose weights are w viewed as [Cin, Cout, kh, kw].
    if (x->val.rank() != 4 || w->val.rank() != 4)
        throw std::invalid_argument("conv_transpose2d: expects 4-d tensors");
    const int N = x->val.dim(0), Cin = x->val.dim(1), h = x->val.dim(2), wd = x->val.dim(3);
    const int Cout = w->val.dim(1), kh = w->val.dim(2), kw = w->val.dim(3);
    if (w->val.dim(0) != Cin) throw std::invalid_argument("conv_transpose2d: channel mismatch");
    const int OH = (h - 1) * stride - 2 * pad + kh;
    const int OW = (wd - 1) * stride - 2 * pad + kw;
    if (OH <= 0 || OW <= 0) throw std::invalid_argument("conv_transpose2d: empty output");

    // Dims of the equivalent forward conv: output -> input.
    ConvDims d;
    d.N = N;
    d.Cin = Cout;
    d.H = OH;
    d.W = OW;
    d.Cout = Cin;
    d.kh = kh;
    d.kw = kw;
    d.OH = h;
    d.OW = wd;
    const int K = Cout * kh * kw, P = h * wd;

    Tensor out({N, Cout, OH, OW});
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        RowMat col(K, P);
        CMap W(w->val.data(), Cin, K);
        CMap X(x->val.data() + int64_t(n) * Cin * P, Cin, P);
        col.noalias() = W.transpose() * X;
        float* y = out.data() + int64_t(n) * Cout * OH * OW;
        std::fill(y, y + int64_t(Cout) * OH * OW, 0.0f);
        col2im_add(col.data(), d, stride, pad, y);
    }
    Var node = make_node(std::move(out), {x, w});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [x, w, np, d, stride, pad, N, Cin, Cout, K, P, OH, OW]() {
            // dX and dW reuse im2col on the *output* gradient.
            std::shared_ptr<std::vector<float>> gcols;
            if (x->needs_grad || w->needs_grad)
                gcols = std::make_shared<std::vector<float>>(size_t(N) * K * P);
#pragma omp parallel for schedule(static)
            for (int n = 0; n < N; ++n) {
                im2col(np->grad.data() + int64_t(n) * Cout * OH * OW, d, stride, pad,
                       gcols->data() + size_t(n) * K * P);
            }
            if (x->needs_grad) {
                Tensor& gx = x->ensure_grad();
#pragma omp parallel for schedule(static)
                for (int n = 0; n < N; ++n) {
                    CMap W(w->val.data(), Cin, K);
                    CMap GC(gcols->data() + size_t(n) * K * P, K, P);
                    Map GX(gx.data() + int64_t(n) * Cin * P, Cin, P);
                    GX.noalias() += W * GC;
                }
            }
            if (w->needs_grad) {
                Tensor& gw = w->ensure_grad();
                Map GW(gw.data(), Cin, K);
#pragma omp parallel
                {
                    int nt = 1, tid = 0;
#ifdef _OPENMP
                    nt = omp_get_num_threads();
                    tid = omp_get_thread_num();
#endif
                    const int rows = (Cin + nt - 1) / nt;
                    const int r0 = tid * rows, r1 = std::min(Cin, r0 + rows);
                    if (r0 < r1) {
                        for (int n = 0; n < N; ++n) {
                            CMap X(x->val.data() + int64_t(n) * Cin * P, Cin, P);
                            CMap GC(gcols->data() + size_t(n) * K * P, K, P);
                            GW.middleRows(r0, r1 - r0).noalias() +=
                                X.middleRows(r0, r1 - r0) * GC.transpose();
                        }
                    }
                }
            }
        };
    }
    return node;
}

// ------------------------------------------------- normalization and pooling

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, float eps) {
    if (x->val.rank() != 4) throw std::invalid_argument("group_norm: expects [N,C,H,W]");
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (C % groups != 0) throw std::invalid_argument("group_norm: C % groups != 0");
    if (gamma->val.numel() != C || beta->val.numel() != C)
        throw std::invalid_argument("group_norm: affine parameter size mismatch");
    const int cg = C / groups;
    const int64_t hw = int64_t(H) * W;
    const int64_t gsize = cg * hw;

    Tensor out(x->val.shape());
    auto stats = std::make_shared<std::vector<float>>(size_t(N) * groups * 2);  // mean, inv_std
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const float* xi = x->val.data() + (int64_t(n) * C + int64_t(g) * cg) * hw;
            double mean = 0;
            for (int64_t i = 0; i < gsize; ++i) mean += xi[i];
            mean /= double(gsize);
            double var = 0;
            for (int64_t i = 0; i < gsize; ++i) {
                double dd = xi[i] - mean;
                var += dd * dd;
            }
            var /= double(gsize);
            const float inv = 1.0f / std::sqrt(float(var) + eps);
            (*stats)[size_t(n * groups + g) * 2] = float(mean);
            (*stats)[size_t(n * groups + g) * 2 + 1] = inv;
            float* oi = out.data() + (int64_t(n) * C + int64_t(g) * cg) * hw;
            for (int c = 0; c < cg; ++c) {
                const float ga = gamma->val[g * cg + c], be = beta->val[g * cg + c];
                for (int64_t i = 0; i < hw; ++i)
                    oi[c * hw + i] = (xi[c * hw + i] - float(mean)) * inv * ga + be;
            }
        }
    }
    Var node = make_node(std::move(out), {x, gamma, beta});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [x, gamma, beta, np, stats, N, C, groups, cg, hw, gsize]() {
            if (gamma->needs_grad || beta->needs_grad) {
                Tensor& gg = gamma->ensure_grad();
                Tensor& gb = beta->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int g = 0; g < groups; ++g) {
                        const float mean = (*stats)[size_t(n * groups + g) * 2];
                        const float inv = (*stats)[size_t(n * groups + g) * 2 + 1];
                        for (int c = 0; c < cg; ++c) {
                            const float* xi = x->val.data() + (int64_t(n) * C + g * cg + c) * hw;
                            const float* gi = np->grad.data() + (int64_t(n) * C + g * cg + c) * hw;
                            double sg = 0, sgb = 0;
                            for (int64_t i = 0; i < hw; ++i) {
                                sg += double(gi[i]) * (xi[i] - mean) * inv;
                                sgb += gi[i];
                            }
                            gg[g * cg + c] += float(sg);
                            gb[g * cg + c] += float(sgb);
                        }
                    }
            }
            if (x->needs_grad) {
                Tensor& gx = x->ensure_grad();
#pragma omp parallel for schedule(static)
                for (int n = 0; n < N; ++n) {
                    std::vector<float> xhat(static_cast<size_t>(gsize));
                    std::vector<float> gy(static_cast<size_t>(gsize));
                    for (int g = 0; g < groups; ++g) {
                        const float mean = (*stats)[size_t(n * groups + g) * 2];
                        const float inv = (*stats)[size_t(n * groups + g) * 2 + 1];
                        const float* xi = x->val.data() + (int64_t(n) * C + int64_t(g) * cg) * hw;
                        const float* gi = np->grad.data() + (int64_t(n) * C + int64_t(g) * cg) * hw;
                        double sum_gy = 0, sum_gy_xhat = 0;
                        for (int c = 0; c < cg; ++c) {
                            const float ga = gamma->val[g * cg + c];
                            for (int64_t i = 0; i < hw; ++i) {
                                const int64_t k = c * hw + i;
                                xhat[size_t(k)] = (xi[k] - mean) * inv;
                                gy[size_t(k)] = gi[k] * ga;
                                sum_gy += gy[size_t(k)];
                                sum_gy_xhat += double(gy[size_t(k)]) * xhat[size_t(k)];
                            }
                        }
                        const float m1 = float(sum_gy / double(gsize));
                        const float m2 = float(sum_gy_xhat / double(gsize));
                        float* go = gx.data() + (int64_t(n) * C + int64_t(g) * cg) * hw;
                        for (int64_t k = 0; k < gsize; ++k)
                            go[k] += inv * (gy[size_t(k)] - m1 - xhat[size_t(k)] * m2);
                    }
                }
            }
        };
    }
    return node;
}

Var upsample2x_nearest(const Var& x) {
    if (x->val.rank() != 4) throw std::invalid_argument("upsample2x: expects [N,C,H,W]");
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor out({N, C, H * 2, W * 2});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    const float v = x->val.at4(n, c, i, j);
                    out.at4(n, c, 2 * i, 2 * j) = v;
                    out.at4(n, c, 2 * i, 2 * j + 1) = v;
                    out.at4(n, c, 2 * i + 1, 2 * j) = v;
                    out.at4(n, c, 2 * i + 1, 2 * j + 1) = v;
                }
    Var node = make_node(std::move(out), {x});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [x, np, N, C, H, W]() {
            Tensor& gx = x->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j)
                            gx.at4(n, c, i, j) += np->grad.at4(n, c, 2 * i, 2 * j) +
                                                  np->grad.at4(n, c, 2 * i, 2 * j + 1) +
                                                  np->grad.at4(n, c, 2 * i + 1, 2 * j) +
                                                  np->grad.at4(n, c, 2 * i + 1, 2 * j + 1);
        };
    }
    return node;
}

Var avgpool2x(const Var& x) {
    if (x->val.rank() != 4) throw std::invalid_argument("avgpool2x: expects [N,C,H,W]");
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (H % 2 || W % 2) throw std::invalid_argument("avgpool2x: odd spatial size");
    Tensor out({N, C, H / 2, W / 2});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H / 2; ++i)
                for (int j = 0; j < W / 2; ++j)
                    out.at4(n, c, i, j) =
                        0.25f * (x->val.at4(n, c, 2 * i, 2 * j) + x->val.at4(n, c, 2 * i, 2 * j + 1) +
                                 x->val.at4(n, c, 2 * i + 1, 2 * j) +
                                 x->val.at4(n, c, 2 * i + 1, 2 * j + 1));
    Var node = make_node(std::move(out), {x});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [x, np, N, C, H, W]() {
            Tensor& gx = x->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < H / 2; ++i)
                        for (int j = 0; j < W / 2; ++j) {
                            const float g = 0.25f * np->grad.at4(n, c, i, j);
                            gx.at4(n, c, 2 * i, 2 * j) += g;
                            gx.at4(n, c, 2 * i, 2 * j + 1) += g;
                            gx.at4(n, c, 2 * i + 1, 2 * j) += g;
                            gx.at4(n, c, 2 * i + 1, 2 * j + 1) += g;
                        }
        };
    }
    return node;
}

Var global_avgpool(const Var& x) {
    if (x->val.rank() != 4) throw std::invalid_argument("global_avgpool: expects [N,C,H,W]");
    const int N = x->val.dim(0), C = x->val.dim(1);
    const int64_t hw = int64_t(x->val.dim(2)) * x->val.dim(3);
    Tensor out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* xi = x->val.data() + (int64_t(n) * C + c) * hw;
            double acc = 0;
            for (int64_t i = 0; i < hw; ++i) acc += xi[i];
            out.at2(n, c) = float(acc / double(hw));
        }
    Var node = make_node(std::move(out), {x});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [x, np, N, C, hw]() {
            Tensor& gx = x->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const float g = np->grad.at2(n, c) / float(hw);
                    float* gi = gx.data() + (int64_t(n) * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) gi[i] += g;
                }
        };
    }
    return node;
}

// ----------------------------------------------------------------- attention

Var self_attention(const Var& x, const Var& wq, const Var& wk, const Var& wv, const Var& wo) {
    if (x->val.rank() != 3) throw std::invalid_argument("self_attention: expects [N,C,T]");
    const int N = x->val.dim(0), C = x->val.dim(1), T = x->val.dim(2);
    for (const Var& w : {wq, wk, wv, wo})
        if (w->val.rank() != 2 || w->val.dim(0) != C || w->val.dim(1) != C)
            throw std::invalid_argument("self_attention: weights must be [C,C]");
    const float sc = 1.0f / std::sqrt(float(C));

    Tensor out({N, C, T});
    // Cached per sample: q, k, v, attn (row-softmax), o.
    auto cache = std::make_shared<std::vector<RowMat>>(size_t(N) * 5);
#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        CMap X(x->val.data() + int64_t(n) * C * T, C, T);
        CMap Q(wq->val.data(), C, C), K(wk->val.data(), C, C), V(wv->val.data(), C, C),
            O(wo->val.data(), C, C);
        RowMat q = Q * X, k = K * X, v = V * X;
        RowMat s = (q.transpose() * k) * sc;  // [T,T], row i = query i
        RowMat a(T, T);
        for (int i = 0; i < T; ++i) {
            float mx = s.row(i).maxCoeff();
            Eigen::ArrayXf e = (s.row(i).array() - mx).exp();
            a.row(i) = e / e.sum();
        }
        RowMat o = v * a.transpose();  // o[:,i] = sum_j a(i,j) v[:,j]
        Map Y(out.data() + int64_t(n) * C * T, C, T);
        Y.noalias() = O * o;
        (*cache)[size_t(n) * 5 + 0] = std::move(q);
        (*cache)[size_t(n) * 5 + 1] = std::move(k);
        (*cache)[size_t(n) * 5 + 2] = std::move(v);
        (*cache)[size_t(n) * 5 + 3] = std::move(a);
        (*cache)[size_t(n) * 5 + 4] = std::move(o);
    }
    Var node = make_node(std::move(out), {x, wq, wk, wv, wo});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [x, wq, wk, wv, wo, np, cache, N, C, T, sc]() {
            // Per-sample weight-gradient scratch, reduced in sample order.
            const auto nN = static_cast<size_t>(N);
            std::vector<RowMat> dwq(nN), dwk(nN), dwv(nN), dwo(nN);
            const bool need_w =
                wq->needs_grad || wk->needs_grad || wv->needs_grad || wo->needs_grad;
            if (x->needs_grad) x->ensure_grad();
#pragma omp parallel for schedule(static)
            for (int n = 0; n < N; ++n) {
                CMap X(x->val.data() + int64_t(n) * C * T, C, T);
                CMap G(np->grad.data() + int64_t(n) * C * T, C, T);
                CMap Q(wq->val.data(), C, C), K(wk->val.data(), C, C), V(wv->val.data(), C, C),
                    O(wo->val.data(), C, C);
                const RowMat& q = (*cache)[size_t(n) * 5 + 0];
                const RowMat& k = (*cache)[size_t(n) * 5 + 1];
                const RowMat& v = (*cache)[size_t(n) * 5 + 2];
                const RowMat& a = (*cache)[size_t(n) * 5 + 3];
                const RowMat& o = (*cache)[size_t(n) * 5 + 4];

                RowMat go = O.transpose() * G;       // dL/do
                RowMat dv = go * a;                  // dv[:,j] = sum_i a(i,j) go[:,i]
                RowMat da = go.transpose() * v;      // da(i,j) = sum_c go(c,i) v(c,j)
                RowMat ds(T, T);
                for (int i = 0; i < T; ++i) {
                    const float dot = (da.row(i).array() * a.row(i).array()).sum();
                    ds.row(i) = (da.row(i).array() - dot) * a.row(i).array();
                }
                RowMat dq = (k * ds.transpose()) * sc;
                RowMat dk = (q * ds) * sc;

                if (need_w) {
                    dwq[size_t(n)] = dq * X.transpose();
                    dwk[size_t(n)] = dk * X.transpose();
                    dwv[size_t(n)] = dv * X.transpose();
                    dwo[size_t(n)] = G * o.transpose();
                }
                if (x->needs_grad) {
                    Map GX(x->grad.data() + int64_t(n) * C * T, C, T);
                    GX.noalias() += Q.transpose() * dq + K.transpose() * dk + V.transpose() * dv;
                }
            }
            auto reduce = [&](const Var& wv_, std::vector<RowMat>& dw) {
                if (!wv_->needs_grad) return;
                Map GW(wv_->ensure_grad().data(), C, C);
                for (int n = 0; n < N; ++n) GW.noalias() += dw[static_cast<size_t>(n)];
            };
            reduce(wq, dwq);
            reduce(wk, dwk);
            reduce(wv, dwv);
            reduce(wo, dwo);
        };
    }
    return node;
}

// -------------------------------------------------------- reductions, losses

Var sum_all(const Var& a) {
    double acc = 0;
    const int64_t n = a->val.numel();
    for (int64_t i = 0; i < n; ++i) acc += a->val[i];
    Var node = make_node(Tensor::scalar(float(acc)), {a});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [a, np]() {
            Tensor& ga = a->ensure_grad();
            const float g = np->grad[0];
            const int64_t n = ga.numel();
            for (int64_t i = 0; i < n; ++i) ga[i] += g;
        };
    }
    return node;
}

Var mean_all(const Var& a) {
    const int64_t n = a->val.numel();
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += a->val[i];
    Var node = make_node(Tensor::scalar(float(acc / double(n))), {a});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [a, np, n]() {
            Tensor& ga = a->ensure_grad();
            const float g = np->grad[0] / float(n);
            for (int64_t i = 0; i < n; ++i) ga[i] += g;
        };
    }
    return node;
}

Var mse_mean(const Var& a, const Var& b) {
    check_same_shape(a, b, "mse_mean");
    const int64_t n = a->val.numel();
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = double(a->val[i]) - double(b->val[i]);
        acc += d * d;
    }
    Var node = make_node(Tensor::scalar(float(acc / double(n))), {a, b});
    if (node->needs_grad) {
        Node* np = node.get();
        node->back = [a, b, np, n]() {
            const float g = 2.0f * np->grad[0] / float(n);
            if (a->needs_grad) {
                Tensor& ga = a->ensure_grad();
                for (int64_t i = 0; i < n; ++i) ga[i] += g * (a->val[i] - b->val[i]);
            }
            if (b->needs_grad) {
                Tensor& gb = b->ensure_grad();
                for (int64_t i = 0; i < n; ++i) gb[i] -= g * (a->val[i] - b->val[i]);
            }
        };
    }
    return node;
}

Var bce_mean(const Var& probs, const Tensor& targets, float eps) {
    if (!probs->val.same_shape(targets))
        throw std::invalid_argument("bce_mean: shape mismatch");
    const int64_t n = probs->val.numel();
    // The clamp is part of the op: values outside [eps, 1-eps] contribute the
    // clamped loss and a zero gradient, mirroring a hard clamp before the log.
    auto clamped = std::make_shared<std::vector<float>>(size_t(n));
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        float p = probs->val[i];
        p = std::min(1.0f - eps, std::max(eps, p));
        (*clamped)[size_t(i)] = p;
        const double t = targets[i];
        acc -= t * std::log(double(p)) + (1.0 - t) * std::log(1.0 - double(p));
    }
    Var node = make_node(Tensor::scalar(float(acc / double(n))), {probs});
    if (node->needs_grad) {
        Node* np = node.get();
        Tensor tg = targets;
        node->back = [probs, np, clamped, tg, n, eps]() {
            Tensor& gp = probs->ensure_grad();
            const float g = np->grad[0] / float(n);
            for (int64_t i = 0; i < n; ++i) {
                const float p = (*clamped)[size_t(i)];
                const float raw = probs->val[i];
                if (raw <= eps || raw >= 1.0f - eps) continue;
                const float t = tg[i];
                gp[i] += g * (-t / p + (1.0f - t) / (1.0f - p));
            }
        };
    }
    return node;
}

}  // namespace latentmark::ag
