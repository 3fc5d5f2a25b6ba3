#include "latentmark/diffusion/denoiser.hpp"

#include <cmath>
#include <stdexcept>

#include "latentmark/io/container.hpp"
#include "latentmark/nn/optim.hpp"

namespace latentmark::diffusion {

namespace {
constexpr int kNormGroups = 8;

Tensor sinusoidal_embedding(const std::vector<int>& ts, int dim) {
    const int half = dim / 2;
    Tensor out({static_cast<int>(ts.size()), dim});
    for (size_t n = 0; n < ts.size(); ++n)
        for (int j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * double(j) / double(half));
            out.at2(int(n), 2 * j) = float(std::sin(ts[n] * freq));
            out.at2(int(n), 2 * j + 1) = float(std::cos(ts[n] * freq));
        }
    return out;
}
}  // namespace

DenoiserModel::ResBlock DenoiserModel::make_block(const std::string& prefix, int cin, int cout,
                                                  Rng& rng) {
    ResBlock b;
    b.n1 = nn::GroupNorm(params_, prefix + ".n1", cin, kNormGroups);
    b.c1 = nn::Conv2d(params_, prefix + ".c1", cin, cout, 3, 1, 1, rng);
    b.tproj = nn::Dense(params_, prefix + ".tproj", kEmb, cout, rng);
    b.n2 = nn::GroupNorm(params_, prefix + ".n2", cout, kNormGroups);
    b.c2 = nn::Conv2d(params_, prefix + ".c2", cout, cout, 3, 1, 1, rng);
    if (cin != cout) {
        b.shortcut = nn::Conv2d(params_, prefix + ".skip", cin, cout, 1, 1, 0, rng);
        b.has_shortcut = true;
    }
    inventory_.push_back({prefix + ".c1.w", lora::LayerTag::resnet, cout, cin * 9});
    inventory_.push_back({prefix + ".tproj.w", lora::LayerTag::resnet, cout, kEmb});
    inventory_.push_back({prefix + ".c2.w", lora::LayerTag::resnet, cout, cout * 9});
    if (b.has_shortcut)
        inventory_.push_back({prefix + ".skip.w", lora::LayerTag::resnet, cout, cin});
    return b;
}

DenoiserModel::DenoiserModel(int n_styles, uint64_t seed) : n_styles_(n_styles) {
    if (n_styles < 1) throw std::invalid_argument("DenoiserModel: need at least one style");
    Rng rng(seed);
    const int C = kChannels;

    conv_in_ = nn::Conv2d(params_, "conv_in", kLatentC, C, 3, 1, 1, rng);
    inventory_.push_back({"conv_in.w", lora::LayerTag::conv, C, kLatentC * 9});

    d1_ = make_block("down1", C, C, rng);
    d2_ = make_block("down2", C, C, rng);

    down_ = nn::Conv2d(params_, "down", C, C, 3, 2, 1, rng);
    inventory_.push_back({"down.w", lora::LayerTag::conv, C, C * 9});

    m1_ = make_block("mid1", C, C, rng);

    attn_norm_ = nn::GroupNorm(params_, "attn.norm", C, kNormGroups);
    const float ws = 1.0f / std::sqrt(float(C));
    wq_ = params_.add("attn.wq.w", nn::randn_init({C, C}, ws, rng));
    wk_ = params_.add("attn.wk.w", nn::randn_init({C, C}, ws, rng));
    wv_ = params_.add("attn.wv.w", nn::randn_init({C, C}, ws, rng));
    wo_ = params_.add("attn.wo.w", nn::randn_init({C, C}, ws, rng));
    for (const char* nm : {"attn.wq.w", "attn.wk.w", "attn.wv.w", "attn.wo.w"})
        inventory_.push_back({nm, lora::LayerTag::attention, C, C});

    ffn_norm_ = nn::GroupNorm(params_, "ffn.norm", C, kNormGroups);
    ffn1_ = nn::Conv2d(params_, "ffn.c1", C, 4 * C, 1, 1, 0, rng);
    ffn2_ = nn::Conv2d(params_, "ffn.c2", 4 * C, C, 1, 1, 0, rng);
    inventory_.push_back({"ffn.c1.w", lora::LayerTag::transformer_other, 4 * C, C});
    inventory_.push_back({"ffn.c2.w", lora::LayerTag::transformer_other, C, 4 * C});

    m2_ = make_block("mid2", C, C, rng);

    up_ = nn::Conv2d(params_, "up", C, C, 3, 1, 1, rng);
    inventory_.push_back({"up.w", lora::LayerTag::conv, C, C * 9});

    u1_ = make_block("up1", 2 * C, C, rng);
    u2_ = make_block("up2", 2 * C, C, rng);

    norm_out_ = nn::GroupNorm(params_, "out.norm", C, kNormGroups);
    conv_out_ = nn::Conv2d(params_, "out.conv", C, kLatentC, 3, 1, 1, rng);

    time1_ = nn::Dense(params_, "time.l1", kEmb, kEmb, rng);
    time2_ = nn::Dense(params_, "time.l2", kEmb, kEmb, rng);
    cond_table_ =
        params_.add("cond.table", nn::randn_init({n_styles + 1, kEmb}, 0.2f, rng));
}

ag::Var DenoiserModel::resolve(const std::string& id, const ag::Var& w,
                               const lora::WeightResolver* resolver) const {
    return resolver ? (*resolver)(id, w) : w;
}

ag::Var DenoiserModel::res_forward(const ResBlock& blk, const std::string& prefix,
                                   const ag::Var& x, const ag::Var& emb,
                                   const lora::WeightResolver* resolver) const {
    ag::Var h = ag::silu(blk.n1.forward(x));
    h = ag::bias_add_channels(
        ag::conv2d(h, resolve(prefix + ".c1.w", blk.c1.w, resolver), 1, 1), blk.c1.b);
    ag::Var t = ag::bias_add_rows(
        ag::matmul(ag::silu(emb), resolve(prefix + ".tproj.w", blk.tproj.w, resolver), false, true),
        blk.tproj.b);
    h = ag::add_sample_channel_bias(h, t);
    h = ag::silu(blk.n2.forward(h));
    h = ag::bias_add_channels(
        ag::conv2d(h, resolve(prefix + ".c2.w", blk.c2.w, resolver), 1, 1), blk.c2.b);
    ag::Var skip = x;
    if (blk.has_shortcut)
        skip = ag::bias_add_channels(
            ag::conv2d(x, resolve(prefix + ".skip.w", blk.shortcut.w, resolver), 1, 0),
            blk.shortcut.b);
    return ag::add(h, skip);
}

ag::Var DenoiserModel::forward_var(const ag::Var& z, const std::vector<int>& ts,
                                   const std::vector<int>& conds,
                                   const lora::WeightResolver* resolver) const {
    if (z->val.rank() != 4 || z->val.dim(1) != kLatentC || z->val.dim(2) != kLatentHW ||
        z->val.dim(3) != kLatentHW)
        throw std::invalid_argument("denoiser: expects [N,4,8,8], got " + z->val.shape_str());
    const int N = z->val.dim(0);
    if (int(ts.size()) != N || int(conds.size()) != N)
        throw std::invalid_argument("denoiser: ts/conds length mismatch");
    for (int c : conds)
        if (c < 0 || c > n_styles_)
            throw std::invalid_argument("denoiser: condition index out of range");

    // time + class embedding
    ag::Var emb = ag::constant(sinusoidal_embedding(ts, kEmb));
    emb = time2_.forward(ag::silu(time1_.forward(emb)));
    Tensor onehot({N, n_styles_ + 1});
    for (int n = 0; n < N; ++n) onehot.at2(n, conds[size_t(n)]) = 1.0f;
    ag::Var cemb = ag::matmul(ag::constant(onehot), cond_table_);
    emb = ag::add(emb, cemb);

    ag::Var h = ag::bias_add_channels(
        ag::conv2d(z, resolve("conv_in.w", conv_in_.w, resolver), 1, 1), conv_in_.b);
    ag::Var s1 = res_forward(d1_, "down1", h, emb, resolver);
    ag::Var s2 = res_forward(d2_, "down2", s1, emb, resolver);
    ag::Var b = ag::bias_add_channels(
        ag::conv2d(s2, resolve("down.w", down_.w, resolver), 2, 1), down_.b);

    b = res_forward(m1_, "mid1", b, emb, resolver);
    {
        ag::Var an = attn_norm_.forward(b);
        const int C = kChannels, HW = b->val.dim(2) * b->val.dim(3);
        ag::Var tokens = ag::reshape(an, {b->val.dim(0), C, HW});
        ag::Var att = ag::self_attention(tokens, resolve("attn.wq.w", wq_, resolver),
                                         resolve("attn.wk.w", wk_, resolver),
                                         resolve("attn.wv.w", wv_, resolver),
                                         resolve("attn.wo.w", wo_, resolver));
        b = ag::add(b, ag::reshape(att, b->val.shape()));
        ag::Var fn = ffn_norm_.forward(b);
        fn = ag::bias_add_channels(
            ag::conv2d(fn, resolve("ffn.c1.w", ffn1_.w, resolver), 1, 0), ffn1_.b);
        fn = ag::silu(fn);
        fn = ag::bias_add_channels(
            ag::conv2d(fn, resolve("ffn.c2.w", ffn2_.w, resolver), 1, 0), ffn2_.b);
        b = ag::add(b, fn);
    }
    b = res_forward(m2_, "mid2", b, emb, resolver);

    ag::Var u = ag::upsample2x_nearest(b);
    u = ag::bias_add_channels(ag::conv2d(u, resolve("up.w", up_.w, resolver), 1, 1), up_.b);
    u = res_forward(u1_, "up1", ag::concat_channels(u, s2), emb, resolver);
    u = res_forward(u2_, "up2", ag::concat_channels(u, s1), emb, resolver);

    u = ag::silu(norm_out_.forward(u));
    return ag::bias_add_channels(ag::conv2d(u, conv_out_.w, 1, 1), conv_out_.b);
}

Tensor DenoiserModel::forward(const Tensor& z, const std::vector<int>& ts,
                              const std::vector<int>& conds) const {
    return forward_var(ag::constant(z), ts, conds)->val;
}

Tensor DenoiserModel::forward_with_weights(const Tensor& z, const std::vector<int>& ts,
                                           const std::vector<int>& conds,
                                           const std::map<std::string, Tensor>& weights) const {
    lora::WeightResolver res = [&weights](const std::string& id, const ag::Var& base) -> ag::Var {
        auto it = weights.find(id);
        if (it == weights.end()) return base;
        if (it->second.numel() != base->val.numel())
            throw std::invalid_argument("forward_with_weights: shape mismatch on " + id);
        return ag::constant(it->second.reshaped(base->val.shape()));
    };
    return forward_var(ag::constant(z), ts, conds, &res)->val;
}

std::map<std::string, Tensor> DenoiserModel::adaptable_weights() const {
    std::map<std::string, Tensor> out;
    for (const auto& info : inventory_) out.emplace(info.target_id, params_.find(info.target_id)->val);
    return out;
}

std::vector<double> DenoiserModel::train_base(const std::vector<Tensor>& latents,
                                              const std::vector<int>& styles,
                                              const NoiseSchedule& schedule,
                                              const DenoiserTrainConfig& cfg, Rng& rng) {
    if (latents.empty() || latents.size() != styles.size())
        throw std::invalid_argument("train_base: empty dataset or style size mismatch");
    nn::AdamW opt(params_.vars(), cfg.learning_rate, cfg.weight_decay);
    Rng order = rng.stream("base.order");
    Rng noise = rng.stream("base.noise");
    std::vector<size_t> idx(latents.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::vector<double> epoch_losses;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order.shuffle(idx.begin(), idx.end());
        double total = 0;
        int steps = 0;
        for (size_t start = 0; start + cfg.batch_size <= idx.size();
             start += size_t(cfg.batch_size)) {
            const int B = cfg.batch_size;
            Tensor zb({B, kLatentC, kLatentHW, kLatentHW});
            Tensor eps(zb.shape());
            std::vector<int> ts(static_cast<size_t>(B));
            std::vector<int> cs(static_cast<size_t>(B));
            // One timestep per batch keeps q_sample a single affine op; t is
            // uniform over [1, T].
            const int t = 1 + int(noise.below(uint64_t(schedule.T)));
            for (int b = 0; b < B; ++b) {
                const size_t i = idx[start + size_t(b)];
                std::copy_n(latents[i].data(), latents[i].numel(),
                            zb.data() + int64_t(b) * latents[i].numel());
                ts[size_t(b)] = t;
                cs[size_t(b)] = noise.uniform() < cfg.cond_dropout ? uncond_index()
                                                                   : styles[i];
            }
            for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = float(noise.gaussian());
            Tensor zt = q_sample(zb, t, eps, schedule);
            opt.zero_grad();
            ag::Var pred = forward_var(ag::constant(zt), ts, cs);
            ag::Var loss = ag::mse_mean(pred, ag::constant(eps));
            if (!std::isfinite(loss->val[0]))
                throw std::runtime_error("train_base: non-finite loss");
            ag::backward(loss);
            opt.step();
            total += loss->val[0];
            ++steps;
        }
        epoch_losses.push_back(total / std::max(1, steps));
    }
    return epoch_losses;
}

std::string DenoiserModel::weight_checksum() const {
    std::vector<uint8_t> bytes;
    for (const auto& item : params_.items) {
        const auto* p = reinterpret_cast<const uint8_t*>(item.var->val.data());
        bytes.insert(bytes.end(), p, p + item.var->val.numel() * 4);
    }
    return io::sha256_hex(bytes);
}

void DenoiserModel::save(const std::string& path) const {
    io::Container c;
    c.kind = "denoiser";
    c.meta["n_styles"] = n_styles_;
    c.meta["channels"] = kChannels;
    for (const auto& item : params_.items) c.add(item.name, item.var->val);
    c.save(path);
}

DenoiserModel DenoiserModel::load(const std::string& path) {
    io::Container c = io::Container::load(path);
    if (c.kind != "denoiser")
        throw std::runtime_error("load: " + path + " is not a denoiser checkpoint");
    DenoiserModel m(c.meta.at("n_styles").get<int>(), 0);
    for (auto& item : m.params_.items) {
        const Tensor& t = c.get(item.name);
        if (!t.same_shape(item.var->val))
            throw std::runtime_error("load: shape mismatch for " + item.name);
        item.var->val = t;
    }
    m.freeze();
    return m;
}

}  // namespace latentmark::diffusion
