#include "latentmark/wm/codec.hpp"

#include <stdexcept>

#include "latentmark/io/container.hpp"

namespace latentmark::wm {

WatermarkCodec::WatermarkCodec(int k, HueBand band, uint64_t seed, float encoder_gain)
    : k_(k), band_(band) {
    if (k < 1) throw std::invalid_argument("WatermarkCodec: k must be >= 1");
    band_.validate();
    Rng rng(seed);
    // The dense layer paints near-orthogonal per-bit patterns directly at the
    // latent shape; the three stride-1 transposed-conv blocks refine them
    // through a residual connection.
    e_fc_ = nn::Dense(params_, "es.fc", k, kLatentC * kLatentHW * kLatentHW, rng);
    e_ct1_ = nn::ConvTranspose2d(params_, "es.ct1", kLatentC, 32, 3, 1, 1, rng);
    e_ct2_ = nn::ConvTranspose2d(params_, "es.ct2", 32, 32, 3, 1, 1, rng);
    e_ct3_ = nn::ConvTranspose2d(params_, "es.ct3", 32, kLatentC, 3, 1, 1, rng);
    e_gain_ = params_.add("es.gain", Tensor::full({kLatentC}, encoder_gain));
    // Fixed high-pass front end: the decoder sees the image alongside its
    // residual against a 3x3 gaussian blur, which is where latent watermark
    // patterns concentrate.
    Tensor blur({3, 3, 3, 3});
    const float g3[3] = {0.25f, 0.5f, 0.25f};
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) blur.at4(c, c, i, j) = g3[i] * g3[j];
    d_blur_ = ag::constant(std::move(blur));
    d_c1_ = nn::Conv2d(params_, "ds.c1", 6, 32, 3, 2, 1, rng);
    d_c2_ = nn::Conv2d(params_, "ds.c2", 32, 64, 3, 2, 1, rng);
    d_c3_ = nn::Conv2d(params_, "ds.c3", 64, 128, 3, 2, 1, rng);
    d_c4_ = nn::Conv2d(params_, "ds.c4", 128, 192, 3, 2, 1, rng);
    d_fc_ = nn::Dense(params_, "ds.fc", 192, k, rng);
}

ag::Var WatermarkCodec::encode_var(const Tensor& messages) const {
    if (messages.rank() != 2 || messages.dim(1) != k_)
        throw std::invalid_argument("encode: expects [N," + std::to_string(k_) + "] messages");
    ag::Var p = ag::reshape(e_fc_.forward(ag::constant(messages)),
                            {messages.dim(0), kLatentC, kLatentHW, kLatentHW});
    ag::Var h = ag::silu(e_ct1_.forward(p));
    h = ag::silu(e_ct2_.forward(h));
    h = e_ct3_.forward(h);
    // Weight-norm split: the pattern is unit-RMS, all magnitude lives in the
    // trainable gain. Visual-fidelity pressure then tunes the gain instead of
    // silently deflating the pattern weights.
    return ag::channel_scale(ag::sample_rms_normalize(ag::add(p, h)), e_gain_);
}

Tensor WatermarkCodec::encode(const BitMessage& m) const {
    if (m.k() != k_) throw std::invalid_argument("encode: message length mismatch");
    Tensor in({1, k_});
    for (int i = 0; i < k_; ++i) in.at2(0, i) = float(m[i]);
    return encode_var(in)->val.reshaped(latent_shape());
}

ag::Var WatermarkCodec::decode_var(const ag::Var& images) const {
    if (images->val.rank() != 4 || images->val.dim(1) != 3 ||
        images->val.dim(2) != kImageSize || images->val.dim(3) != kImageSize)
        throw std::invalid_argument("decode: expects [N,3,32,32], got " +
                                    images->val.shape_str());
    ag::Var residual = ag::sub(images, ag::conv2d(images, d_blur_, 1, 1));
    ag::Var h = ag::silu(d_c1_.forward(ag::concat_channels(images, residual)));
    h = ag::silu(d_c2_.forward(h));
    h = ag::silu(d_c3_.forward(h));
    h = ag::silu(d_c4_.forward(h));
    h = ag::global_avgpool(h);
    return ag::sigmoid(d_fc_.forward(h));
}

std::vector<double> WatermarkCodec::decode_probs(const Tensor& image) const {
    Tensor batch = image.reshaped({1, 3, kImageSize, kImageSize});
    ag::Var probs = decode_var(ag::constant(batch));
    std::vector<double> out(static_cast<size_t>(k_));
    for (int i = 0; i < k_; ++i) out[static_cast<size_t>(i)] = probs->val.at2(0, i);
    return out;
}

BitMessage WatermarkCodec::decode_bits(const Tensor& image) const {
    std::vector<double> probs = decode_probs(image);
    std::vector<uint8_t> bits(static_cast<size_t>(k_));
    for (int i = 0; i < k_; ++i) bits[static_cast<size_t>(i)] = probs[static_cast<size_t>(i)] > 0.5;
    return BitMessage(std::move(bits));
}

std::string WatermarkCodec::weight_checksum() const {
    std::vector<uint8_t> bytes;
    for (const auto& item : params_.items) {
        const auto* p = reinterpret_cast<const uint8_t*>(item.var->val.data());
        bytes.insert(bytes.end(), p, p + item.var->val.numel() * 4);
    }
    return io::sha256_hex(bytes);
}

void WatermarkCodec::save(const std::string& path) const {
    io::Container c;
    c.kind = "wm_codec";
    c.meta["k"] = k_;
    c.meta["latent_shape"] = latent_shape();
    c.meta["hue_band"] = {{"h_low", band_.h_low},
                          {"h_high", band_.h_high},
                          {"softness", band_.softness}};
    for (const auto& item : params_.items) c.add(item.name, item.var->val);
    c.save(path);
}

WatermarkCodec WatermarkCodec::load(const std::string& path) {
    io::Container c = io::Container::load(path);
    if (c.kind != "wm_codec")
        throw std::runtime_error("load: " + path + " is not a codec checkpoint");
    const auto& hb = c.meta.at("hue_band");
    HueBand band(hb.at("h_low").get<double>(), hb.at("h_high").get<double>(),
                 hb.at("softness").get<double>());
    WatermarkCodec codec(c.meta.at("k").get<int>(), band, 0);
    for (auto& item : codec.params_.items) {
        const Tensor& t = c.get(item.name);
        if (!t.same_shape(item.var->val))
            throw std::runtime_error("load: shape mismatch for " + item.name);
        item.var->val = t;
    }
    codec.freeze();
    return codec;
}

Tensor embed_latent(const Tensor& z_o, const BitMessage& m, const WatermarkCodec& codec) {
    if (z_o.shape() != codec.latent_shape())
        throw std::invalid_argument("embed_latent: latent shape mismatch, got " + z_o.shape_str());
    if (m.all_zero()) return z_o;
    Tensor perturbation = codec.encode(m);
    Tensor out = z_o;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += perturbation[i];
    return out;
}

}  // namespace latentmark::wm
