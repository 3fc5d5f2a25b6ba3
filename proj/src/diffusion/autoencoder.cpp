#include "latentmark/diffusion/autoencoder.hpp"

#include <cmath>
#include <stdexcept>

#include "latentmark/eval/metrics.hpp"
#include "latentmark/io/container.hpp"
#include "latentmark/nn/optim.hpp"

namespace latentmark::diffusion {

LatentAutoencoder::LatentAutoencoder(uint64_t init_seed) {
    Rng rng(init_seed);
    e1_ = nn::Conv2d(params_, "enc.c1", 3, 32, 3, 1, 1, rng);
    e2_ = nn::Conv2d(params_, "enc.c2", 32, 64, 3, 2, 1, rng);
    e3_ = nn::Conv2d(params_, "enc.c3", 64, 64, 3, 2, 1, rng);
    e4_ = nn::Conv2d(params_, "enc.c4", 64, kLatentChannels, 3, 1, 1, rng);
    d1_ = nn::Conv2d(params_, "dec.c1", kLatentChannels, 64, 3, 1, 1, rng);
    d2_ = nn::Conv2d(params_, "dec.c2", 64, 64, 3, 1, 1, rng);
    d3_ = nn::Conv2d(params_, "dec.c3", 64, 32, 3, 1, 1, rng);
    d4_ = nn::Conv2d(params_, "dec.c4", 32, 3, 3, 1, 1, rng);
}

ag::Var LatentAutoencoder::encode_var(const ag::Var& images) const {
    ag::Var h = ag::silu(e1_.forward(images));
    h = ag::silu(e2_.forward(h));
    h = ag::silu(e3_.forward(h));
    return e4_.forward(h);
}

ag::Var LatentAutoencoder::decode_var(const ag::Var& latents) const {
    if (latents->val.rank() != 4 || latents->val.dim(1) != kLatentChannels ||
        latents->val.dim(2) != kLatentSize || latents->val.dim(3) != kLatentSize)
        throw std::invalid_argument("decode: expects [N,4,8,8], got " + latents->val.shape_str());
    ag::Var h = ag::silu(d1_.forward(latents));
    h = ag::upsample2x_nearest(h);
    h = ag::silu(d2_.forward(h));
    h = ag::upsample2x_nearest(h);
    h = ag::silu(d3_.forward(h));
    return ag::sigmoid(d4_.forward(h));
}

Tensor LatentAutoencoder::encode(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != kImageSize ||
        images.dim(3) != kImageSize)
        throw std::invalid_argument("encode: expects [N,3,32,32], got " + images.shape_str());
    return encode_var(ag::constant(images))->val;
}

Tensor LatentAutoencoder::decode(const Tensor& latents) const {
    return decode_var(ag::constant(latents))->val;
}

std::vector<double> LatentAutoencoder::train(const std::vector<Tensor>& train_images,
                                             const std::vector<Tensor>& heldout_images,
                                             const AutoencoderTrainConfig& cfg, Rng& rng) {
    if (train_images.empty()) throw std::invalid_argument("autoencoder train: empty dataset");
    std::vector<double> psnrs;
    nn::AdamW opt(params_.vars(), cfg.learning_rate, cfg.weight_decay);
    Rng order = rng.stream("ae.order");
    Rng jitter = rng.stream("ae.jitter");
    std::vector<size_t> idx(train_images.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order.shuffle(idx.begin(), idx.end());
        for (size_t start = 0; start + cfg.batch_size <= idx.size();
             start += size_t(cfg.batch_size)) {
            Tensor batch({cfg.batch_size, 3, kImageSize, kImageSize});
            for (int b = 0; b < cfg.batch_size; ++b)
                std::copy_n(train_images[idx[start + size_t(b)]].data(), 3 * 32 * 32,
                            batch.data() + int64_t(b) * 3 * 32 * 32);
            opt.zero_grad();
            ag::Var in = ag::constant(batch);
            ag::Var z = encode_var(in);
            if (cfg.latent_noise > 0) {
                Tensor noise(z->val.shape());
                for (int64_t i = 0; i < noise.numel(); ++i)
                    noise[i] = float(cfg.latent_noise * jitter.gaussian());
                z = ag::add(z, ag::constant(std::move(noise)));
            }
            ag::Var recon = decode_var(z);
            ag::Var loss = ag::mse_mean(recon, in);
            if (!std::isfinite(loss->val[0]))
                throw std::runtime_error("autoencoder train: non-finite loss at epoch " +
                                         std::to_string(epoch));
            ag::backward(loss);
            opt.step();
        }
        psnrs.push_back(heldout_psnr(heldout_images));
    }

    // Latent scale so diffusion operates near unit variance.
    double sq = 0;
    int64_t count = 0;
    for (size_t i = 0; i < train_images.size(); i += 8) {
        Tensor z = encode(train_images[i].reshaped({1, 3, kImageSize, kImageSize}));
        for (int64_t j = 0; j < z.numel(); ++j) sq += double(z[j]) * z[j];
        count += z.numel();
    }
    const double std_dev = std::sqrt(std::max(1e-12, sq / double(count)));
    latent_scale_ = float(1.0 / std_dev);
    return psnrs;
}

double LatentAutoencoder::heldout_psnr(const std::vector<Tensor>& images) const {
    if (images.empty()) throw std::invalid_argument("heldout_psnr: empty set");
    double total = 0;
    for (const auto& img : images) {
        Tensor batch = img.reshaped({1, 3, kImageSize, kImageSize});
        Tensor recon = decode(encode(batch));
        total += eval::psnr(img.reshaped({3, kImageSize, kImageSize}),
                            recon.reshaped({3, kImageSize, kImageSize}));
    }
    return total / double(images.size());
}

void LatentAutoencoder::save(const std::string& path) const {
    io::Container c;
    c.kind = "latent_autoencoder";
    c.meta["latent_shape"] = latent_shape();
    c.meta["latent_scale"] = latent_scale_;
    for (const auto& item : params_.items) c.add(item.name, item.var->val);
    c.save(path);
}

LatentAutoencoder LatentAutoencoder::load(const std::string& path) {
    io::Container c = io::Container::load(path);
    if (c.kind != "latent_autoencoder")
        throw std::runtime_error("load: " + path + " is not an autoencoder checkpoint");
    LatentAutoencoder ae;
    ae.latent_scale_ = c.meta.at("latent_scale").get<float>();
    for (auto& item : ae.params_.items) {
        const Tensor& t = c.get(item.name);
        if (!t.same_shape(item.var->val))
            throw std::runtime_error("load: shape mismatch for " + item.name);
        item.var->val = t;
    }
    ae.freeze();
    return ae;
}

}  // namespace latentmark::diffusion
