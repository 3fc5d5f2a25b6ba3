#include "latentmark/wm/pretrain.hpp"

#include <cmath>
#include <stdexcept>

#include "latentmark/nn/optim.hpp"
#include "latentmark/wm/losses.hpp"
#include "latentmark/wm/train_distortion.hpp"

namespace latentmark::wm {

void PretrainConfig::validate() const {
    if (k < 1) throw std::invalid_argument("pretrain: k must be >= 1");
    if (p_zero < 0.0 || p_zero > 1.0) throw std::invalid_argument("pretrain: p_zero out of [0,1]");
    if (epochs < 0) throw std::invalid_argument("pretrain: epochs must be >= 0");
    if (prts_activation_epoch > epochs)
        throw std::invalid_argument("pretrain: prts_activation_epoch must be <= epochs");
    if (batch_size < 1) throw std::invalid_argument("pretrain: batch_size must be >= 1");
    band.validate();
}

std::vector<eval::DistortionSpec> PretrainConfig::default_menu() {
    using K = eval::DistortionSpec::Kind;
    eval::DistortionSpec identity;
    eval::DistortionSpec blur;
    blur.kind = K::gaussian_blur;
    blur.sigma = 1.0;
    eval::DistortionSpec jpeg;
    jpeg.kind = K::jpeg;
    jpeg.quality = 80;
    eval::DistortionSpec noise;
    noise.kind = K::additive_noise;
    noise.noise_sigma = 0.02;
    return {identity, blur, jpeg, noise};
}

namespace {

struct EpochEval {
    double bitacc;
    double clean_zero_rate;
};

EpochEval evaluate(const WatermarkCodec& codec, const diffusion::LatentAutoencoder& ae,
                   const std::vector<Tensor>& heldout, int n_eval, Rng& rng) {
    const int n = std::min<int>(n_eval, int(heldout.size()));
    int bit_matches = 0, bit_total = 0, zero_hits = 0;
    for (int i = 0; i < n; ++i) {
        const Tensor img = heldout[size_t(i)].reshaped({1, 3, 32, 32});
        const Tensor z = ae.encode(img);
        BitMessage m = BitMessage::random(codec.k(), rng);
        Tensor zw = embed_latent(z.reshaped(codec.latent_shape()), m, codec);
        Tensor iw = ae.decode(zw.reshaped({1, 4, 8, 8}));
        BitMessage decoded = codec.decode_bits(iw.reshaped({3, 32, 32}));
        for (int b = 0; b < codec.k(); ++b) bit_matches += decoded[b] == m[b];
        bit_total += codec.k();
        // clean-image zero rate on the original held-out image
        BitMessage clean = codec.decode_bits(heldout[size_t(i)]);
        zero_hits += clean.all_zero();
    }
    return {double(bit_matches) / std::max(1, bit_total), double(zero_hits) / std::max(1, n)};
}

}  // namespace

std::vector<PretrainEpochRecord> pretrain_codec(WatermarkCodec& codec, const PretrainConfig& cfg,
                                                const std::vector<Tensor>& train_images,
                                                const std::vector<Tensor>& heldout_images,
                                                const diffusion::LatentAutoencoder& autoencoder,
                                                Rng& rng) {
    cfg.validate();
    if (train_images.empty()) throw std::invalid_argument("pretrain: empty dataset");
    if (codec.k() != cfg.k) throw std::invalid_argument("pretrain: codec k != config k");

    const std::vector<eval::DistortionSpec> menu =
        cfg.distortion_menu.empty() ? PretrainConfig::default_menu() : cfg.distortion_menu;

    nn::AdamW opt(codec.params().vars(), cfg.learning_rate, cfg.weight_decay);
    Rng order = rng.stream("pretrain.order");
    Rng msg_rng = rng.stream("pretrain.msg");
    Rng distort_rng = rng.stream("pretrain.distort");
    Rng eval_rng = rng.stream("pretrain.eval");

    std::vector<size_t> idx(train_images.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    const int B = cfg.batch_size;
    const int k = cfg.k;
    std::vector<PretrainEpochRecord> log;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const bool reg_active = epoch >= cfg.prts_activation_epoch;
        const double p_eff = reg_active ? cfg.p_zero : 0.0;
        order.shuffle(idx.begin(), idx.end());

        double sum_msg = 0, sum_per = 0, sum_prvl = 0, sum_prts = 0;
        int steps = 0;
        for (size_t start = 0; start + size_t(B) <= idx.size(); start += size_t(B)) {
            Tensor batch({B, 3, 32, 32});
            for (int b = 0; b < B; ++b)
                std::copy_n(train_images[idx[start + size_t(b)]].data(), 3 * 32 * 32,
                            batch.data() + int64_t(b) * 3 * 32 * 32);

            Tensor z_o = autoencoder.encode(batch);  // frozen, no grad

            Tensor messages({B, k});
            Tensor targets({B, k});
            std::vector<float> mask(size_t(B), 1.0f);
            for (int b = 0; b < B; ++b) {
                BitMessage m = sample_training_message(k, p_eff, msg_rng);
                if (m.all_zero()) mask[size_t(b)] = 0.0f;  // z_w = z_o exactly
                for (int i = 0; i < k; ++i) {
                    messages.at2(b, i) = float(m[i]);
                    targets.at2(b, i) = float(m[i]);
                }
            }

            ag::Var z_s = codec.encode_var(messages);
            ag::Var z_w = ag::add(ag::constant(z_o), ag::scale_rows(z_s, mask));
            ag::Var i_w = autoencoder.decode_var(z_w);
            Tensor i_r = autoencoder.decode(z_o);

            const size_t pick = distort_rng.below(menu.size());
            ag::Var distorted = apply_train_distortion(i_w, menu[pick], distort_rng);
            ag::Var probs = codec.decode_var(distorted);

            ag::Var l_msg = ag::bce_mean(probs, targets, 1e-7f);
            ag::Var l_per = perceptual_op(i_w, i_r);
            ag::Var l_prvl = prvl_op(i_w, i_r);
            ag::Var total = ag::add(
                l_msg, ag::add(ag::scale(l_per, float(cfg.lambda_lpips)),
                               ag::scale(l_prvl, float(cfg.mu_prvl))));
            double prts_val = 0.0;
            if (reg_active) {
                ag::Var l_prts = prts_op(i_w, i_r, cfg.band);
                prts_val = l_prts->val[0];
                total = ag::add(total, ag::scale(l_prts, float(cfg.nu_prts)));
            }

            if (!std::isfinite(total->val[0]))
                throw std::runtime_error("pretrain: non-finite loss at epoch " +
                                         std::to_string(epoch) + " step " + std::to_string(steps));

            opt.zero_grad();
            ag::backward(total);
            opt.step();

            sum_msg += l_msg->val[0];
            sum_per += l_per->val[0];
            sum_prvl += l_prvl->val[0];
            sum_prts += prts_val;
            ++steps;
        }

        EpochEval ev = heldout_images.empty()
                           ? EpochEval{0.0, 0.0}
                           : evaluate(codec, autoencoder, heldout_images, cfg.eval_images, eval_rng);
        log.push_back({epoch, sum_msg / std::max(1, steps), sum_per / std::max(1, steps),
                       sum_prvl / std::max(1, steps), sum_prts / std::max(1, steps), ev.bitacc,
                       ev.clean_zero_rate});
    }
    return log;
}

}  // namespace latentmark::wm
