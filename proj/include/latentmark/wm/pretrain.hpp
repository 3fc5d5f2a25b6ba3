#pragma once

#include <vector>

#include "latentmark/diffusion/autoencoder.hpp"
#include "latentmark/eval/distortion.hpp"
#include "latentmark/wm/codec.hpp"

namespace latentmark::wm {

struct PretrainConfig {
    int k = 48;
    double lambda_lpips = 5.0;
    double mu_prvl = 0.5;
    double nu_prts = 0.1;
    double p_zero = 0.2;
    float learning_rate = 1e-3f;
    float weight_decay = 1e-4f;
    int epochs = 50;
    // PRTS and zero-message regularization switch on at this epoch (0-based).
    int prts_activation_epoch = 40;
    int batch_size = 32;
    HueBand band;
    std::vector<eval::DistortionSpec> distortion_menu;  // defaults filled if empty
    int eval_images = 128;                              // held-out probe size per epoch

    void validate() const;
    static std::vector<eval::DistortionSpec> default_menu();
};

struct PretrainEpochRecord {
    int epoch;
    double l_msg, l_perceptual, l_prvl, l_prts;
    double heldout_bitacc;
    double clean_zero_rate;
};

// The stage-1 loop: sample the target message (zero branch with probability
// p once regularization is active), build the watermarked latent, decode both
// latents to images, distort, extract, and optimize E_s and D_s on
// L_msg + lambda*L_perceptual + mu*L_PRVL + nu*L_PRTS. The autoencoder stays
// frozen. Returns one record per epoch.
std::vector<PretrainEpochRecord> pretrain_codec(WatermarkCodec& codec, const PretrainConfig& cfg,
                                                const std::vector<Tensor>& train_images,
                                                const std::vector<Tensor>& heldout_images,
                                                const diffusion::LatentAutoencoder& autoencoder,
                                                Rng& rng);

}  // namespace latentmark::wm
