#pragma once

#include <optional>
#include <string>
#include <vector>

#include "latentmark/diffusion/autoencoder.hpp"
#include "latentmark/diffusion/dataset.hpp"
#include "latentmark/diffusion/denoiser.hpp"
#include "latentmark/diffusion/sampler.hpp"
#include "latentmark/diffusion/schedule.hpp"
#include "latentmark/lora/adapter.hpp"
#include "latentmark/nn/optim.hpp"
#include "latentmark/wm/codec.hpp"

namespace latentmark::train {

struct JointTrainConfig {
    float lambda_wm = 1.0f;          // fixed at 1 throughout
    double bitacc_threshold = 0.75;  // tau
    int consecutive_required = 3;
    int ramp_steps = 500;
    float learning_rate = 1e-4f;
    float weight_decay = 1e-4f;
    int epochs = 10;
    int eval_interval = 100;  // steps between bit-accuracy probes
    int batch_size = 16;
    int probe_images = 16;
    diffusion::SamplerSpec probe_spec;  // ddim-20, guidance 3 by default
    double cond_dropout = 0.1;
    std::string checkpoint_dir;  // per-epoch checkpoints when non-empty

    void validate() const;
};

// Two-phase dynamic weighting: hold lambda_wm = 1 and lambda_style = 0 until
// the probe bit accuracy clears tau for `consecutive_required` straight
// evaluations, then ramp lambda_style linearly to 1. Transitions only move
// forward.
struct WeightScheduler {
    enum class State { watermark_phase, ramping, joint_phase };
    State state = State::watermark_phase;
    int consecutive = 0;
    int ramp_progress = 0;
    float lambda_style = 0.0f;
    float lambda_wm = 1.0f;
};

// Evaluation event (consecutive counting, phase entry).
WeightScheduler scheduler_update(const WeightScheduler& s, double bitacc,
                                 const JointTrainConfig& cfg);
// Per-step ramp advance; no-op outside the ramping state.
WeightScheduler scheduler_tick(const WeightScheduler& s, const JointTrainConfig& cfg);

// Eq.-level losses (means over all entries).
double watermark_loss(const Tensor& pred_wm, const Tensor& pred_clean);
double style_loss(const Tensor& pred_wm, const Tensor& eps);
double total_loss(double l_style, double l_wm, float lambda_style, float lambda_wm);

struct StepRecord {
    int step = 0;
    double l_wm = 0, l_style = 0;
    float lambda_style = 0;
    double probe_bitacc = -1;  // -1 when this step carried no probe
};

// One optimization step over a batch: watermarked latent via the frozen
// codec, modulation via the mapper, shared noise and timestep for the adapted
// and frozen predictions, gradients into {A, B, mapper} only.
StepRecord train_step(const Tensor& images, const std::vector<int>& styles,
                      const diffusion::DenoiserModel& model, const wm::WatermarkCodec& codec,
                      const diffusion::LatentAutoencoder& ae,
                      const diffusion::NoiseSchedule& schedule, lora::LoraAdapter& adapter,
                      nn::AdamW& opt, const wm::BitMessage& m, float lambda_style,
                      float lambda_wm, double cond_dropout, Rng& noise_rng);

struct JointTrainResult {
    std::vector<StepRecord> log;
    std::vector<double> epoch_style_eval;  // fixed-batch style loss per epoch
    WeightScheduler scheduler;
    int steps_to_threshold = -1;  // first probe step with bitacc >= tau
    int total_steps = 0;
};

// Everything needed to resume a run bit-exactly: scheduler, counters, rng
// stream states and optimizer moments. Saved alongside the per-epoch adapter
// checkpoint.
struct JointTrainState {
    WeightScheduler scheduler;
    int next_epoch = 0;
    int step = 0;
    int steps_to_threshold = -1;
    std::vector<uint64_t> order_state, msg_state, noise_state, probe_state;
    nn::AdamW::State opt;
};

void save_train_state(const JointTrainState& state, const std::string& path);
JointTrainState load_train_state(const std::string& path);

// The full stage-2 loop: fresh random message per step, probes every
// eval_interval steps through the sampling path, scheduler-driven weighting,
// per-epoch checkpointing when configured. Pass `resume` to continue a
// checkpointed run.
JointTrainResult train_authenlora(const JointTrainConfig& cfg, const diffusion::Dataset& dataset,
                                  const diffusion::DenoiserModel& model,
                                  const wm::WatermarkCodec& codec,
                                  const diffusion::LatentAutoencoder& ae,
                                  const diffusion::NoiseSchedule& schedule,
                                  lora::LoraAdapter& adapter, Rng& rng,
                                  const JointTrainState* resume = nullptr);

// Probe: sample n images through the merged model and average the decoded
// bit accuracy against the probe message.
double probe_bitacc(const diffusion::DenoiserModel& model, const diffusion::LatentAutoencoder& ae,
                    const diffusion::NoiseSchedule& schedule, const lora::LoraAdapter& adapter,
                    const wm::WatermarkCodec& codec, const wm::BitMessage& m,
                    const diffusion::SamplerSpec& spec, int n, Rng& rng);

}  // namespace latentmark::train
