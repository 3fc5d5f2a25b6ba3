#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "latentmark/diffusion/sampler.hpp"
#include "latentmark/eval/detection.hpp"
#include "latentmark/eval/distortion.hpp"
#include "latentmark/lora/attacks.hpp"
#include "latentmark/wm/codec.hpp"

namespace latentmark::eval {

struct RobustnessRow {
    std::string condition;
    std::string params;
    int n = 0;
    double bitacc = 0;
    double tpr = 0;
    double psnr = -1;  // < 0 when not applicable
    double ssim = -1;
};

struct RobustnessReport {
    int k = 0;
    int threshold_bits = 0;
    double target_fpr = 0;
    std::vector<RobustnessRow> rows;
    // paper convention: averages over the attack rows, excluding the clean row
    double avg_bitacc = 0;
    double avg_tpr = 0;

    void finalize(const std::string& clean_condition = "identity");
    std::string to_csv() const;
    nlohmann::json to_json() const;
};

// Generates n images through the merged adapter, then applies each distortion
// (clean row included via the identity spec), decodes and scores.
RobustnessReport robustness_suite(const diffusion::DenoiserModel& model,
                                  const diffusion::LatentAutoencoder& ae,
                                  const diffusion::NoiseSchedule& schedule,
                                  const lora::LoraAdapter& adapter, const wm::BitMessage& m,
                                  const wm::WatermarkCodec& codec, const DetectionPolicy& policy,
                                  const std::vector<DistortionSpec>& distortions, int n,
                                  const diffusion::SamplerSpec& spec, uint64_t seed);

// Model-level attack sweeps. Each grid point regenerates a probe batch from
// identical sampler noise so points are comparable; the pruning sweep also
// reports PSNR of attacked outputs against the unpruned outputs.
RobustnessReport pruning_sweep(const diffusion::DenoiserModel& model,
                               const diffusion::LatentAutoencoder& ae,
                               const diffusion::NoiseSchedule& schedule,
                               const lora::LoraAdapter& adapter, const wm::BitMessage& m,
                               const wm::WatermarkCodec& codec, const DetectionPolicy& policy,
                               const std::vector<double>& ratios, int n,
                               const diffusion::SamplerSpec& spec, uint64_t seed);

RobustnessReport quantization_sweep(const diffusion::DenoiserModel& model,
                                    const diffusion::LatentAutoencoder& ae,
                                    const diffusion::NoiseSchedule& schedule,
                                    const lora::LoraAdapter& adapter, const wm::BitMessage& m,
                                    const wm::WatermarkCodec& codec,
                                    const DetectionPolicy& policy,
                                    const std::vector<lora::QuantSpec>& formats, int n,
                                    const diffusion::SamplerSpec& spec, uint64_t seed);

// Merges the watermarked adapter with `count` random adapters (unit mix
// weight, gaussian init of the given scale) and scores the result after each
// addition.
RobustnessReport merging_sweep(const diffusion::DenoiserModel& model,
                               const diffusion::LatentAutoencoder& ae,
                               const diffusion::NoiseSchedule& schedule,
                               const lora::LoraAdapter& adapter, const wm::BitMessage& m,
                               const wm::WatermarkCodec& codec, const DetectionPolicy& policy,
                               int count, float init_scale, int n,
                               const diffusion::SamplerSpec& spec, uint64_t seed);

// Decodes both corpora and tallies the zero-message classification rule
// (watermarked = positive class).
ClassificationReport classification_experiment(const wm::WatermarkCodec& codec,
                                               const std::vector<Tensor>& watermarked,
                                               const std::vector<Tensor>& clean);

}  // namespace latentmark::eval
