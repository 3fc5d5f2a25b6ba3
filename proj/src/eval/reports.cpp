#include "latentmark/eval/reports.hpp"

#include <cmath>
#include <sstream>

#include "latentmark/eval/metrics.hpp"

namespace latentmark::eval {

void RobustnessReport::finalize(const std::string& clean_condition) {
    double bit = 0, tpr_sum = 0;
    int count = 0;
    for (const auto& row : rows) {
        if (row.condition == clean_condition) continue;
        bit += row.bitacc;
        tpr_sum += row.tpr;
        ++count;
    }
    avg_bitacc = count ? bit / count : 0.0;
    avg_tpr = count ? tpr_sum / count : 0.0;
}

std::string RobustnessReport::to_csv() const {
    std::ostringstream os;
    os << "condition_id,params,n,bitacc,tpr,psnr,ssim\n";
    auto cell = [](double v) { return v < 0 ? std::string("") : std::to_string(v); };
    for (const auto& row : rows)
        os << row.condition << "," << row.params << "," << row.n << "," << row.bitacc << ","
           << row.tpr << "," << cell(row.psnr) << "," << cell(row.ssim) << "\n";
    os << "avg,,," << avg_bitacc << "," << avg_tpr << ",,\n";
    return os.str();
}

nlohmann::json RobustnessReport::to_json() const {
    nlohmann::json rows_json = nlohmann::json::array();
    for (const auto& row : rows) {
        nlohmann::json j = {{"condition", row.condition},
                            {"params", row.params},
                            {"n", row.n},
                            {"bitacc", row.bitacc},
                            {"tpr", row.tpr}};
        if (row.psnr >= 0) j["psnr"] = row.psnr;
        if (row.ssim >= 0) j["ssim"] = row.ssim;
        rows_json.push_back(j);
    }
    return {{"k", k},
            {"threshold_bits", threshold_bits},
            {"target_fpr", target_fpr},
            {"rows", rows_json},
            {"avg_bitacc", avg_bitacc},
            {"avg_tpr", avg_tpr}};
}

namespace {

struct Scored {
    double bitacc = 0;
    double tpr = 0;
};

Scored score_images(const std::vector<Tensor>& images, const wm::BitMessage& m,
                    const wm::WatermarkCodec& codec, const DetectionPolicy& policy) {
    Scored s;
    for (const auto& img : images) {
        const wm::BitMessage decoded = codec.decode_bits(img);
        s.bitacc += bit_accuracy(m, decoded);
        s.tpr += detect(decoded, m, policy) ? 1.0 : 0.0;
    }
    if (!images.empty()) {
        s.bitacc /= double(images.size());
        s.tpr /= double(images.size());
    }
    return s;
}

std::vector<Tensor> probe_images(const diffusion::DenoiserModel& model,
                                 const diffusion::LatentAutoencoder& ae,
                                 const diffusion::NoiseSchedule& schedule,
                                 const std::map<std::string, Tensor>& merged, int n,
                                 const diffusion::SamplerSpec& spec, uint64_t seed,
                                 const diffusion::DenoiserModel* cond_source = nullptr) {
    const int styles = (cond_source ? cond_source : &model)->n_styles();
    std::vector<Tensor> all;
    all.reserve(size_t(n));
    Rng rng(seed);
    for (int style = 0; int(all.size()) < n; style = (style + 1) % styles) {
        const int batch = std::min(n - int(all.size()), 8);
        auto imgs = diffusion::sample_images(model, ae, schedule, &merged, style, spec, batch, rng);
        for (auto& img : imgs) all.push_back(std::move(img));
    }
    return all;
}

}  // namespace

RobustnessReport robustness_suite(const diffusion::DenoiserModel& model,
                                  const diffusion::LatentAutoencoder& ae,
                                  const diffusion::NoiseSchedule& schedule,
                                  const lora::LoraAdapter& adapter, const wm::BitMessage& m,
                                  const wm::WatermarkCodec& codec, const DetectionPolicy& policy,
                                  const std::vector<DistortionSpec>& distortions, int n,
                                  const diffusion::SamplerSpec& spec, uint64_t seed) {
    RobustnessReport report;
    report.k = policy.k;
    report.threshold_bits = policy.threshold_bits;
    report.target_fpr = policy.target_fpr;

    const auto merged = lora::merge_into_base(model.adaptable_weights(), adapter, m, adapter.alpha);
    const auto images = probe_images(model, ae, schedule, merged, n, spec, seed);

    // clean row first
    {
        Scored s = score_images(images, m, codec, policy);
        report.rows.push_back({"identity", "", n, s.bitacc, s.tpr, -1, -1});
    }
    for (const auto& base_spec : distortions) {
        if (base_spec.kind == DistortionSpec::Kind::identity) continue;
        std::vector<Tensor> attacked;
        attacked.reserve(images.size());
        double psnr_sum = 0, ssim_sum = 0;
        for (size_t i = 0; i < images.size(); ++i) {
            DistortionSpec per = base_spec;
            per.seed = seed ^ (0x9e3779b97f4a7c15ull * (i + 1));
            Tensor out = apply_distortion(images[i], per);
            psnr_sum += psnr(images[i], out);
            ssim_sum += ssim(images[i], out);
            attacked.push_back(std::move(out));
        }
        Scored s = score_images(attacked, m, codec, policy);
        report.rows.push_back({base_spec.id(), base_spec.id(), n, s.bitacc, s.tpr,
                               psnr_sum / double(images.size()),
                               ssim_sum / double(images.size())});
    }
    report.finalize();
    return report;
}

RobustnessReport pruning_sweep(const diffusion::DenoiserModel& model,
                               const diffusion::LatentAutoencoder& ae,
                               const diffusion::NoiseSchedule& schedule,
                               const lora::LoraAdapter& adapter, const wm::BitMessage& m,
                               const wm::WatermarkCodec& codec, const DetectionPolicy& policy,
                               const std::vector<double>& ratios, int n,
                               const diffusion::SamplerSpec& spec, uint64_t seed) {
    RobustnessReport report;
    report.k = policy.k;
    report.threshold_bits = policy.threshold_bits;
    report.target_fpr = policy.target_fpr;
    const auto base_merged =
        lora::merge_into_base(model.adaptable_weights(), adapter, m, adapter.alpha);
    const auto baseline = probe_images(model, ae, schedule, base_merged, n, spec, seed);

    for (double ratio : ratios) {
        lora::LoraAdapter pruned = lora::magnitude_prune(adapter, {ratio});
        const auto merged =
            lora::merge_into_base(model.adaptable_weights(), pruned, m, pruned.alpha);
        const auto images = probe_images(model, ae, schedule, merged, n, spec, seed);
        Scored s = score_images(images, m, codec, policy);
        double psnr_sum = 0;
        for (size_t i = 0; i < images.size(); ++i) psnr_sum += psnr(baseline[i], images[i]);
        char cond[32];
        std::snprintf(cond, sizeof(cond), "prune:%.2f", ratio);
        report.rows.push_back(
            {cond, cond, n, s.bitacc, s.tpr, psnr_sum / double(images.size()), -1});
    }
    report.finalize("prune:0.00");
    return report;
}

RobustnessReport quantization_sweep(const diffusion::DenoiserModel& model,
                                    const diffusion::LatentAutoencoder& ae,
                                    const diffusion::NoiseSchedule& schedule,
                                    const lora::LoraAdapter& adapter, const wm::BitMessage& m,
                                    const wm::WatermarkCodec& codec,
                                    const DetectionPolicy& policy,
                                    const std::vector<lora::QuantSpec>& formats, int n,
                                    const diffusion::SamplerSpec& spec, uint64_t seed) {
    RobustnessReport report;
    report.k = policy.k;
    report.threshold_bits = policy.threshold_bits;
    report.target_fpr = policy.target_fpr;

    // baseline row
    {
        const auto merged =
            lora::merge_into_base(model.adaptable_weights(), adapter, m, adapter.alpha);
        Scored s = score_images(probe_images(model, ae, schedule, merged, n, spec, seed), m,
                                codec, policy);
        report.rows.push_back({"baseline", "f32", n, s.bitacc, s.tpr, -1, -1});
    }
    for (const auto& fmt : formats) {
        lora::LoraAdapter q = lora::quantize(adapter, fmt);
        const auto merged = lora::merge_into_base(model.adaptable_weights(), q, m, q.alpha);
        Scored s = score_images(probe_images(model, ae, schedule, merged, n, spec, seed), m,
                                codec, policy);
        report.rows.push_back({"quant:" + fmt.name(), fmt.name(), n, s.bitacc, s.tpr, -1, -1});
    }
    report.finalize("baseline");
    return report;
}

RobustnessReport merging_sweep(const diffusion::DenoiserModel& model,
                               const diffusion::LatentAutoencoder& ae,
                               const diffusion::NoiseSchedule& schedule,
                               const lora::LoraAdapter& adapter, const wm::BitMessage& m,
                               const wm::WatermarkCodec& codec, const DetectionPolicy& policy,
                               int count, float init_scale, int n,
                               const diffusion::SamplerSpec& spec, uint64_t seed) {
    RobustnessReport report;
    report.k = policy.k;
    report.threshold_bits = policy.threshold_bits;
    report.target_fpr = policy.target_fpr;

    // random adapters over the same inventory/scope, gaussian A and B
    std::vector<lora::LoraAdapter> randoms;
    Rng rng(seed ^ 0xabcdef12345ull);
    for (int i = 0; i < count; ++i) {
        lora::LoraAdapter r = lora::make_adapter(model.inventory(), adapter.scope, adapter.rank,
                                                 adapter.k, 1.0f, seed + 1000 + uint64_t(i),
                                                 /*with_mapper=*/false, init_scale);
        for (auto& [id, layer] : r.layers)
            for (int64_t j = 0; j < layer.B->val.numel(); ++j)
                layer.B->val[j] = float(rng.gaussian()) * init_scale;
        randoms.push_back(std::move(r));
    }

    for (int used = 0; used <= count; ++used) {
        std::vector<lora::WeightedAdapter> mix;
        mix.push_back({&adapter, 1.0f, m});
        for (int i = 0; i < used; ++i) mix.push_back({&randoms[size_t(i)], 1.0f, std::nullopt});
        const auto merged = lora::merge_adapters(model.adaptable_weights(), mix);
        Scored s = score_images(probe_images(model, ae, schedule, merged, n, spec, seed), m,
                                codec, policy);
        char cond[32];
        std::snprintf(cond, sizeof(cond), "merge:%d", used);
        report.rows.push_back({cond, cond, n, s.bitacc, s.tpr, -1, -1});
    }
    report.finalize("merge:0");
    return report;
}

ClassificationReport classification_experiment(const wm::WatermarkCodec& codec,
                                               const std::vector<Tensor>& watermarked,
                                               const std::vector<Tensor>& clean) {
    if (watermarked.empty() || clean.empty())
        throw std::invalid_argument("classification_experiment: both corpora must be non-empty");
    long tp = 0, fn = 0, fp = 0, tn = 0;
    for (const auto& img : watermarked) {
        if (classify_clean(codec.decode_bits(img)) == Provenance::watermarked) ++tp;
        else ++fn;
    }
    for (const auto& img : clean) {
        if (classify_clean(codec.decode_bits(img)) == Provenance::watermarked) ++fp;
        else ++tn;
    }
    return ClassificationReport::from_counts(tp, tn, fp, fn);
}

}  // namespace latentmark::eval
