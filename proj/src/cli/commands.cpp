#include "latentmark/cli/commands.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "latentmark/diffusion/dataset.hpp"
#include "latentmark/diffusion/sampler.hpp"
#include "latentmark/eval/reports.hpp"
#include "latentmark/io/container.hpp"
#include "latentmark/io/image_io.hpp"
#include "latentmark/lora/serialize.hpp"
#include "latentmark/train/joint.hpp"
#include "latentmark/wm/pretrain.hpp"

namespace latentmark::cli {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& RunConfig::allowed_keys() {
    static const std::vector<std::string> keys = {
        "data.train_count", "data.holdout_count", "data.styles", "data.seed", "data.dir",
        "data.index",
        "autoencoder.epochs", "autoencoder.batch", "autoencoder.lr",
        "autoencoder.weight_decay", "autoencoder.seed",
        "base_model.epochs", "base_model.batch", "base_model.lr", "base_model.weight_decay",
        "base_model.cond_dropout", "base_model.seed", "base_model.timesteps",
        "base_model.beta_start", "base_model.beta_end",
        "codec.k", "codec.lambda_lpips", "codec.mu_prvl", "codec.nu_prts", "codec.p_zero",
        "codec.lr", "codec.weight_decay", "codec.epochs", "codec.prts_activation_epoch",
        "codec.batch", "codec.hue_low", "codec.hue_high", "codec.hue_softness",
        "codec.distortions", "codec.seed",
        "adapter.rank", "adapter.alpha", "adapter.scope", "adapter.seed",
        "training.lambda_wm", "training.bitacc_threshold", "training.consecutive_required",
        "training.ramp_steps", "training.lr", "training.weight_decay", "training.epochs",
        "training.eval_interval", "training.batch", "training.probe_images",
        "training.probe_steps", "training.probe_guidance", "training.cond_dropout",
        "training.seed",
        "detection.target_fpr",
        "attacks.prune_ratios", "attacks.quant_formats", "attacks.merge_count",
        "attacks.merge_init_scale", "attacks.distortions", "attacks.images", "attacks.seed",
        "output.root",
    };
    return keys;
}

RunConfig RunConfig::defaults() {
    RunConfig cfg;
    auto& d = cfg.doc;
    d.set_int("data.train_count", 2000);
    d.set_int("data.holdout_count", 600);
    d.set_int("data.styles", 4);
    d.set_int("data.seed", 77);
    d.set_string("data.dir", "");
    d.set_string("data.index", "");
    d.set_int("autoencoder.epochs", 12);
    d.set_int("autoencoder.batch", 32);
    d.set_double("autoencoder.lr", 2e-3);
    d.set_double("autoencoder.weight_decay", 1e-5);
    d.set_int("autoencoder.seed", 101);
    d.set_int("base_model.epochs", 14);
    d.set_int("base_model.batch", 32);
    d.set_double("base_model.lr", 8e-4);
    d.set_double("base_model.weight_decay", 1e-5);
    d.set_double("base_model.cond_dropout", 0.1);
    d.set_int("base_model.seed", 202);
    d.set_int("base_model.timesteps", 1000);
    d.set_double("base_model.beta_start", 1e-4);
    d.set_double("base_model.beta_end", 0.02);
    d.set_int("codec.k", 48);
    d.set_double("codec.lambda_lpips", 5.0);
    d.set_double("codec.mu_prvl", 0.5);
    d.set_double("codec.nu_prts", 0.1);
    d.set_double("codec.p_zero", 0.2);
    d.set_double("codec.lr", 1e-3);
    d.set_double("codec.weight_decay", 1e-4);
    d.set_int("codec.epochs", 50);
    d.set_int("codec.prts_activation_epoch", 40);
    d.set_int("codec.batch", 32);
    d.set_double("codec.hue_low", 0.70);
    d.set_double("codec.hue_high", 0.95);
    d.set_double("codec.hue_softness", 50.0);
    d.set_int("codec.seed", 303);
    d.set_int("adapter.rank", 32);
    d.set_double("adapter.alpha", 1.0);
    d.set_string("adapter.scope", "transformer_resnet");
    d.set_int("adapter.seed", 404);
    d.set_double("training.lambda_wm", 1.0);
    d.set_double("training.bitacc_threshold", 0.75);
    d.set_int("training.consecutive_required", 3);
    d.set_int("training.ramp_steps", 500);
    d.set_double("training.lr", 1e-4);
    d.set_double("training.weight_decay", 1e-4);
    d.set_int("training.epochs", 10);
    d.set_int("training.eval_interval", 100);
    d.set_int("training.batch", 16);
    d.set_int("training.probe_images", 16);
    d.set_int("training.probe_steps", 20);
    d.set_double("training.probe_guidance", 3.0);
    d.set_double("training.cond_dropout", 0.1);
    d.set_int("training.seed", 505);
    d.set_double("detection.target_fpr", 1e-6);
    d.set_int("attacks.merge_count", 5);
    d.set_double("attacks.merge_init_scale", 1e-3);
    d.set_int("attacks.images", 100);
    d.set_int("attacks.seed", 606);
    d.set_string("output.root", "out");
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    io::ConfigDoc file = io::ConfigDoc::parse_file(path);
    file.require_known_keys(allowed_keys());
    RunConfig merged = defaults();
    merged.doc.merge_over(file);
    // resolve relative paths against the config file location
    const fs::path base = fs::absolute(fs::path(path)).parent_path();
    for (const char* key : {"data.dir", "data.index", "output.root"}) {
        const std::string v = merged.doc.get_string(key, "");
        if (!v.empty() && !fs::path(v).is_absolute())
            merged.doc.set_string(key, (base / v).string());
    }
    return merged;
}

std::string RunConfig::config_hash() const { return io::sha256_hex(resolved_text()); }

std::string RunConfig::output_root() const {
    if (const char* env = std::getenv("LATENTMARK_OUT"); env && *env) return env;
    return doc.get_string("output.root", "out");
}

RunPaths make_run_dir(const RunConfig& cfg, const std::string& command) {
    const auto now = std::chrono::system_clock::now();
    const auto t = std::chrono::system_clock::to_time_t(now);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", std::gmtime(&t));
    const std::string run_id =
        std::string(stamp) + "-" + command + "-" + cfg.config_hash().substr(0, 8);
    RunPaths p;
    p.run_dir = (fs::path(cfg.output_root()) / run_id).string();
    p.checkpoints = (fs::path(p.run_dir) / "checkpoints").string();
    p.images = (fs::path(p.run_dir) / "images").string();
    p.reports = (fs::path(p.run_dir) / "reports").string();
    for (const auto& dir : {p.run_dir, p.checkpoints, p.images, p.reports})
        fs::create_directories(dir);
    io::write_text_file((fs::path(p.run_dir) / "config.toml").string(), cfg.resolved_text());
    return p;
}

void write_manifest(const RunPaths& paths, const std::string& command, const RunConfig& cfg,
                    const std::vector<std::pair<std::string, std::string>>& artifacts,
                    double wall_seconds, const std::vector<uint64_t>& seeds) {
    json m;
    m["command"] = command;
    m["config_hash"] = cfg.config_hash();
    m["format_version"] = 1;
    m["wall_seconds"] = wall_seconds;
    m["seeds"] = seeds;
    json arts = json::object();
    for (const auto& [name, path] : artifacts)
        arts[name] = {{"path", path}, {"sha256", io::sha256_hex(io::read_file(path))}};
    m["artifacts"] = arts;
    io::write_text_file((fs::path(paths.run_dir) / "manifest.json").string(), m.dump(2));
}

namespace {

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

diffusion::Dataset load_or_synthesize(const RunConfig& cfg) {
    const std::string dir = cfg.doc.get_string("data.dir", "");
    if (!dir.empty())
        return diffusion::load_image_directory(dir, cfg.doc.get_string("data.index", ""));
    const int total = int(cfg.doc.get_int("data.train_count", 2000) +
                          cfg.doc.get_int("data.holdout_count", 600));
    return diffusion::synthesize_toy_dataset(total, int(cfg.doc.get_int("data.styles", 4)),
                                             uint64_t(cfg.doc.get_int("data.seed", 77)));
}

void split_dataset(const RunConfig& cfg, const diffusion::Dataset& ds,
                   diffusion::Dataset& train, diffusion::Dataset& holdout) {
    const size_t train_n = size_t(cfg.doc.get_int("data.train_count", 2000));
    if (ds.images.size() <= train_n)
        throw std::runtime_error("dataset too small for the configured train/holdout split");
    train.n_styles = holdout.n_styles = ds.n_styles;
    for (size_t i = 0; i < ds.images.size(); ++i) {
        auto& out = i < train_n ? train : holdout;
        out.images.push_back(ds.images[i]);
        out.styles.push_back(ds.styles[i]);
    }
}

diffusion::LatentAutoencoder obtain_autoencoder(const RunConfig& cfg,
                                                const std::string& autoencoder_in,
                                                const diffusion::Dataset& train,
                                                const diffusion::Dataset& holdout,
                                                const RunPaths& paths,
                                                std::vector<std::pair<std::string, std::string>>& artifacts) {
    if (!autoencoder_in.empty()) {
        std::cout << "loading autoencoder from " << autoencoder_in << "\n";
        return diffusion::LatentAutoencoder::load(autoencoder_in);
    }
    std::cout << "training autoencoder on demand (" << train.images.size() << " images)\n";
    diffusion::LatentAutoencoder ae(uint64_t(cfg.doc.get_int("autoencoder.seed", 101)));
    diffusion::AutoencoderTrainConfig acfg;
    acfg.epochs = int(cfg.doc.get_int("autoencoder.epochs", 12));
    acfg.batch_size = int(cfg.doc.get_int("autoencoder.batch", 32));
    acfg.learning_rate = float(cfg.doc.get_double("autoencoder.lr", 2e-3));
    acfg.weight_decay = float(cfg.doc.get_double("autoencoder.weight_decay", 1e-5));
    Rng rng(uint64_t(cfg.doc.get_int("autoencoder.seed", 101)));
    auto psnrs = ae.train(train.images, holdout.images, acfg, rng);
    ae.freeze();
    if (!psnrs.empty()) std::cout << "autoencoder held-out psnr: " << psnrs.back() << " dB\n";
    const std::string path = (fs::path(paths.checkpoints) / "autoencoder.lmtc").string();
    ae.save(path);
    artifacts.push_back({"autoencoder", path});
    return ae;
}

wm::PretrainConfig codec_config(const RunConfig& cfg) {
    wm::PretrainConfig pc;
    pc.k = int(cfg.doc.get_int("codec.k", 48));
    pc.lambda_lpips = cfg.doc.get_double("codec.lambda_lpips", 5.0);
    pc.mu_prvl = cfg.doc.get_double("codec.mu_prvl", 0.5);
    pc.nu_prts = cfg.doc.get_double("codec.nu_prts", 0.1);
    pc.p_zero = cfg.doc.get_double("codec.p_zero", 0.2);
    pc.learning_rate = float(cfg.doc.get_double("codec.lr", 1e-3));
    pc.weight_decay = float(cfg.doc.get_double("codec.weight_decay", 1e-4));
    pc.epochs = int(cfg.doc.get_int("codec.epochs", 50));
    pc.prts_activation_epoch = int(cfg.doc.get_int("codec.prts_activation_epoch", 40));
    pc.batch_size = int(cfg.doc.get_int("codec.batch", 32));
    pc.band = wm::HueBand(cfg.doc.get_double("codec.hue_low", 0.70),
                          cfg.doc.get_double("codec.hue_high", 0.95),
                          cfg.doc.get_double("codec.hue_softness", 50.0));
    for (const auto& text : cfg.doc.get_string_array(
             "codec.distortions", {"identity", "blur:1.0", "jpeg:80", "noise:0.02"}))
        pc.distortion_menu.push_back(eval::DistortionSpec::parse(text));
    return pc;
}

diffusion::NoiseSchedule schedule_from(const RunConfig& cfg) {
    return diffusion::make_schedule(int(cfg.doc.get_int("base_model.timesteps", 1000)),
                                    cfg.doc.get_double("base_model.beta_start", 1e-4),
                                    cfg.doc.get_double("base_model.beta_end", 0.02));
}

train::JointTrainConfig joint_config(const RunConfig& cfg) {
    train::JointTrainConfig jc;
    jc.lambda_wm = float(cfg.doc.get_double("training.lambda_wm", 1.0));
    jc.bitacc_threshold = cfg.doc.get_double("training.bitacc_threshold", 0.75);
    jc.consecutive_required = int(cfg.doc.get_int("training.consecutive_required", 3));
    jc.ramp_steps = int(cfg.doc.get_int("training.ramp_steps", 500));
    jc.learning_rate = float(cfg.doc.get_double("training.lr", 1e-4));
    jc.weight_decay = float(cfg.doc.get_double("training.weight_decay", 1e-4));
    jc.epochs = int(cfg.doc.get_int("training.epochs", 10));
    jc.eval_interval = int(cfg.doc.get_int("training.eval_interval", 100));
    jc.batch_size = int(cfg.doc.get_int("training.batch", 16));
    jc.probe_images = int(cfg.doc.get_int("training.probe_images", 16));
    jc.probe_spec.kind = diffusion::SamplerSpec::Kind::ddim;
    jc.probe_spec.steps = int(cfg.doc.get_int("training.probe_steps", 20));
    jc.probe_spec.guidance = float(cfg.doc.get_double("training.probe_guidance", 3.0));
    jc.cond_dropout = cfg.doc.get_double("training.cond_dropout", 0.1);
    return jc;
}

}  // namespace

int cmd_synthesize_dataset(const RunConfig& cfg, const std::string& out_dir, int count,
                           int styles, uint64_t seed) {
    Timer timer;
    RunPaths paths = make_run_dir(cfg, "synthesize-dataset");
    const std::string dir = out_dir.empty() ? paths.images : out_dir;
    diffusion::Dataset ds = diffusion::synthesize_toy_dataset(count, styles, seed);
    diffusion::save_dataset_pngs(ds, dir);
    std::cout << "wrote " << ds.images.size() << " images to " << dir << "\n";
    write_manifest(paths, "synthesize-dataset", cfg, {}, timer.seconds(), {seed});
    return 0;
}

int cmd_train_base(const RunConfig& cfg, const std::string& autoencoder_in) {
    Timer timer;
    RunPaths paths = make_run_dir(cfg, "train-base");
    std::vector<std::pair<std::string, std::string>> artifacts;

    diffusion::Dataset all = load_or_synthesize(cfg), train, holdout;
    split_dataset(cfg, all, train, holdout);
    diffusion::LatentAutoencoder ae =
        obtain_autoencoder(cfg, autoencoder_in, train, holdout, paths, artifacts);

    diffusion::NoiseSchedule schedule = schedule_from(cfg);
    diffusion::DenoiserModel model(train.n_styles, uint64_t(cfg.doc.get_int("base_model.seed", 202)));
    diffusion::DenoiserTrainConfig dcfg;
    dcfg.epochs = int(cfg.doc.get_int("base_model.epochs", 14));
    dcfg.batch_size = int(cfg.doc.get_int("base_model.batch", 32));
    dcfg.learning_rate = float(cfg.doc.get_double("base_model.lr", 8e-4));
    dcfg.weight_decay = float(cfg.doc.get_double("base_model.weight_decay", 1e-5));
    dcfg.cond_dropout = cfg.doc.get_double("base_model.cond_dropout", 0.1);

    std::vector<Tensor> latents;
    latents.reserve(train.images.size());
    for (const auto& img : train.images)
        latents.push_back(
            diffusion::encode_scaled(ae, img.reshaped({1, 3, 32, 32})).reshaped({4, 8, 8}));
    // train_base consumes [4,8,8] latents batched internally
    std::vector<Tensor> latents4;
    latents4.reserve(latents.size());
    for (auto& z : latents) latents4.push_back(z.reshaped({4, 8, 8}));

    Rng rng(uint64_t(cfg.doc.get_int("base_model.seed", 202)));
    auto losses = model.train_base(latents4, train.styles, schedule, dcfg, rng);
    model.freeze();
    std::cout << "base model trained; final epoch loss " << (losses.empty() ? 0.0 : losses.back())
              << "\n";
    const std::string path = (fs::path(paths.checkpoints) / "denoiser.lmtc").string();
    model.save(path);
    artifacts.push_back({"denoiser", path});
    write_manifest(paths, "train-base", cfg, artifacts, timer.seconds(),
                   {uint64_t(cfg.doc.get_int("base_model.seed", 202))});
    std::cout << "run dir: " << paths.run_dir << "\n";
    return 0;
}

int cmd_pretrain_codec(const RunConfig& cfg, const std::string& autoencoder_in,
                       int epochs_override) {
    Timer timer;
    RunPaths paths = make_run_dir(cfg, "pretrain-codec");
    std::vector<std::pair<std::string, std::string>> artifacts;

    diffusion::Dataset all = load_or_synthesize(cfg), train, holdout;
    split_dataset(cfg, all, train, holdout);
    diffusion::LatentAutoencoder ae =
        obtain_autoencoder(cfg, autoencoder_in, train, holdout, paths, artifacts);

    wm::PretrainConfig pc = codec_config(cfg);
    if (epochs_override >= 0) {
        pc.epochs = epochs_override;
        pc.prts_activation_epoch = std::min(pc.prts_activation_epoch, pc.epochs);
    }
    wm::WatermarkCodec codec(pc.k, pc.band, uint64_t(cfg.doc.get_int("codec.seed", 303)));
    Rng rng(uint64_t(cfg.doc.get_int("codec.seed", 303)));
    auto log = wm::pretrain_codec(codec, pc, train.images, holdout.images, ae, rng);
    codec.freeze();

    // metrics log: one structured record per epoch
    std::string metrics = "epoch\tl_msg\tl_perceptual\tl_prvl\tl_prts\theldout_bitacc\tclean_zero_rate\n";
    for (const auto& rec : log) {
        char line[256];
        std::snprintf(line, sizeof(line), "%d\t%.6f\t%.6f\t%.6f\t%.6f\t%.4f\t%.4f\n", rec.epoch,
                      rec.l_msg, rec.l_perceptual, rec.l_prvl, rec.l_prts, rec.heldout_bitacc,
                      rec.clean_zero_rate);
        metrics += line;
    }
    const std::string log_path = (fs::path(paths.reports) / "pretrain_metrics.tsv").string();
    io::write_text_file(log_path, metrics);
    const std::string codec_path = (fs::path(paths.checkpoints) / "codec.lmtc").string();
    codec.save(codec_path);
    artifacts.push_back({"codec", codec_path});
    artifacts.push_back({"metrics", log_path});
    if (!log.empty())
        std::cout << "final heldout bitacc " << log.back().heldout_bitacc << ", clean zero rate "
                  << log.back().clean_zero_rate << "\n";
    write_manifest(paths, "pretrain-codec", cfg, artifacts, timer.seconds(),
                   {uint64_t(cfg.doc.get_int("codec.seed", 303))});
    std::cout << "run dir: " << paths.run_dir << "\n";
    return 0;
}

int cmd_train_adapter(const RunConfig& cfg, const std::string& codec_path,
                      const std::string& base_path, const std::string& autoencoder_path,
                      const std::string& scope_override, int rank_override,
                      const std::string& resume_dir) {
    Timer timer;
    RunPaths paths = make_run_dir(cfg, "train-adapter");
    std::vector<std::pair<std::string, std::string>> artifacts;

    wm::WatermarkCodec codec = wm::WatermarkCodec::load(codec_path);
    diffusion::LatentAutoencoder ae = diffusion::LatentAutoencoder::load(autoencoder_path);
    diffusion::DenoiserModel model = diffusion::DenoiserModel::load(base_path);
    diffusion::NoiseSchedule schedule = schedule_from(cfg);

    diffusion::Dataset all = load_or_synthesize(cfg), train, holdout;
    split_dataset(cfg, all, train, holdout);

    const lora::FineTuneScope scope = lora::scope_from_name(
        scope_override.empty() ? cfg.doc.get_string("adapter.scope", "transformer_resnet")
                               : scope_override);
    const int rank = rank_override > 0 ? rank_override : int(cfg.doc.get_int("adapter.rank", 32));
    train::JointTrainConfig jc = joint_config(cfg);
    jc.checkpoint_dir = paths.checkpoints;

    lora::LoraAdapter adapter;
    std::optional<train::JointTrainState> resume_state;
    if (!resume_dir.empty()) {
        // resume from the newest epoch checkpoint pair
        int best = -1;
        for (const auto& entry : fs::directory_iterator(resume_dir)) {
            const std::string name = entry.path().filename().string();
            if (name.rfind("state_epoch", 0) == 0) {
                const int e = std::stoi(name.substr(11, name.size() - 11 - 5));
                best = std::max(best, e);
            }
        }
        if (best < 0) throw std::runtime_error("no state checkpoints in " + resume_dir);
        adapter = lora::load_adapter(
            (fs::path(resume_dir) / ("adapter_epoch" + std::to_string(best) + ".lmtc")).string());
        for (auto& v : adapter.trainable_params()) v->needs_grad = true;
        resume_state = train::load_train_state(
            (fs::path(resume_dir) / ("state_epoch" + std::to_string(best) + ".lmtc")).string());
        std::cout << "resuming from epoch " << best << "\n";
    } else {
        adapter = lora::make_adapter(model.inventory(), scope, rank, codec.k(),
                                     float(cfg.doc.get_double("adapter.alpha", 1.0)),
                                     uint64_t(cfg.doc.get_int("adapter.seed", 404)));
    }

    Rng rng(uint64_t(cfg.doc.get_int("training.seed", 505)));
    train::JointTrainResult result =
        train_authenlora(jc, train, model, codec, ae, schedule, adapter, rng,
                         resume_state ? &*resume_state : nullptr);

    std::string log_text = "step\tl_wm\tl_style\tlambda_style\tprobe_bitacc\n";
    for (const auto& rec : result.log) {
        char line[192];
        std::snprintf(line, sizeof(line), "%d\t%.6f\t%.6f\t%.4f\t%.4f\n", rec.step, rec.l_wm,
                      rec.l_style, double(rec.lambda_style), rec.probe_bitacc);
        log_text += line;
    }
    const std::string log_path = (fs::path(paths.reports) / "train_log.tsv").string();
    io::write_text_file(log_path, log_text);

    const std::string adapter_path = (fs::path(paths.checkpoints) / "adapter.lmtc").string();
    adapter.freeze();
    lora::save_adapter(adapter, adapter_path);
    lora::save_adapter(adapter,
                       (fs::path(paths.checkpoints) / "adapter_fp16.lmtc").string(), true);
    artifacts.push_back({"adapter", adapter_path});
    artifacts.push_back({"train_log", log_path});
    write_manifest(paths, "train-adapter", cfg, artifacts, timer.seconds(),
                   {uint64_t(cfg.doc.get_int("training.seed", 505))});
    std::cout << "adapter parameters: " << adapter.adapter_param_count() << "\n";
    std::cout << "steps to bitacc threshold: " << result.steps_to_threshold << "\n";
    std::cout << "run dir: " << paths.run_dir << "\n";
    return 0;
}

int cmd_generate(const RunConfig& cfg, const GenerateOptions& opt) {
    Timer timer;
    RunPaths paths = make_run_dir(cfg, "generate");
    diffusion::LatentAutoencoder ae = diffusion::LatentAutoencoder::load(opt.autoencoder_path);
    diffusion::DenoiserModel model = diffusion::DenoiserModel::load(opt.base_path);
    lora::LoraAdapter adapter = lora::load_adapter(opt.adapter_path);
    diffusion::NoiseSchedule schedule = schedule_from(cfg);
    const wm::BitMessage m = wm::BitMessage::from_hex(opt.message_hex, adapter.k);

    diffusion::SamplerSpec spec;
    spec.kind = diffusion::sampler_kind_from_name(opt.sampler);
    spec.steps = opt.steps;
    spec.guidance = float(opt.guidance);
    spec.eta = float(opt.eta);

    const auto merged = lora::merge_into_base(model.adaptable_weights(), adapter, m, adapter.alpha);
    Rng rng(opt.seed);
    auto images = diffusion::sample_images(model, ae, schedule, &merged, opt.style, spec,
                                           opt.count, rng);
    json sidecar;
    sidecar["message"] = opt.message_hex;
    sidecar["k"] = adapter.k;
    sidecar["sampler"] = {{"kind", opt.sampler},
                          {"steps", opt.steps},
                          {"guidance", opt.guidance},
                          {"eta", opt.eta}};
    sidecar["seed"] = opt.seed;
    sidecar["style"] = opt.style;
    json files = json::array();
    for (size_t i = 0; i < images.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "gen_%04zu.png", i);
        const std::string path = (fs::path(paths.images) / name).string();
        io::write_png(path, images[i]);
        files.push_back({{"file", name}, {"index", i}});
    }
    sidecar["images"] = files;
    io::write_text_file((fs::path(paths.images) / "sidecar.json").string(), sidecar.dump(2));
    write_manifest(paths, "generate", cfg, {}, timer.seconds(), {opt.seed});
    std::cout << "wrote " << images.size() << " images to " << paths.images << "\n";
    return 0;
}

int cmd_verify(const RunConfig& cfg, const VerifyOptions& opt) {
    Timer timer;
    RunPaths paths = make_run_dir(cfg, "verify");
    wm::WatermarkCodec codec = wm::WatermarkCodec::load(opt.codec_path);
    eval::DetectionPolicy policy(codec.k(), opt.target_fpr);

    std::optional<wm::BitMessage> expected;
    if (!opt.expected_hex.empty())
        expected = wm::BitMessage::from_hex(opt.expected_hex, codec.k());

    std::vector<std::string> files;
    for (const auto& input : opt.inputs) {
        if (fs::is_directory(input)) {
            for (const auto& entry : fs::directory_iterator(input))
                if (entry.is_regular_file() && entry.path().extension() == ".png")
                    files.push_back(entry.path().string());
        } else {
            files.push_back(input);
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::runtime_error("verify: no input images");

    std::string csv = "file,decoded_hex,bitacc,detected,classification\n";
    double bit_sum = 0;
    int detected = 0, clean = 0;
    for (const auto& file : files) {
        Tensor img = io::read_png(file);
        const wm::BitMessage decoded = codec.decode_bits(img);
        const bool is_clean = eval::classify_clean(decoded) == eval::Provenance::clean;
        clean += is_clean;
        double acc = -1;
        bool det = false;
        if (expected) {
            acc = eval::bit_accuracy(*expected, decoded);
            det = eval::detect(decoded, *expected, policy);
            bit_sum += acc;
            detected += det;
        }
        csv += fs::path(file).filename().string() + "," + decoded.to_hex() + "," +
               (expected ? std::to_string(acc) : "") + "," + (det ? "1" : "0") + "," +
               (is_clean ? "clean" : "watermarked") + "\n";
    }
    io::write_text_file((fs::path(paths.reports) / "verify.csv").string(), csv);
    json summary;
    summary["n"] = files.size();
    summary["threshold_bits"] = policy.threshold_bits;
    summary["target_fpr"] = opt.target_fpr;
    summary["clean_fraction"] = double(clean) / double(files.size());
    if (expected) {
        summary["bitacc"] = bit_sum / double(files.size());
        summary["tpr"] = double(detected) / double(files.size());
    }
    io::write_text_file((fs::path(paths.reports) / "verify.json").string(), summary.dump(2));
    write_manifest(paths, "verify", cfg, {}, timer.seconds(), {});
    std::cout << summary.dump(2) << "\n";
    return 0;
}

int cmd_attack(const RunConfig& cfg, const AttackOptions& opt) {
    Timer timer;
    RunPaths paths = make_run_dir(cfg, "attack");
    std::vector<std::pair<std::string, std::string>> artifacts;
    json summary;

    // image-mode distortion
    if (!opt.distort_spec.empty()) {
        if (opt.images_dir.empty()) throw std::runtime_error("attack --distort needs --images");
        eval::DistortionSpec spec = eval::DistortionSpec::parse(opt.distort_spec);
        diffusion::Dataset ds = diffusion::load_image_directory(opt.images_dir);
        int i = 0;
        for (const auto& img : ds.images) {
            eval::DistortionSpec per = spec;
            per.seed = opt.seed ^ uint64_t(i + 1);
            char name[32];
            std::snprintf(name, sizeof(name), "att_%04d.png", i++);
            io::write_png((fs::path(paths.images) / name).string(),
                          eval::apply_distortion(img, per));
        }
        summary["distort"] = {{"spec", spec.id()}, {"n", ds.images.size()}};
        io::write_text_file((fs::path(paths.reports) / "attack.json").string(), summary.dump(2));
        write_manifest(paths, "attack", cfg, artifacts, timer.seconds(), {opt.seed});
        std::cout << "distorted " << ds.images.size() << " images -> " << paths.images << "\n";
        return 0;
    }

    lora::LoraAdapter adapter = lora::load_adapter(opt.adapter_path);

    // single-shot adapter attacks write an attacked adapter artifact
    if (opt.prune_ratio || !opt.quant_format.empty()) {
        lora::LoraAdapter attacked =
            opt.prune_ratio ? lora::magnitude_prune(adapter, {*opt.prune_ratio})
                            : lora::quantize(adapter, lora::QuantSpec::parse(opt.quant_format));
        const std::string out = (fs::path(paths.checkpoints) / "adapter_attacked.lmtc").string();
        lora::save_adapter(attacked, out);
        artifacts.push_back({"adapter_attacked", out});
        summary["attack"] = opt.prune_ratio
                                ? json{{"kind", "prune"}, {"ratio", *opt.prune_ratio}}
                                : json{{"kind", "quantize"}, {"format", opt.quant_format}};
        io::write_text_file((fs::path(paths.reports) / "attack.json").string(), summary.dump(2));
        write_manifest(paths, "attack", cfg, artifacts, timer.seconds(), {opt.seed});
        std::cout << "wrote attacked adapter: " << out << "\n";
        return 0;
    }

    // sweeps and merges need the full stack
    diffusion::LatentAutoencoder ae = diffusion::LatentAutoencoder::load(opt.autoencoder_path);
    diffusion::DenoiserModel model = diffusion::DenoiserModel::load(opt.base_path);
    wm::WatermarkCodec codec = wm::WatermarkCodec::load(opt.codec_path);
    diffusion::NoiseSchedule schedule = schedule_from(cfg);
    eval::DetectionPolicy policy(codec.k(), cfg.doc.get_double("detection.target_fpr", 1e-6));
    Rng mrng(opt.seed);
    const wm::BitMessage m = opt.message_hex.empty()
                                 ? wm::BitMessage::random(codec.k(), mrng)
                                 : wm::BitMessage::from_hex(opt.message_hex, codec.k());
    diffusion::SamplerSpec spec;
    spec.steps = int(cfg.doc.get_int("training.probe_steps", 20));
    spec.guidance = float(cfg.doc.get_double("training.probe_guidance", 3.0));

    if (!opt.merge_with.empty()) {
        std::vector<lora::LoraAdapter> extras;
        for (const auto& path : opt.merge_with) extras.push_back(lora::load_adapter(path));
        std::vector<lora::WeightedAdapter> mix;
        mix.push_back({&adapter, 1.0f, m});
        for (auto& e : extras)
            mix.push_back({&e, float(opt.merge_weight),
                           e.mapper ? std::optional<wm::BitMessage>(
                                          wm::BitMessage::random(e.k, mrng))
                                    : std::nullopt});
        auto merged = lora::merge_adapters(model.adaptable_weights(), mix);
        // merged model checkpoint is the attacked artifact
        diffusion::DenoiserModel attacked = diffusion::DenoiserModel::load(opt.base_path);
        for (auto& item : attacked.params().items) {
            auto it = merged.find(item.name);
            if (it != merged.end()) item.var->val = it->second;
        }
        const std::string out = (fs::path(paths.checkpoints) / "denoiser_merged.lmtc").string();
        attacked.save(out);
        artifacts.push_back({"denoiser_merged", out});
        summary["attack"] = {{"kind", "merge"},
                             {"count", opt.merge_with.size()},
                             {"weight", opt.merge_weight}};
    }

    if (!opt.sweep.empty()) {
        eval::RobustnessReport report;
        if (opt.sweep == "prune") {
            report = eval::pruning_sweep(model, ae, schedule, adapter, m, codec, policy,
                                         cfg.doc.get_double_array(
                                             "attacks.prune_ratios",
                                             {0.0, 0.1, 0.3, 0.5, 0.7, 0.9}),
                                         opt.probe_count, spec, opt.seed);
        } else if (opt.sweep == "quantize") {
            std::vector<lora::QuantSpec> formats;
            for (const auto& name : cfg.doc.get_string_array(
                     "attacks.quant_formats", {"fp8_e4m3", "bf16", "int8", "int4"}))
                formats.push_back(lora::QuantSpec::parse(name));
            report = eval::quantization_sweep(model, ae, schedule, adapter, m, codec, policy,
                                              formats, opt.probe_count, spec, opt.seed);
        } else if (opt.sweep == "merge") {
            report = eval::merging_sweep(model, ae, schedule, adapter, m, codec, policy,
                                         int(cfg.doc.get_int("attacks.merge_count", 5)),
                                         float(cfg.doc.get_double("attacks.merge_init_scale", 1e-3)),
                                         opt.probe_count, spec, opt.seed);
        } else if (opt.sweep == "distort") {
            std::vector<eval::DistortionSpec> specs;
            for (const auto& text : cfg.doc.get_string_array(
                     "attacks.distortions",
                     {"blur:1.0", "jitter:0.25", "crop:0.75", "jpeg:80", "noise:0.05",
                      "sharpen:2.0"}))
                specs.push_back(eval::DistortionSpec::parse(text));
            report = eval::robustness_suite(model, ae, schedule, adapter, m, codec, policy, specs,
                                            opt.probe_count, spec, opt.seed);
        } else {
            throw std::runtime_error("unknown sweep: " + opt.sweep);
        }
        const std::string csv_path = (fs::path(paths.reports) / (opt.sweep + "_sweep.csv")).string();
        io::write_text_file(csv_path, report.to_csv());
        summary["sweep"] = report.to_json();
        summary["message"] = m.to_hex();
        artifacts.push_back({"sweep_csv", csv_path});
        std::cout << report.to_csv();
    }

    io::write_text_file((fs::path(paths.reports) / "attack.json").string(), summary.dump(2));
    write_manifest(paths, "attack", cfg, artifacts, timer.seconds(), {opt.seed});
    std::cout << "run dir: " << paths.run_dir << "\n";
    return 0;
}

int cmd_report(const std::string& summary_path, const std::string& gate_path) {
    const json summary = json::parse(io::read_text_file(summary_path));
    if (gate_path.empty()) {
        std::cout << summary.dump(2) << "\n";
        return 0;
    }
    const json gates = json::parse(io::read_text_file(gate_path));
    int failures = 0;
    for (const auto& gate : gates) {
        const std::string metric = gate.at("metric").get<std::string>();
        const std::string op = gate.at("op").get<std::string>();
        const double want = gate.at("value").get<double>();
        // dotted-path lookup
        const json* node = &summary;
        std::string part;
        std::istringstream stream(metric);
        bool found = true;
        while (std::getline(stream, part, '.')) {
            if (node->contains(part)) node = &(*node)[part];
            else {
                found = false;
                break;
            }
        }
        if (!found || !node->is_number()) {
            std::cout << "FAIL " << metric << " (missing)\n";
            ++failures;
            continue;
        }
        const double got = node->get<double>();
        bool ok = false;
        if (op == ">=") ok = got >= want;
        else if (op == "<=") ok = got <= want;
        else if (op == ">") ok = got > want;
        else if (op == "<") ok = got < want;
        else if (op == "==") ok = got == want;
        else throw std::runtime_error("report: unknown op " + op);
        std::cout << (ok ? "PASS " : "FAIL ") << metric << " = " << got << " (" << op << " "
                  << want << ")\n";
        failures += !ok;
    }
    return failures ? 1 : 0;
}

}  // namespace latentmark::cli
