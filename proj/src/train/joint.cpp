#include "latentmark/train/joint.hpp"

#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "latentmark/eval/detection.hpp"
#include "latentmark/io/container.hpp"
#include "latentmark/lora/serialize.hpp"

namespace latentmark::train {

void JointTrainConfig::validate() const {
    if (bitacc_threshold < 0.0 || bitacc_threshold > 1.0)
        throw std::invalid_argument("joint: bitacc_threshold out of [0,1]");
    if (consecutive_required < 1)
        throw std::invalid_argument("joint: consecutive_required must be >= 1");
    if (ramp_steps < 1) throw std::invalid_argument("joint: ramp_steps must be >= 1");
    if (epochs < 0) throw std::invalid_argument("joint: epochs must be >= 0");
    if (eval_interval < 1) throw std::invalid_argument("joint: eval_interval must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("joint: batch_size must be >= 1");
}

WeightScheduler scheduler_update(const WeightScheduler& s, double bitacc,
                                 const JointTrainConfig& cfg) {
    if (bitacc < 0.0 || bitacc > 1.0)
        throw std::invalid_argument("scheduler_update: bitacc out of [0,1]");
    WeightScheduler out = s;
    if (out.state == WeightScheduler::State::watermark_phase) {
        out.consecutive = bitacc > cfg.bitacc_threshold ? out.consecutive + 1 : 0;
        if (out.consecutive >= cfg.consecutive_required) {
            out.state = WeightScheduler::State::ramping;
            out.ramp_progress = 0;
            out.lambda_style = 0.0f;
        }
    }
    return out;  // ramping and joint phases never move backward
}

WeightScheduler scheduler_tick(const WeightScheduler& s, const JointTrainConfig& cfg) {
    WeightScheduler out = s;
    if (out.state == WeightScheduler::State::ramping) {
        out.ramp_progress += 1;
        out.lambda_style = std::min(1.0f, float(out.ramp_progress) / float(cfg.ramp_steps));
        if (out.ramp_progress >= cfg.ramp_steps) {
            out.state = WeightScheduler::State::joint_phase;
            out.lambda_style = 1.0f;
        }
    }
    return out;
}

double watermark_loss(const Tensor& pred_wm, const Tensor& pred_clean) {
    if (!pred_wm.same_shape(pred_clean))
        throw std::invalid_argument("watermark_loss: shape mismatch");
    double acc = 0;
    for (int64_t i = 0; i < pred_wm.numel(); ++i) {
        const double d = double(pred_wm[i]) - double(pred_clean[i]);
        acc += d * d;
    }
    return acc / double(pred_wm.numel());
}

double style_loss(const Tensor& pred_wm, const Tensor& eps) {
    if (!pred_wm.same_shape(eps)) throw std::invalid_argument("style_loss: shape mismatch");
    double acc = 0;
    for (int64_t i = 0; i < pred_wm.numel(); ++i) {
        const double d = double(pred_wm[i]) - double(eps[i]);
        acc += d * d;
    }
    return acc / double(pred_wm.numel());
}

double total_loss(double l_style, double l_wm, float lambda_style, float lambda_wm) {
    return double(lambda_style) * l_style + double(lambda_wm) * l_wm;
}

namespace {

// Watermarked and clean scaled latents for a batch under one shared message.
void build_latents(const Tensor& images, const wm::WatermarkCodec& codec,
                   const diffusion::LatentAutoencoder& ae, const wm::BitMessage& m,
                   Tensor& z_clean_scaled, Tensor& z_wm_scaled) {
    const Tensor z_o = ae.encode(images);
    const float s = ae.latent_scale();
    z_clean_scaled = z_o;
    for (int64_t i = 0; i < z_clean_scaled.numel(); ++i) z_clean_scaled[i] *= s;
    z_wm_scaled = z_clean_scaled;
    if (!m.all_zero()) {
        const Tensor pert = codec.encode(m);  // [4,8,8]
        const int64_t per = pert.numel();
        for (int n = 0; n < images.dim(0); ++n)
            for (int64_t i = 0; i < per; ++i) z_wm_scaled[n * per + i] += s * pert[i];
    }
}

}  // namespace

StepRecord train_step(const Tensor& images, const std::vector<int>& styles,
                      const diffusion::DenoiserModel& model, const wm::WatermarkCodec& codec,
                      const diffusion::LatentAutoencoder& ae,
                      const diffusion::NoiseSchedule& schedule, lora::LoraAdapter& adapter,
                      nn::AdamW& opt, const wm::BitMessage& m, float lambda_style,
                      float lambda_wm, double cond_dropout, Rng& noise_rng) {
    if (images.rank() != 4 || int(styles.size()) != images.dim(0))
        throw std::invalid_argument("train_step: bad batch");
    if (!adapter.mapper) throw std::invalid_argument("train_step: adapter has no mapper");

    Tensor z_clean, z_wm;
    build_latents(images, codec, ae, m, z_clean, z_wm);

    // shared noise and timestep for Eq. 9 and Eq. 10
    const int t = 1 + int(noise_rng.below(uint64_t(schedule.T)));
    Tensor eps(z_clean.shape());
    for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = float(noise_rng.gaussian());

    const int B = images.dim(0);
    std::vector<int> ts(static_cast<size_t>(B), t);
    std::vector<int> cs(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b)
        cs[static_cast<size_t>(b)] =
            noise_rng.uniform() < cond_dropout ? model.uncond_index() : styles[static_cast<size_t>(b)];

    // frozen base prediction on the clean latent
    const Tensor zt_clean = diffusion::q_sample(z_clean, t, eps, schedule);
    const Tensor pred_clean = model.forward(zt_clean, ts, cs);

    // adapted prediction on the watermarked latent
    const Tensor zt_wm = diffusion::q_sample(z_wm, t, eps, schedule);
    ag::Var v = lora::mapper_forward_var(*adapter.mapper, m);
    lora::WeightResolver resolver = lora::adapted_resolver(adapter, v);
    ag::Var pred_wm = model.forward_var(ag::constant(zt_wm), ts, cs, &resolver);

    ag::Var l_wm = ag::mse_mean(pred_wm, ag::constant(pred_clean));
    ag::Var l_style = ag::mse_mean(pred_wm, ag::constant(eps));
    ag::Var total = ag::add(ag::scale(l_style, lambda_style), ag::scale(l_wm, lambda_wm));
    if (!std::isfinite(total->val[0])) throw std::runtime_error("train_step: non-finite loss");

    opt.zero_grad();
    ag::backward(total);
    opt.step();

    StepRecord rec;
    rec.l_wm = l_wm->val[0];
    rec.l_style = l_style->val[0];
    rec.lambda_style = lambda_style;
    return rec;
}

double probe_bitacc(const diffusion::DenoiserModel& model, const diffusion::LatentAutoencoder& ae,
                    const diffusion::NoiseSchedule& schedule, const lora::LoraAdapter& adapter,
                    const wm::WatermarkCodec& codec, const wm::BitMessage& m,
                    const diffusion::SamplerSpec& spec, int n, Rng& rng) {
    const auto merged = lora::merge_into_base(model.adaptable_weights(), adapter, m, adapter.alpha);
    double acc = 0;
    int count = 0;
    for (int style = 0; count < n; style = (style + 1) % model.n_styles()) {
        const int batch = std::min(n - count, 8);
        auto images =
            diffusion::sample_images(model, ae, schedule, &merged, style, spec, batch, rng);
        for (const auto& img : images) {
            acc += eval::bit_accuracy(m, codec.decode_bits(img));
            ++count;
        }
    }
    return acc / std::max(1, n);
}

void save_train_state(const JointTrainState& state, const std::string& path) {
    io::Container c;
    c.kind = "joint_train_state";
    c.meta["scheduler"] = {{"state", int(state.scheduler.state)},
                           {"consecutive", state.scheduler.consecutive},
                           {"ramp_progress", state.scheduler.ramp_progress},
                           {"lambda_style", state.scheduler.lambda_style}};
    c.meta["next_epoch"] = state.next_epoch;
    c.meta["step"] = state.step;
    c.meta["steps_to_threshold"] = state.steps_to_threshold;
    c.meta["rng"] = {{"order", state.order_state},
                     {"msg", state.msg_state},
                     {"noise", state.noise_state},
                     {"probe", state.probe_state}};
    c.meta["opt_t"] = state.opt.t;
    for (size_t i = 0; i < state.opt.m.size(); ++i) {
        c.add("opt.m." + std::to_string(i), state.opt.m[i]);
        c.add("opt.v." + std::to_string(i), state.opt.v[i]);
    }
    c.save(path);
}

JointTrainState load_train_state(const std::string& path) {
    io::Container c = io::Container::load(path);
    if (c.kind != "joint_train_state")
        throw std::runtime_error("load_train_state: wrong container kind in " + path);
    JointTrainState s;
    const auto& sc = c.meta.at("scheduler");
    s.scheduler.state = WeightScheduler::State(sc.at("state").get<int>());
    s.scheduler.consecutive = sc.at("consecutive").get<int>();
    s.scheduler.ramp_progress = sc.at("ramp_progress").get<int>();
    s.scheduler.lambda_style = sc.at("lambda_style").get<float>();
    s.next_epoch = c.meta.at("next_epoch").get<int>();
    s.step = c.meta.at("step").get<int>();
    s.steps_to_threshold = c.meta.at("steps_to_threshold").get<int>();
    const auto& r = c.meta.at("rng");
    s.order_state = r.at("order").get<std::vector<uint64_t>>();
    s.msg_state = r.at("msg").get<std::vector<uint64_t>>();
    s.noise_state = r.at("noise").get<std::vector<uint64_t>>();
    s.probe_state = r.at("probe").get<std::vector<uint64_t>>();
    s.opt.t = c.meta.at("opt_t").get<int64_t>();
    for (size_t i = 0; c.has("opt.m." + std::to_string(i)); ++i) {
        s.opt.m.push_back(c.get("opt.m." + std::to_string(i)));
        s.opt.v.push_back(c.get("opt.v." + std::to_string(i)));
    }
    return s;
}

JointTrainResult train_authenlora(const JointTrainConfig& cfg, const diffusion::Dataset& dataset,
                                  const diffusion::DenoiserModel& model,
                                  const wm::WatermarkCodec& codec,
                                  const diffusion::LatentAutoencoder& ae,
                                  const diffusion::NoiseSchedule& schedule,
                                  lora::LoraAdapter& adapter, Rng& rng,
                                  const JointTrainState* resume) {
    cfg.validate();
    if (dataset.images.empty()) throw std::invalid_argument("train_authenlora: empty dataset");
    if (!adapter.mapper) throw std::invalid_argument("train_authenlora: adapter has no mapper");

    nn::AdamW opt(adapter.trainable_params(), cfg.learning_rate, cfg.weight_decay);
    Rng order = rng.stream("joint.order");
    Rng msg_rng = rng.stream("joint.msg");
    Rng noise_rng = rng.stream("joint.noise");
    Rng probe_rng = rng.stream("joint.probe");
    Rng eval_rng = rng.stream("joint.eval");

    // fixed evaluation batch for the per-epoch style-loss track
    const int eval_n = std::min<int>(cfg.batch_size, int(dataset.images.size()));
    Tensor eval_batch({eval_n, 3, 32, 32});
    std::vector<int> eval_styles(static_cast<size_t>(eval_n));
    for (int b = 0; b < eval_n; ++b) {
        std::copy_n(dataset.images[size_t(b)].data(), 3 * 32 * 32,
                    eval_batch.data() + int64_t(b) * 3 * 32 * 32);
        eval_styles[size_t(b)] = dataset.styles[size_t(b)];
    }
    const int eval_t = 1 + int(eval_rng.below(uint64_t(schedule.T)));
    Tensor eval_eps({eval_n, 4, 8, 8});
    for (int64_t i = 0; i < eval_eps.numel(); ++i) eval_eps[i] = float(eval_rng.gaussian());
    const wm::BitMessage eval_msg = wm::BitMessage::random(codec.k(), eval_rng);

    auto fixed_style_eval = [&]() {
        Tensor z_clean, z_wm;
        build_latents(eval_batch, codec, ae, eval_msg, z_clean, z_wm);
        const Tensor zt = diffusion::q_sample(z_wm, eval_t, eval_eps, schedule);
        std::vector<int> ts(static_cast<size_t>(eval_n), eval_t);
        std::vector<float> v = adapter.modulation(eval_msg);
        lora::WeightResolver res = lora::adapted_resolver(
            adapter, ag::constant(Tensor({adapter.rank}, std::vector<float>(v))));
        const Tensor pred = model.forward_var(ag::constant(zt), ts, eval_styles, &res)->val;
        return style_loss(pred, eval_eps);
    };

    JointTrainResult result;
    WeightScheduler sched;
    int step = 0;
    int first_epoch = 0;
    if (resume) {
        sched = resume->scheduler;
        step = resume->step;
        first_epoch = resume->next_epoch;
        result.steps_to_threshold = resume->steps_to_threshold;
        order.set_state(resume->order_state);
        msg_rng.set_state(resume->msg_state);
        noise_rng.set_state(resume->noise_state);
        probe_rng.set_state(resume->probe_state);
        opt.set_state(resume->opt);
    }
    std::vector<size_t> idx(dataset.images.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    for (int epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
        order.shuffle(idx.begin(), idx.end());
        for (size_t start = 0; start + size_t(cfg.batch_size) <= idx.size();
             start += size_t(cfg.batch_size)) {
            const int B = cfg.batch_size;
            Tensor batch({B, 3, 32, 32});
            std::vector<int> styles(static_cast<size_t>(B));
            for (int b = 0; b < B; ++b) {
                const size_t i = idx[start + size_t(b)];
                std::copy_n(dataset.images[i].data(), 3 * 32 * 32,
                            batch.data() + int64_t(b) * 3 * 32 * 32);
                styles[size_t(b)] = dataset.styles[i];
            }
            const wm::BitMessage m = wm::BitMessage::random(codec.k(), msg_rng);
            sched = scheduler_tick(sched, cfg);
            StepRecord rec = train_step(batch, styles, model, codec, ae, schedule, adapter, opt,
                                        m, sched.lambda_style, sched.lambda_wm, cfg.cond_dropout,
                                        noise_rng);
            rec.step = step;
            if (step > 0 && step % cfg.eval_interval == 0) {
                const wm::BitMessage pm = wm::BitMessage::random(codec.k(), probe_rng);
                rec.probe_bitacc = probe_bitacc(model, ae, schedule, adapter, codec, pm,
                                                cfg.probe_spec, cfg.probe_images, probe_rng);
                sched = scheduler_update(sched, rec.probe_bitacc, cfg);
                if (result.steps_to_threshold < 0 && rec.probe_bitacc >= cfg.bitacc_threshold)
                    result.steps_to_threshold = step;
            }
            result.log.push_back(rec);
            ++step;
        }
        result.epoch_style_eval.push_back(fixed_style_eval());
        if (!cfg.checkpoint_dir.empty()) {
            namespace fs = std::filesystem;
            fs::create_directories(cfg.checkpoint_dir);
            const std::string tag = "_epoch" + std::to_string(epoch) + ".lmtc";
            lora::save_adapter(adapter,
                               (fs::path(cfg.checkpoint_dir) / ("adapter" + tag)).string());
            JointTrainState st;
            st.scheduler = sched;
            st.next_epoch = epoch + 1;
            st.step = step;
            st.steps_to_threshold = result.steps_to_threshold;
            st.order_state = order.state();
            st.msg_state = msg_rng.state();
            st.noise_state = noise_rng.state();
            st.probe_state = probe_rng.state();
            st.opt = opt.state();
            save_train_state(st, (fs::path(cfg.checkpoint_dir) / ("state" + tag)).string());
        }
    }
    result.scheduler = sched;
    result.total_steps = step;
    return result;
}

}  // namespace latentmark::train
