#include <doctest.h>

#include <cmath>

#include "latentmark/eval/reports.hpp"
#include "latentmark/train/joint.hpp"

using namespace latentmark;
using namespace latentmark::train;

namespace {
JointTrainConfig default_cfg() {
    JointTrainConfig cfg;
    cfg.ramp_steps = 4;
    return cfg;
}
}  // namespace

TEST_CASE("scheduler: consecutive counting, reset, forward-only") {
    JointTrainConfig cfg = default_cfg();
    WeightScheduler s;
    // (0.8, 0.8, 0.8) -> ramping after the third update
    for (int i = 0; i < 2; ++i) {
        s = scheduler_update(s, 0.8, cfg);
        CHECK(s.state == WeightScheduler::State::watermark_phase);
    }
    s = scheduler_update(s, 0.8, cfg);
    CHECK(s.state == WeightScheduler::State::ramping);
    CHECK(s.lambda_style == 0.0f);
    CHECK(s.lambda_wm == 1.0f);

    // (0.8, 0.7, 0.8, 0.8, 0.8) -> reset on the miss, ramping after the fifth
    WeightScheduler r;
    r = scheduler_update(r, 0.8, cfg);
    r = scheduler_update(r, 0.7, cfg);
    CHECK(r.consecutive == 0);
    r = scheduler_update(r, 0.8, cfg);
    r = scheduler_update(r, 0.8, cfg);
    CHECK(r.state == WeightScheduler::State::watermark_phase);
    r = scheduler_update(r, 0.8, cfg);
    CHECK(r.state == WeightScheduler::State::ramping);

    // exactly tau does not count ("surpasses")
    WeightScheduler t;
    for (int i = 0; i < 5; ++i) t = scheduler_update(t, 0.75, cfg);
    CHECK(t.state == WeightScheduler::State::watermark_phase);

    // ramp to joint phase; lambda is monotone and capped at 1
    float prev = s.lambda_style;
    for (int i = 0; i < cfg.ramp_steps; ++i) {
        s = scheduler_tick(s, cfg);
        CHECK(s.lambda_style >= prev);
        prev = s.lambda_style;
    }
    CHECK(s.state == WeightScheduler::State::joint_phase);
    CHECK(s.lambda_style == 1.0f);
    // in joint phase updates and ticks change nothing
    WeightScheduler j = scheduler_update(s, 0.1, cfg);
    CHECK(j.state == WeightScheduler::State::joint_phase);
    CHECK(j.lambda_style == 1.0f);
    j = scheduler_tick(j, cfg);
    CHECK(j.lambda_style == 1.0f);

    CHECK_THROWS(scheduler_update(s, 1.5, cfg));
}

TEST_CASE("joint losses: closed forms") {
    Tensor a({1, 1, 1, 2}, {1.0f, 2.0f});
    Tensor b = Tensor::zeros({1, 1, 1, 2});
    CHECK(watermark_loss(a, a) == 0.0);
    CHECK(watermark_loss(a, b) == doctest::Approx(2.5));
    Tensor c = Tensor::full({2, 2}, 0.3f), d = Tensor::full({2, 2}, 0.1f);
    CHECK(watermark_loss(c, d) == doctest::Approx(0.04).epsilon(1e-6));
    CHECK_THROWS(watermark_loss(a, Tensor({1, 3})));

    CHECK(style_loss(a, a) == 0.0);
    // pred = 0 against standard normal noise: mean square ~ 1 within 5%
    Rng rng(3);
    Tensor eps({1, 1, 100, 100});
    for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = float(rng.gaussian());
    CHECK(style_loss(Tensor::zeros(eps.shape()), eps) == doctest::Approx(1.0).epsilon(0.05));
    // strict convexity: midpoint beats endpoint average
    Tensor p0 = Tensor::zeros({4}), p1 = Tensor::full({4}, 2.0f), mid = Tensor::full({4}, 1.0f);
    Tensor target = Tensor::full({4}, 0.5f);
    CHECK(style_loss(mid, target) <
          0.5 * (style_loss(p0, target) + style_loss(p1, target)));

    CHECK(total_loss(0.2, 0.3, 1.0f, 1.0f) == doctest::Approx(0.5));
    CHECK(total_loss(0.7, 0.3, 0.0f, 1.0f) == doctest::Approx(0.3));
    CHECK(total_loss(0.0, 0.0, 1.0f, 1.0f) == 0.0);
    // exact decomposition
    CHECK(total_loss(0.11, 0.07, 0.25f, 2.0f) ==
          doctest::Approx(0.25 * 0.11 + 2.0 * 0.07).epsilon(1e-12));
}

TEST_CASE("train_step: zero-message identity, frozen bases, determinism") {
    diffusion::LatentAutoencoder ae(3);
    ae.freeze();
    diffusion::DenoiserModel model(4, 5);
    model.freeze();
    wm::WatermarkCodec codec(48, wm::HueBand{}, 7);
    codec.freeze();
    diffusion::NoiseSchedule schedule = diffusion::make_schedule(100);
    auto ds = diffusion::synthesize_toy_dataset(8, 4, 9);

    Tensor batch({4, 3, 32, 32});
    std::vector<int> styles(4);
    for (int b = 0; b < 4; ++b) {
        std::copy_n(ds.images[size_t(b)].data(), 3 * 32 * 32,
                    batch.data() + int64_t(b) * 3 * 32 * 32);
        styles[size_t(b)] = ds.styles[size_t(b)];
    }

    // fresh adapter, zero message: pred_wm == pred_clean exactly
    lora::LoraAdapter adapter = lora::make_adapter(
        model.inventory(), lora::FineTuneScope::transformer_resnet, 8, 48, 1.0f, 11);
    nn::AdamW opt(adapter.trainable_params(), 1e-4f, 0.0f);
    Rng noise(13);
    StepRecord rec = train_step(batch, styles, model, codec, ae, schedule, adapter, opt,
                                wm::BitMessage::zeros(48), 0.0f, 1.0f, 0.0, noise);
    CHECK(rec.l_wm == 0.0);

    // base and codec weights never change across steps
    const std::string model_sum = model.weight_checksum();
    const std::string codec_sum = codec.weight_checksum();
    Rng msg_rng(17);
    for (int i = 0; i < 3; ++i)
        train_step(batch, styles, model, codec, ae, schedule, adapter, opt,
                   wm::BitMessage::random(48, msg_rng), 0.5f, 1.0f, 0.1, noise);
    CHECK(model.weight_checksum() == model_sum);
    CHECK(codec.weight_checksum() == codec_sum);

    // identical seeds produce identical records
    auto run_once = [&](uint64_t seed) {
        lora::LoraAdapter a = lora::make_adapter(
            model.inventory(), lora::FineTuneScope::transformer_resnet, 8, 48, 1.0f, 19);
        nn::AdamW o(a.trainable_params(), 1e-4f, 0.0f);
        Rng nrng(seed), mrng(seed + 1);
        std::vector<double> losses;
        for (int i = 0; i < 2; ++i) {
            StepRecord r = train_step(batch, styles, model, codec, ae, schedule, a, o,
                                      wm::BitMessage::random(48, mrng), 0.2f, 1.0f, 0.1, nrng);
            losses.push_back(r.l_wm);
            losses.push_back(r.l_style);
        }
        return losses;
    };
    CHECK(run_once(21) == run_once(21));
}

TEST_CASE("train_authenlora: zero-epoch no-op and short-run plumbing") {
    diffusion::LatentAutoencoder ae(23);
    ae.freeze();
    diffusion::DenoiserModel model(4, 29);
    model.freeze();
    wm::WatermarkCodec codec(48, wm::HueBand{}, 31);
    codec.freeze();
    diffusion::NoiseSchedule schedule = diffusion::make_schedule(50);
    auto ds = diffusion::synthesize_toy_dataset(8, 4, 33);

    JointTrainConfig cfg;
    cfg.epochs = 0;
    lora::LoraAdapter adapter = lora::make_adapter(
        model.inventory(), lora::FineTuneScope::transformer, 8, 48, 1.0f, 37);
    Rng rng(39);
    JointTrainResult res = train_authenlora(cfg, ds, model, codec, ae, schedule, adapter, rng);
    CHECK(res.log.empty());
    CHECK(res.total_steps == 0);

    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.eval_interval = 1;
    cfg.probe_images = 2;
    cfg.probe_spec.steps = 3;
    Rng rng2(41);
    JointTrainResult short_run =
        train_authenlora(cfg, ds, model, codec, ae, schedule, adapter, rng2);
    CHECK(short_run.total_steps == 2);
    CHECK(short_run.log.size() == 2);
    CHECK(short_run.epoch_style_eval.size() == 1);
    // the second step carries a probe
    CHECK(short_run.log[1].probe_bitacc >= 0.0);
}

TEST_CASE("classification experiment identities on synthetic decoders") {
    // decoded bits come from a real codec here, so just validate the contract
    // on tiny corpora: report counts sum to corpus sizes
    wm::WatermarkCodec codec(48, wm::HueBand{}, 43);
    auto ds = diffusion::synthesize_toy_dataset(6, 4, 45);
    std::vector<Tensor> a(ds.images.begin(), ds.images.begin() + 3);
    std::vector<Tensor> b(ds.images.begin() + 3, ds.images.end());
    auto rep = eval::classification_experiment(codec, a, b);
    CHECK(rep.tp + rep.fn == 3);
    CHECK(rep.fp + rep.tn == 3);
    CHECK_THROWS(eval::classification_experiment(codec, {}, b));
}
