#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "latentmark/diffusion/autoencoder.hpp"
#include "latentmark/diffusion/dataset.hpp"
#include "latentmark/diffusion/denoiser.hpp"
#include "latentmark/diffusion/sampler.hpp"
#include "latentmark/diffusion/schedule.hpp"

using namespace latentmark;
using namespace latentmark::diffusion;

TEST_CASE("make_schedule: pinned values and monotonicity") {
    NoiseSchedule s1 = make_schedule(1, 0.5, 0.5);
    CHECK(s1.alpha_bar(0) == 1.0);
    CHECK(s1.alpha_bar(1) == doctest::Approx(0.5).epsilon(1e-12));

    NoiseSchedule s2 = make_schedule(2, 0.1, 0.2);
    CHECK(s2.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-12));
    CHECK(s2.alpha_bar(2) == doctest::Approx(0.72).epsilon(1e-12));

    NoiseSchedule def = make_schedule(1000);
    CHECK(def.alpha_bar(0) == 1.0);
    for (int t = 1; t <= 1000; ++t) CHECK(def.alpha_bar(t) < def.alpha_bar(t - 1));
    CHECK(def.alpha_bar(1) > 0.99);
    CHECK(def.alpha_bar(1000) < 1e-3);

    CHECK_THROWS(make_schedule(0));
    CHECK_THROWS(make_schedule(10, 0.0, 0.1));
    CHECK_THROWS(make_schedule(10, 0.2, 0.1));
    CHECK_THROWS(make_schedule(10, 0.5, 1.0));
}

TEST_CASE("q_sample: endpoints, arithmetic case, variance") {
    Tensor z = Tensor::full({1, 4, 2, 2}, 1.0f);
    Tensor eps = Tensor::full({1, 4, 2, 2}, 2.0f);
    NoiseSchedule s = make_schedule(1, 0.75, 0.75);  // alpha_bar(1) = 0.25
    // t = 0: no noise
    Tensor z0 = q_sample(z, 0, eps, s);
    for (int64_t i = 0; i < z0.numel(); ++i) CHECK(z0[i] == 1.0f);
    // alpha_bar = 0.25: 0.5 * 1 + sqrt(0.75) * 2
    Tensor z1 = q_sample(z, 1, eps, s);
    const double expect = 0.5 + std::sqrt(0.75) * 2.0;
    for (int64_t i = 0; i < z1.numel(); ++i)
        CHECK(z1[i] == doctest::Approx(expect).epsilon(1e-6));
    CHECK_THROWS(q_sample(z, 2, eps, s));
    CHECK_THROWS(q_sample(z, -1, eps, s));

    // empirical per-entry variance ~ (1 - alpha_bar) within 5%
    Rng rng(3);
    Tensor zz = Tensor::full({1, 1, 2, 2}, 0.7f);
    const int draws = 100000;
    std::vector<double> sum(4, 0.0), sq(4, 0.0);
    for (int d = 0; d < draws; ++d) {
        Tensor e({1, 1, 2, 2});
        for (int64_t i = 0; i < 4; ++i) e[i] = float(rng.gaussian());
        Tensor out = q_sample(zz, 1, e, s);
        for (int64_t i = 0; i < 4; ++i) {
            sum[size_t(i)] += out[i];
            sq[size_t(i)] += double(out[i]) * out[i];
        }
    }
    for (int i = 0; i < 4; ++i) {
        const double mean = sum[size_t(i)] / draws;
        const double var = sq[size_t(i)] / draws - mean * mean;
        CHECK(var == doctest::Approx(0.75).epsilon(0.05));
    }
}

TEST_CASE("denoiser: inventory partitions and scope nesting") {
    DenoiserModel model(4, 11);
    const auto& inv = model.inventory();
    // every adaptable weight exactly once
    std::set<std::string> ids;
    for (const auto& info : inv) CHECK(ids.insert(info.target_id).second);
    int counts[4] = {0, 0, 0, 0};
    for (const auto& info : inv) counts[int(info.tag)]++;
    CHECK(counts[int(lora::LayerTag::attention)] == 4);
    CHECK(counts[int(lora::LayerTag::transformer_other)] == 2);
    CHECK(counts[int(lora::LayerTag::resnet)] == 20);
    CHECK(counts[int(lora::LayerTag::conv)] == 3);
    // shapes in the table match the parameter store
    for (const auto& info : inv) {
        const Tensor& w = model.params().find(info.target_id)->val;
        CHECK(w.numel() == int64_t(info.d) * info.k_out);
    }
    auto a = lora::select_scope(inv, lora::FineTuneScope::attention_only);
    auto t = lora::select_scope(inv, lora::FineTuneScope::transformer);
    auto tr = lora::select_scope(inv, lora::FineTuneScope::transformer_resnet);
    auto all = lora::select_scope(inv, lora::FineTuneScope::transformer_resnet_conv);
    CHECK(a.size() == 4);
    CHECK(t.size() == 6);
    CHECK(tr.size() == 26);
    CHECK(all.size() == 29);
}

TEST_CASE("denoiser: forward shape, determinism, adapter-zero equivalence") {
    DenoiserModel model(4, 13);
    Rng rng(17);
    Tensor z({2, 4, 8, 8});
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = float(rng.gaussian());
    std::vector<int> ts = {100, 500}, cs = {0, 4};
    Tensor e1 = model.forward(z, ts, cs);
    Tensor e2 = model.forward(z, ts, cs);
    CHECK(e1.shape() == z.shape());
    for (int64_t i = 0; i < e1.numel(); ++i) CHECK(e1[i] == e2[i]);
    CHECK_THROWS(model.forward(z, {100}, cs));
    CHECK_THROWS(model.forward(z, ts, {0, 7}));

    // fresh adapter (B = 0) leaves the forward pass exactly unchanged
    lora::LoraAdapter adapter = lora::make_adapter(
        model.inventory(), lora::FineTuneScope::transformer_resnet, 16, 48, 1.0f, 19);
    wm::BitMessage m = wm::BitMessage::random(48, rng);
    Tensor eps_adapted = predict_noise(model, &adapter, &m, z, 100, {0, 1});
    Tensor eps_plain = predict_noise(model, nullptr, nullptr, z, 100, {0, 1});
    for (int64_t i = 0; i < eps_plain.numel(); ++i) CHECK(eps_adapted[i] == eps_plain[i]);
    CHECK_THROWS(predict_noise(model, &adapter, nullptr, z, 100, {0, 1}));
}

TEST_CASE("denoiser: resolver path agrees with merged weights") {
    DenoiserModel model(4, 23);
    Rng rng(29);
    lora::LoraAdapter adapter = lora::make_adapter(
        model.inventory(), lora::FineTuneScope::transformer, 16, 48, 0.8f, 31);
    for (auto& [id, layer] : adapter.layers)
        for (int64_t i = 0; i < layer.B->val.numel(); ++i)
            layer.B->val[i] = float(rng.uniform(-0.05, 0.05));
    wm::BitMessage m = wm::BitMessage::random(48, rng);
    Tensor z({2, 4, 8, 8});
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = float(rng.gaussian());

    Tensor via_resolver = predict_noise(model, &adapter, &m, z, 250, {1, 2});
    auto merged = lora::merge_into_base(model.adaptable_weights(), adapter, m, adapter.alpha);
    Tensor via_merge = model.forward_with_weights(z, {250, 250}, {1, 2}, merged);
    for (int64_t i = 0; i < via_merge.numel(); ++i) {
        const float a = via_resolver[i], b = via_merge[i];
        CHECK(std::abs(a - b) <= 1e-5f * std::max({1.0f, std::abs(a), std::abs(b)}));
    }
}

TEST_CASE("autoencoder: contracts") {
    LatentAutoencoder ae(7);
    Rng rng(31);
    Tensor imgs({2, 3, 32, 32});
    for (int64_t i = 0; i < imgs.numel(); ++i) imgs[i] = float(rng.uniform());
    Tensor z = ae.encode(imgs);
    CHECK(z.shape() == std::vector<int>({2, 4, 8, 8}));
    Tensor recon = ae.decode(z);
    CHECK(recon.shape() == imgs.shape());
    for (int64_t i = 0; i < recon.numel(); ++i) {
        CHECK(recon[i] >= 0.0f);
        CHECK(recon[i] <= 1.0f);
    }
    CHECK_THROWS(ae.encode(Tensor({2, 3, 16, 16})));
    CHECK_THROWS(ae.decode(Tensor({2, 4, 4, 4})));

    // zero-epoch training leaves parameters untouched
    LatentAutoencoder ae2(7);
    auto before = ae2.params().find("enc.c1.w")->val;
    AutoencoderTrainConfig cfg;
    cfg.epochs = 0;
    Dataset ds = synthesize_toy_dataset(8, 4, 3);
    Rng trng(5);
    auto log = ae2.train(ds.images, ds.images, cfg, trng);
    CHECK(log.empty());
    const auto& after = ae2.params().find("enc.c1.w")->val;
    for (int64_t i = 0; i < before.numel(); ++i) CHECK(before[i] == after[i]);
}

TEST_CASE("sampler: guidance endpoints and ddim determinism") {
    DenoiserModel model(4, 37);
    LatentAutoencoder ae(39);
    NoiseSchedule sched = make_schedule(100);
    SamplerSpec spec;
    spec.kind = SamplerSpec::Kind::ddim;
    spec.steps = 5;
    spec.guidance = 3.0f;
    spec.eta = 0.0f;

    Rng r1(41), r2(41);
    auto imgs1 = sample_images(model, ae, sched, nullptr, 0, spec, 3, r1);
    auto imgs2 = sample_images(model, ae, sched, nullptr, 0, spec, 3, r2);
    REQUIRE(imgs1.size() == 3);
    for (size_t i = 0; i < imgs1.size(); ++i)
        for (int64_t j = 0; j < imgs1[i].numel(); ++j) CHECK(imgs1[i][j] == imgs2[i][j]);
    for (const auto& img : imgs1)
        for (int64_t j = 0; j < img.numel(); ++j) {
            CHECK(img[j] >= 0.0f);
            CHECK(img[j] <= 1.0f);
        }

    // ddpm path runs and respects bounds
    SamplerSpec pspec = spec;
    pspec.kind = SamplerSpec::Kind::ddpm;
    Rng r3(43);
    auto imgs3 = sample_images(model, ae, sched, nullptr, 1, pspec, 2, r3);
    CHECK(imgs3.size() == 2);

    CHECK_THROWS(sample_images(model, ae, sched, nullptr, 0,
                               SamplerSpec{SamplerSpec::Kind::ddim, 101, 1.0f, 0.0f}, 1, r3));
    CHECK_THROWS(sample_images(model, ae, sched, nullptr, 9, spec, 1, r3));
}

TEST_CASE("guidance combination is affine in g") {
    // eps_u + g (eps_c - eps_u): checked through the sampler with a linear
    // model surrogate by direct evaluation of the formula
    Rng rng(47);
    Tensor eu({8}), ec({8});
    for (int i = 0; i < 8; ++i) {
        eu[i] = float(rng.uniform(-1, 1));
        ec[i] = float(rng.uniform(-1, 1));
    }
    auto combine = [&](float g, int i) { return eu[i] + g * (ec[i] - eu[i]); };
    for (int i = 0; i < 8; ++i) {
        CHECK(combine(0.0f, i) == eu[i]);
        CHECK(combine(1.0f, i) == doctest::Approx(ec[i]).epsilon(1e-6));
        // affine: second difference vanishes
        const float d1 = combine(2.0f, i) - combine(1.0f, i);
        const float d2 = combine(3.0f, i) - combine(2.0f, i);
        CHECK(d1 == doctest::Approx(d2).epsilon(1e-5));
    }
}

TEST_CASE("toy dataset: structure and ingestion round trip") {
    Dataset ds = synthesize_toy_dataset(16, 4, 99);
    CHECK(ds.images.size() == 16);
    for (size_t i = 0; i < ds.images.size(); ++i) {
        CHECK(ds.styles[i] == int(i % 4));
        for (int64_t j = 0; j < ds.images[i].numel(); ++j) {
            CHECK(ds.images[i][j] >= 0.0f);
            CHECK(ds.images[i][j] <= 1.0f);
        }
    }
    // determinism
    Dataset ds2 = synthesize_toy_dataset(16, 4, 99);
    for (int64_t j = 0; j < ds.images[0].numel(); ++j) CHECK(ds.images[0][j] == ds2.images[0][j]);

    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "lmtest_dataset").string();
    save_dataset_pngs(ds, dir);
    Dataset loaded = load_image_directory(dir, dir + "/index.tsv");
    REQUIRE(loaded.images.size() == ds.images.size());
    CHECK(loaded.styles == ds.styles);
    // 8-bit quantization on disk
    for (int64_t j = 0; j < ds.images[3].numel(); ++j)
        CHECK(std::abs(loaded.images[3][j] - ds.images[3][j]) <= 0.5f / 255.0f + 1e-6f);
}
