#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "latentmark/core/rng.hpp"
#include "latentmark/lora/adapter.hpp"
#include "latentmark/lora/attacks.hpp"
#include "latentmark/io/container.hpp"
#include "latentmark/lora/serialize.hpp"

using namespace latentmark;
using namespace latentmark::lora;

namespace {

LoraLayer make_layer(const std::string& id, Tensor A, Tensor B) {
    LoraLayer l;
    l.target_id = id;
    l.rank = A.dim(1);
    l.A = ag::leaf(std::move(A), false);
    l.B = ag::leaf(std::move(B), false);
    return l;
}

Tensor random_mat(int r, int c, Rng& rng, float scale = 1.0f) {
    Tensor t({r, c});
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = float(rng.uniform(-1, 1)) * scale;
    return t;
}

std::vector<LayerInfo> synthetic_inventory() {
    return {
        {"attn.q", LayerTag::attention, 512, 512},
        {"attn.o", LayerTag::attention, 512, 512},
        {"ffn.1", LayerTag::transformer_other, 640, 512},
        {"res.c1", LayerTag::resnet, 512, 640},
        {"res.c2", LayerTag::resnet, 512, 512},
        {"conv.in", LayerTag::conv, 512, 512},
    };
}

}  // namespace

TEST_CASE("delta_weight: hand case and identities") {
    LoraLayer layer = make_layer("t", Tensor({3, 2}, {1, 2, 0, 1, 3, 0}),
                                 Tensor({2, 3}, {1, 0, 1, 0, 1, 0}));
    Tensor dw = delta_weight(layer, {2.0f, -1.0f});
    const float expect[9] = {2, -2, 2, 0, -1, 0, 6, 0, 6};
    for (int i = 0; i < 9; ++i) CHECK(dw[i] == expect[i]);

    // v = 0 -> zero update
    Tensor z = delta_weight(layer, {0.0f, 0.0f});
    for (int i = 0; i < 9; ++i) CHECK(z[i] == 0.0f);

    CHECK_THROWS(delta_weight(layer, {1.0f}));  // rank mismatch
}

TEST_CASE("delta_weight: ones-vector reduces to plain low-rank product") {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const int d = 2 + int(rng.below(6)), r = 1 + int(rng.below(3));
        const int ko = 2 + int(rng.below(6));
        Tensor A = random_mat(d, r, rng), B = random_mat(r, ko, rng);
        LoraLayer layer = make_layer("t", A, B);
        Tensor dw = delta_weight(layer, std::vector<float>(size_t(r), 1.0f));
        // plain-product route through the same working precision
        Tensor ab = ag::matmul(ag::leaf(A, false), ag::leaf(B, false))->val;
        for (int i = 0; i < d; ++i)
            for (int j = 0; j < ko; ++j) {
                CHECK(std::abs(dw.at2(i, j) - ab.at2(i, j)) <=
                      1e-7 * std::max(1.0f, std::abs(ab.at2(i, j))));
                // exact-arithmetic oracle at float working precision
                double exact = 0;
                for (int q = 0; q < r; ++q) exact += double(A.at2(i, q)) * B.at2(q, j);
                CHECK(std::abs(dw.at2(i, j) - exact) <= 1e-6 * std::max(1.0, std::abs(exact)));
            }
    }
}

TEST_CASE("adapted_forward: disabled paths and merged oracle") {
    Rng rng(7);
    Tensor W = random_mat(4, 4, rng);
    Tensor x({4}, {0.5f, -1.0f, 2.0f, 0.25f});
    LoraLayer layer = make_layer("t", random_mat(4, 2, rng), random_mat(2, 4, rng));
    std::vector<float> v = {0.7f, -1.3f};

    // alpha = 0 and v = 0 give exactly W x
    Tensor base({4});
    for (int i = 0; i < 4; ++i) {
        double acc = 0;
        for (int j = 0; j < 4; ++j) acc += double(W.at2(i, j)) * x[j];
        base[i] = float(acc);
    }
    Tensor y0 = adapted_forward(W, layer, v, 0.0f, x);
    Tensor yz = adapted_forward(W, layer, {0.0f, 0.0f}, 1.0f, x);
    for (int i = 0; i < 4; ++i) {
        CHECK(y0[i] == base[i]);
        CHECK(yz[i] == base[i]);
    }

    // dense-merge oracle within 1e-6 relative
    Tensor dw = delta_weight(layer, v);
    Tensor y = adapted_forward(W, layer, v, 0.8f, x);
    for (int i = 0; i < 4; ++i) {
        double acc = 0;
        for (int j = 0; j < 4; ++j) acc += (double(W.at2(i, j)) + 0.8 * dw.at2(i, j)) * x[j];
        CHECK(std::abs(y[i] - acc) <= 1e-6 * std::max(1.0, std::abs(acc)));
    }
}

TEST_CASE("merge_into_base: exactness, purity, adapted-forward agreement") {
    Rng rng(11);
    auto inventory = synthetic_inventory();
    std::map<std::string, Tensor> base;
    for (const auto& info : inventory) base.emplace(info.target_id, random_mat(info.d, info.k_out, rng));

    // fresh adapter has B = 0 -> merged == base exactly
    LoraAdapter fresh = make_adapter(inventory, FineTuneScope::transformer_resnet_conv, 8, 16,
                                     1.0f, 42);
    wm::BitMessage m = wm::BitMessage::random(16, rng);
    auto merged0 = merge_into_base(base, fresh, m, fresh.alpha);
    for (const auto& [id, W] : base)
        for (int64_t i = 0; i < W.numel(); ++i) CHECK(merged0.at(id)[i] == W[i]);

    // random adapter: merged forward equals adapted forward within 1e-5
    LoraAdapter adapter = make_adapter(inventory, FineTuneScope::transformer_resnet_conv, 8, 16,
                                       0.9f, 43);
    for (auto& [id, layer] : adapter.layers) {
        for (int64_t i = 0; i < layer.B->val.numel(); ++i)
            layer.B->val[i] = float(rng.uniform(-0.1, 0.1));
    }
    std::vector<float> v = adapter.modulation(m);
    auto merged = merge_into_base(base, adapter, m, adapter.alpha);
    for (const auto& [id, layer] : adapter.layers) {
        const Tensor& W = base.at(id);
        for (int trial = 0; trial < 20; ++trial) {
            Tensor x({W.dim(1)});
            for (int i = 0; i < W.dim(1); ++i) x[i] = float(rng.uniform(-1, 1));
            Tensor want = adapted_forward(W, layer, v, adapter.alpha, x);
            const Tensor& Wm = merged.at(id);
            for (int i = 0; i < W.dim(0); ++i) {
                double acc = 0;
                for (int j = 0; j < W.dim(1); ++j) acc += double(Wm.at2(i, j)) * x[j];
                CHECK(std::abs(want[i] - acc) <= 1e-5 * std::max(1.0, std::abs(acc)));
            }
        }
    }

    // purity: merging again from the pristine base gives identical weights
    auto merged2 = merge_into_base(base, adapter, m, adapter.alpha);
    for (const auto& [id, W] : merged)
        for (int64_t i = 0; i < W.numel(); ++i) CHECK(merged2.at(id)[i] == W[i]);

    // missing target
    std::map<std::string, Tensor> partial;
    partial.emplace("attn.q", base.at("attn.q"));
    CHECK_THROWS(merge_into_base(partial, adapter, m, 1.0f));
}

TEST_CASE("merge_adapters: single and zero-adapter identities") {
    Rng rng(13);
    auto inventory = synthetic_inventory();
    std::map<std::string, Tensor> base;
    for (const auto& info : inventory) base.emplace(info.target_id, random_mat(info.d, info.k_out, rng));
    LoraAdapter a = make_adapter(inventory, FineTuneScope::transformer, 8, 16, 1.0f, 7);
    for (auto& [id, layer] : a.layers)
        for (int64_t i = 0; i < layer.B->val.numel(); ++i)
            layer.B->val[i] = float(rng.uniform(-0.1, 0.1));
    wm::BitMessage m = wm::BitMessage::random(16, rng);

    auto via_single = merge_adapters(base, {{&a, 1.0f, m}});
    auto via_base = merge_into_base(base, a, m, a.alpha);
    for (const auto& [id, W] : via_base)
        for (int64_t i = 0; i < W.numel(); ++i) CHECK(via_single.at(id)[i] == W[i]);

    // adding a zero-initialized plain adapter changes nothing
    LoraAdapter zero = make_adapter(inventory, FineTuneScope::transformer, 8, 16, 1.0f, 8,
                                    /*with_mapper=*/false);
    auto with_zero = merge_adapters(base, {{&a, 1.0f, m}, {&zero, 1.0f, std::nullopt}});
    for (const auto& [id, W] : via_base)
        for (int64_t i = 0; i < W.numel(); ++i) CHECK(with_zero.at(id)[i] == W[i]);

    // mapped adapter requires a message
    CHECK_THROWS(merge_adapters(base, {{&a, 1.0f, std::nullopt}}));
}

TEST_CASE("select_scope: nesting and determinism") {
    auto inventory = synthetic_inventory();
    auto attn = select_scope(inventory, FineTuneScope::attention_only);
    auto tfm = select_scope(inventory, FineTuneScope::transformer);
    auto tr = select_scope(inventory, FineTuneScope::transformer_resnet);
    auto all = select_scope(inventory, FineTuneScope::transformer_resnet_conv);
    CHECK(attn == std::vector<std::string>({"attn.q", "attn.o"}));
    CHECK(tfm.size() == 3);
    CHECK(tr.size() == 5);
    CHECK(all.size() == 6);
    auto subset = [](const std::vector<std::string>& small, const std::vector<std::string>& big) {
        for (const auto& s : small)
            if (std::find(big.begin(), big.end(), s) == big.end()) return false;
        return true;
    };
    CHECK(subset(attn, tfm));
    CHECK(subset(tfm, tr));
    CHECK(subset(tr, all));
    // degenerate: no resnet layers -> transformer_resnet equals transformer
    std::vector<LayerInfo> no_res = {{"attn.q", LayerTag::attention, 8, 8},
                                     {"ffn.1", LayerTag::transformer_other, 8, 8}};
    CHECK(select_scope(no_res, FineTuneScope::transformer_resnet) ==
          select_scope(no_res, FineTuneScope::transformer));
    CHECK_THROWS(tag_from_name("pooling"));
    CHECK_THROWS(scope_from_name("everything"));
}

TEST_CASE("mapper: determinism and shape contract") {
    Rng rng(17);
    MessageMapper mapper = MessageMapper::init(16, 8, rng);
    wm::BitMessage m = wm::BitMessage::random(16, rng);
    auto v1 = mapper_forward(mapper, m);
    auto v2 = mapper_forward(mapper, m);
    CHECK(v1.size() == 8);
    CHECK(v1 == v2);
    for (float x : v1) {
        CHECK(std::isfinite(x));
        CHECK(std::abs(x) <= 2.0f);
    }
    CHECK_THROWS(mapper_forward(mapper, wm::BitMessage::zeros(8)));
    // random pairs map to distinct vectors even before training
    int distinct = 0;
    for (int i = 0; i < 100; ++i) {
        auto a = mapper_forward(mapper, wm::BitMessage::random(16, rng));
        auto b = mapper_forward(mapper, wm::BitMessage::random(16, rng));
        if (a != b) ++distinct;
    }
    CHECK(distinct >= 99);
}

TEST_CASE("magnitude_prune: hand case and monotonicity") {
    std::vector<LayerInfo> inv = {{"only", LayerTag::attention, 2, 2}};
    LoraAdapter a = make_adapter(inv, FineTuneScope::attention_only, 2, 8, 1.0f, 1);
    // parameters [1, -3, 2, 0.5] in A; B all zeros -> B sorts first
    a.layers.at("only").A->val = Tensor({2, 2}, {1.0f, -3.0f, 2.0f, 0.5f});
    a.layers.at("only").B->val = Tensor({2, 2}, {4.0f, 5.0f, 6.0f, 7.0f});

    LoraAdapter p0 = magnitude_prune(a, {0.0});
    for (int i = 0; i < 4; ++i) {
        CHECK(p0.layers.at("only").A->val[i] == a.layers.at("only").A->val[i]);
        CHECK(p0.layers.at("only").B->val[i] == a.layers.at("only").B->val[i]);
    }
    LoraAdapter p1 = magnitude_prune(a, {1.0});
    for (int i = 0; i < 4; ++i) {
        CHECK(p1.layers.at("only").A->val[i] == 0.0f);
        CHECK(p1.layers.at("only").B->val[i] == 0.0f);
    }
    // half of 8 entries: zeroed are |0.5|, |1|, |2|, |-3|? no: globally the four
    // smallest magnitudes are 0.5, 1, 2, 3 vs B's 4,5,6,7
    LoraAdapter ph = magnitude_prune(a, {0.5});
    const Tensor& A = ph.layers.at("only").A->val;
    CHECK(A[0] == 0.0f);
    CHECK(A[1] == 0.0f);
    CHECK(A[2] == 0.0f);
    CHECK(A[3] == 0.0f);
    for (int i = 0; i < 4; ++i) CHECK(ph.layers.at("only").B->val[i] != 0.0f);

    // spec hand case on a single matrix: [1,-3,2,0.5], p=0.5 -> [0,-3,2,0]
    LoraAdapter b = make_adapter(inv, FineTuneScope::attention_only, 2, 8, 1.0f, 2);
    b.layers.at("only").A->val = Tensor({2, 2}, {1.0f, -3.0f, 2.0f, 0.5f});
    b.layers.at("only").B->val = Tensor({2, 2});  // zeros rank below everything
    LoraAdapter bp = magnitude_prune(b, {0.5});
    // 8 entries total, 4 zeroed: the four zeros of B already count as smallest
    const Tensor& BA = bp.layers.at("only").A->val;
    CHECK(BA[0] == 1.0f);
    CHECK(BA[1] == -3.0f);
    CHECK(BA[2] == 2.0f);
    CHECK(BA[3] == 0.5f);

    // [1, -3, 2, 0.5] with the two smallest zeroed -> [0, -3, 2, 0]
    LoraAdapter c = make_adapter(inv, FineTuneScope::attention_only, 2, 8, 1.0f, 9);
    c.layers.at("only").A->val = Tensor({2, 2}, {1.0f, -3.0f, 2.0f, 0.5f});
    c.layers.at("only").B->val = Tensor({2, 2}, {10.0f, 20.0f, 30.0f, 40.0f});
    LoraAdapter cp = magnitude_prune(c, {0.25});
    const Tensor& CA = cp.layers.at("only").A->val;
    CHECK(CA[0] == 0.0f);
    CHECK(CA[1] == -3.0f);
    CHECK(CA[2] == 2.0f);
    CHECK(CA[3] == 0.0f);

    // monotone nesting of zeroed sets
    Rng rng(23);
    std::vector<LayerInfo> inv2 = {{"x", LayerTag::attention, 6, 6}, {"y", LayerTag::attention, 6, 6}};
    LoraAdapter big = make_adapter(inv2, FineTuneScope::attention_only, 4, 8, 1.0f, 3);
    for (auto& [id, layer] : big.layers)
        for (int64_t i = 0; i < layer.B->val.numel(); ++i)
            layer.B->val[i] = float(rng.uniform(-1, 1));
    double prev_ratio = 0.1;
    LoraAdapter prev = magnitude_prune(big, {prev_ratio});
    for (double ratio : {0.3, 0.55, 0.8}) {
        LoraAdapter cur = magnitude_prune(big, {ratio});
        for (const auto& [id, layer] : prev.layers)
            for (int64_t i = 0; i < layer.A->val.numel(); ++i) {
                if (layer.A->val[i] == 0.0f) CHECK(cur.layers.at(id).A->val[i] == 0.0f);
                if (layer.B->val[i] == 0.0f) CHECK(cur.layers.at(id).B->val[i] == 0.0f);
            }
        prev = std::move(cur);
    }
    CHECK_THROWS(magnitude_prune(a, {1.5}));
    // attacks never touch the input
    CHECK(a.layers.at("only").A->val[1] == -3.0f);
}

TEST_CASE("quantize: formats, error bounds, idempotence") {
    // bf16 keeps values exactly representable in 8 mantissa bits
    CHECK(bf16_roundtrip(1.0f) == 1.0f);
    CHECK(bf16_roundtrip(-0.40625f) == -0.40625f);  // 13 * 2^-5
    CHECK(bf16_roundtrip(0.0f) == 0.0f);
    // fp8 e4m3: exact on coarse grid, clamps at 448, rounds to nearest even
    CHECK(fp8_e4m3_roundtrip(0.5f) == 0.5f);
    CHECK(fp8_e4m3_roundtrip(1.125f) == 1.125f);
    CHECK(fp8_e4m3_roundtrip(1000.0f) == 448.0f);
    CHECK(fp8_e4m3_roundtrip(-1000.0f) == -448.0f);
    CHECK(fp8_e4m3_roundtrip(1.0625f) == 1.0f);  // halfway, even mantissa wins

    std::vector<LayerInfo> inv = {{"m", LayerTag::attention, 16, 16}};
    Rng rng(29);
    LoraAdapter a = make_adapter(inv, FineTuneScope::attention_only, 8, 8, 1.0f, 4);
    auto& layer = a.layers.at("m");
    for (int64_t i = 0; i < layer.A->val.numel(); ++i)
        layer.A->val[i] = float(rng.uniform(-1, 1));
    layer.A->val[0] = 1.0f;  // pin max|value| = 1
    for (int64_t i = 0; i < layer.B->val.numel(); ++i)
        layer.B->val[i] = float(rng.uniform(-0.5, 0.5));

    // int8 with max |v| = 1: max error <= 1/254 + 1e-9
    LoraAdapter q8 = quantize(a, QuantSpec::parse("int8"));
    float max_err8 = 0;
    for (int64_t i = 0; i < layer.A->val.numel(); ++i)
        max_err8 = std::max(max_err8, std::abs(q8.layers.at("m").A->val[i] - layer.A->val[i]));
    CHECK(max_err8 <= 1.0f / 254.0f + 1e-9f);

    // exhaustive scan of 1e5 random values through the int8 quantizer rule
    Rng scan(31);
    for (int i = 0; i < 100000; ++i) {
        const float v = float(scan.uniform(-1.0, 1.0));
        const float scale = 1.0f / 127.0f;  // max|value| pinned to 1
        const float q = std::nearbyint(v / scale) * scale;
        CHECK(std::abs(q - v) <= 1.0f / 254.0f + 1e-9f);
    }

    // int4 coarser than int8 in max-norm
    LoraAdapter q4 = quantize(a, QuantSpec::parse("int4"));
    float max_err4 = 0;
    for (int64_t i = 0; i < layer.A->val.numel(); ++i)
        max_err4 = std::max(max_err4, std::abs(q4.layers.at("m").A->val[i] - layer.A->val[i]));
    CHECK(max_err4 > max_err8);

    // idempotence for every format
    for (const char* fmt : {"fp8_e4m3", "bf16", "int8", "int4"}) {
        LoraAdapter once = quantize(a, QuantSpec::parse(fmt));
        LoraAdapter twice = quantize(once, QuantSpec::parse(fmt));
        for (const auto& [id, l] : once.layers)
            for (int64_t i = 0; i < l.A->val.numel(); ++i)
                CHECK(twice.layers.at(id).A->val[i] == l.A->val[i]);
    }

    // all-zero matrix: scale defined as 1, no-op
    LoraAdapter zeroed = make_adapter(inv, FineTuneScope::attention_only, 8, 8, 1.0f, 5);
    zeroed.layers.at("m").A->val.fill(0.0f);
    LoraAdapter qz = quantize(zeroed, QuantSpec::parse("int8"));
    for (int64_t i = 0; i < 16 * 8; ++i) CHECK(qz.layers.at("m").A->val[i] == 0.0f);

    CHECK_THROWS(QuantSpec::parse("int2"));
}

TEST_CASE("adapter serialization: round trip, sizes, corruption") {
    namespace fs = std::filesystem;
    Rng rng(37);
    // synthetic layers large enough for rank 320
    std::vector<LayerInfo> inv = {{"wide.a", LayerTag::attention, 512, 640},
                                  {"wide.b", LayerTag::resnet, 512, 512}};
    LoraAdapter a320 = make_adapter(inv, FineTuneScope::transformer_resnet, 320, 48, 1.0f, 6);
    for (auto& [id, layer] : a320.layers)
        for (int64_t i = 0; i < layer.B->val.numel(); ++i)
            layer.B->val[i] = float(rng.uniform(-1, 1));

    const std::string dir = (fs::temp_directory_path() / "lmtest_adapters").string();
    fs::create_directories(dir);
    const std::string p320 = dir + "/a320.lmtc";
    save_adapter(a320, p320);
    LoraAdapter back = load_adapter(p320);
    CHECK(back.rank == 320);
    CHECK(back.k == 48);
    CHECK(back.scope == FineTuneScope::transformer_resnet);
    for (const auto& [id, layer] : a320.layers) {
        for (int64_t i = 0; i < layer.A->val.numel(); ++i)
            CHECK(back.layers.at(id).A->val[i] == layer.A->val[i]);
        for (int64_t i = 0; i < layer.B->val.numel(); ++i)
            CHECK(back.layers.at(id).B->val[i] == layer.B->val[i]);
    }
    // mapper round-trips too
    REQUIRE(back.mapper.has_value());
    auto m = wm::BitMessage::random(48, rng);
    CHECK(mapper_forward(*back.mapper, m) == mapper_forward(*a320.mapper, m));

    // parameter count from the shape manifest; stable across saves
    const int64_t expect_params = int64_t(512 * 320 + 320 * 640) + int64_t(512 * 320 + 320 * 512);
    CHECK(a320.adapter_param_count() == expect_params);
    save_adapter(a320, dir + "/a320_again.lmtc");
    CHECK(fs::file_size(p320) == fs::file_size(dir + "/a320_again.lmtc"));

    // rank-64 container ~ 64/320 the bytes of rank-320 (within overhead)
    LoraAdapter a64 = make_adapter(inv, FineTuneScope::transformer_resnet, 64, 48, 1.0f, 7);
    const int64_t b320 = adapter_serialized_bytes(a320, true);
    const int64_t b64 = adapter_serialized_bytes(a64, true);
    const double ratio = double(b64) / double(b320);
    CHECK(ratio > 0.8 * 64.0 / 320.0);
    CHECK(ratio < 1.2 * 64.0 / 320.0);
    CHECK(b320 > b64);

    // fp16 storage halves the payload and dequantizes to half precision
    const std::string p16 = dir + "/a320_f16.lmtc";
    save_adapter(a320, p16, true);
    CHECK(fs::file_size(p16) < fs::file_size(p320));
    LoraAdapter half = load_adapter(p16);
    const std::string p16b = dir + "/a320_f16_again.lmtc";
    save_adapter(half, p16b, true);  // second round trip is lossless
    LoraAdapter half2 = load_adapter(p16b);
    for (const auto& [id, layer] : half.layers)
        for (int64_t i = 0; i < layer.A->val.numel(); ++i)
            CHECK(half2.layers.at(id).A->val[i] == layer.A->val[i]);

    // corruption: bad version, truncation, shape disagreement
    auto bytes = io::read_file(p320);
    auto bad_version = bytes;
    bad_version[4] = 0x7f;
    CHECK_THROWS(io::Container::deserialize(bad_version));
    auto truncated = bytes;
    truncated.resize(truncated.size() - 64);
    CHECK_THROWS(io::Container::deserialize(truncated));
    io::Container c = io::Container::load(p320);
    c.meta["layers"][0]["d"] = 99;  // disagree with stored tensor shape
    io::write_file(dir + "/bad.lmtc", c.serialize());
    CHECK_THROWS(load_adapter(dir + "/bad.lmtc"));
}
