#include "latentmark/lora/serialize.hpp"

#include "latentmark/io/container.hpp"

namespace latentmark::lora {

namespace {

io::Container to_container(const LoraAdapter& adapter, bool fp16) {
    const auto dtype = fp16 ? io::Container::Dtype::f16 : io::Container::Dtype::f32;
    io::Container c;
    c.kind = "lora_adapter";
    c.meta["rank"] = adapter.rank;
    c.meta["alpha"] = adapter.alpha;
    c.meta["scope"] = scope_name(adapter.scope);
    c.meta["k"] = adapter.k;
    c.meta["has_mapper"] = bool(adapter.mapper);
    c.meta["adapter_params"] = adapter.adapter_param_count();
    nlohmann::json table = nlohmann::json::array();
    for (const auto& [id, layer] : adapter.layers) {
        table.push_back({{"id", id},
                         {"d", layer.A->val.dim(0)},
                         {"k_out", layer.B->val.dim(1)}});
        c.add("layer." + id + ".A", layer.A->val, dtype);
        c.add("layer." + id + ".B", layer.B->val, dtype);
    }
    c.meta["layers"] = table;
    if (adapter.mapper) {
        c.add("mapper.w1", adapter.mapper->w1->val, dtype);
        c.add("mapper.b1", adapter.mapper->b1->val, dtype);
        c.add("mapper.w2", adapter.mapper->w2->val, dtype);
        c.add("mapper.b2", adapter.mapper->b2->val, dtype);
    }
    return c;
}

}  // namespace

void save_adapter(const LoraAdapter& adapter, const std::string& path, bool fp16) {
    to_container(adapter, fp16).save(path);
}

int64_t adapter_serialized_bytes(const LoraAdapter& adapter, bool fp16) {
    return static_cast<int64_t>(to_container(adapter, fp16).serialize().size());
}

LoraAdapter load_adapter(const std::string& path) {
    io::Container c = io::Container::load(path);
    if (c.kind != "lora_adapter")
        throw std::runtime_error("load_adapter: " + path + " is not an adapter container");
    LoraAdapter adapter;
    adapter.rank = c.meta.at("rank").get<int>();
    adapter.alpha = c.meta.at("alpha").get<float>();
    adapter.scope = scope_from_name(c.meta.at("scope").get<std::string>());
    adapter.k = c.meta.at("k").get<int>();
    for (const auto& entry : c.meta.at("layers")) {
        const std::string id = entry.at("id").get<std::string>();
        const int d = entry.at("d").get<int>();
        const int ko = entry.at("k_out").get<int>();
        LoraLayer layer;
        layer.target_id = id;
        layer.rank = adapter.rank;
        const Tensor& A = c.get("layer." + id + ".A");
        const Tensor& B = c.get("layer." + id + ".B");
        if (A.shape() != std::vector<int>({d, adapter.rank}) ||
            B.shape() != std::vector<int>({adapter.rank, ko}))
            throw std::runtime_error("load_adapter: manifest/tensor shape disagreement for " + id);
        layer.A = ag::leaf(A, false);
        layer.B = ag::leaf(B, false);
        adapter.layers.emplace(id, std::move(layer));
    }
    if (c.meta.at("has_mapper").get<bool>()) {
        MessageMapper m;
        m.k = adapter.k;
        m.r = adapter.rank;
        m.w1 = ag::leaf(c.get("mapper.w1"), false);
        m.b1 = ag::leaf(c.get("mapper.b1"), false);
        m.w2 = ag::leaf(c.get("mapper.w2"), false);
        m.b2 = ag::leaf(c.get("mapper.b2"), false);
        if (m.w1->val.shape() != std::vector<int>({2 * m.r, m.k}))
            throw std::runtime_error("load_adapter: mapper shape disagreement");
        adapter.mapper = std::move(m);
    }
    return adapter;
}

}  // namespace latentmark::lora
