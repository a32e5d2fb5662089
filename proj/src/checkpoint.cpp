#include <cstring>
#include <fstream>

#include <json.hpp>

#include "pfnlab/model.hpp"

namespace pfnlab {

namespace {

using json = nlohmann::json;

constexpr char kMagic[8] = {'P', 'F', 'N', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::ostream& os, uint32_t v) {
    const unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                                (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("checkpoint: truncated file");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

json config_to_json_obj(const ModelConfig& c) {
    return json{{"d_model", c.d_model},
                {"n_layers", c.n_layers},
                {"n_heads", c.n_heads},
                {"d_ff", c.d_ff},
                {"max_features", c.max_features},
                {"max_classes", c.max_classes},
                {"embedding_kind", embedding_kind_name(c.embedding_kind)},
                {"n_bins", c.n_bins},
                {"dropout", c.dropout},
                {"lora_rank", c.lora_rank},
                {"lora_alpha", c.lora_alpha}};
}

ModelConfig config_from_json_obj(const json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model").get<int64_t>();
    c.n_layers = j.at("n_layers").get<int64_t>();
    c.n_heads = j.at("n_heads").get<int64_t>();
    c.d_ff = j.at("d_ff").get<int64_t>();
    c.max_features = j.at("max_features").get<int64_t>();
    c.max_classes = j.at("max_classes").get<int64_t>();
    c.embedding_kind = embedding_kind_from(j.at("embedding_kind").get<std::string>());
    c.n_bins = j.at("n_bins").get<int64_t>();
    c.dropout = j.at("dropout").get<float>();
    c.lora_rank = j.at("lora_rank").get<int64_t>();
    c.lora_alpha = j.at("lora_alpha").get<float>();
    return c;
}

}  // namespace

std::string model_config_to_json(const ModelConfig& config) { return config_to_json_obj(config).dump(); }

ModelConfig model_config_from_json(const std::string& json_text) {
    return config_from_json_obj(json::parse(json_text));
}

void save_checkpoint(const std::string& path, const PFNParams& params,
                     const std::string& extra_metadata_json) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open for writing: " + path);
    os.write(kMagic, 8);
    put_u32(os, uint32_t(params.store.size()));
    for (const auto& name : params.store.names()) {
        const auto& e = params.store.at(name);
        put_u32(os, uint32_t(name.size()));
        os.write(name.data(), std::streamsize(name.size()));
        os.put(char(0));  // dtype tag: f32
        os.put(char(e.trainable ? 1 : 0));
        put_u32(os, uint32_t(e.tensor.rank()));
        for (int64_t d : e.tensor.shape) put_u32(os, uint32_t(d));
        os.write(reinterpret_cast<const char*>(e.tensor.data.data()),
                 std::streamsize(e.tensor.data.size() * sizeof(float)));
    }

    json meta;
    meta["model_config"] = config_to_json_obj(params.config);
    meta["pw_edges"] = params.pw_edges;
    const json extra = json::parse(extra_metadata_json);
    for (const auto& [key, value] : extra.items()) meta[key] = value;
    const std::string meta_text = meta.dump();
    put_u32(os, uint32_t(meta_text.size()));
    os.write(meta_text.data(), std::streamsize(meta_text.size()));
    if (!os) throw DataError("checkpoint: write failed: " + path);
}

PFNParams load_checkpoint(const std::string& path, std::string* metadata_json) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) throw DataError("checkpoint: bad magic in " + path);

    PFNParams params;
    const uint32_t count = get_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t name_len = get_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const int dtype = is.get();
        if (dtype != 0) throw DataError("checkpoint: unsupported dtype tag");
        const int trainable = is.get();
        const uint32_t rank = get_u32(is);
        std::vector<int64_t> shape(rank);
        for (auto& d : shape) d = int64_t(get_u32(is));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(t.data.size() * sizeof(float)));
        if (!is) throw DataError("checkpoint: truncated tensor payload for " + name);
        params.store.add(name, std::move(t), trainable != 0);
    }

    const uint32_t meta_len = get_u32(is);
    std::string meta_text(meta_len, '\0');
    is.read(meta_text.data(), meta_len);
    if (!is) throw DataError("checkpoint: truncated metadata");
    const json meta = json::parse(meta_text);
    params.config = config_from_json_obj(meta.at("model_config"));
    if (meta.contains("pw_edges"))
        params.pw_edges = meta.at("pw_edges").get<std::vector<std::vector<float>>>();
    if (metadata_json) *metadata_json = meta_text;
    return params;
}

}  // namespace pfnlab
