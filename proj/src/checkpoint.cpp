#include "mmoe/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "mmoe/moe.hpp"
#include "mmoe/plora.hpp"
#include "mmoe/vocab.hpp"
#include "mmoe/util.hpp"

namespace mmoe {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'O', 'E'};
constexpr uint32_t kVersion = 1;

// The only row masks this model family uses are "new rows trainable"
// ranges; anything else is a programming error.
nlohmann::json row_mask_descriptor(const TensorImpl& t) {
    if (t.row_mask.empty()) return nullptr;
    int64_t begin = -1, end = -1;
    for (int64_t r = 0; r < t.rows(); ++r) {
        if (t.row_mask[static_cast<size_t>(r)]) {
            if (begin < 0) begin = r;
            end = r + 1;
        } else if (begin >= 0 && r < end) {
            throw Error("checkpoint: non-contiguous trainable row mask on " + t.name);
        }
    }
    if (begin < 0) throw Error("checkpoint: all-frozen row mask on " + t.name);
    for (int64_t r = begin; r < end; ++r)
        if (!t.row_mask[static_cast<size_t>(r)]) throw Error("checkpoint: non-contiguous trainable row mask on " + t.name);
    return nlohmann::json{{"trainable_begin", begin}, {"trainable_end", end}};
}

void apply_row_mask_descriptor(Tensor& t, const nlohmann::json& desc) {
    if (desc.is_null()) {
        t->row_mask.clear();
        return;
    }
    const int64_t begin = desc.at("trainable_begin").get<int64_t>();
    const int64_t end = desc.at("trainable_end").get<int64_t>();
    t->row_mask.assign(static_cast<size_t>(t.rows()), 0);
    for (int64_t r = begin; r < end && r < t.rows(); ++r) t->row_mask[static_cast<size_t>(r)] = 1;
}

nlohmann::json config_json(const DecoderConfig& c) {
    return nlohmann::json{{"n_layers", c.n_layers},
                          {"n_heads", c.n_heads},
                          {"d_model", c.d_model},
                          {"d_ffn", c.d_ffn},
                          {"vocab_text_size", c.vocab_text_size},
                          {"max_seq_len", c.max_seq_len},
                          {"tie_head", c.tie_head},
                          {"rope_base", c.rope_base},
                          {"attn_out_bias", c.attn_out_bias},
                          {"rms_eps", c.rms_eps}};
}

DecoderConfig config_from_json(const nlohmann::json& j) {
    DecoderConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_ffn = j.at("d_ffn").get<int>();
    c.vocab_text_size = j.at("vocab_text_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.tie_head = j.at("tie_head").get<bool>();
    c.rope_base = j.at("rope_base").get<double>();
    c.attn_out_bias = j.at("attn_out_bias").get<bool>();
    c.rms_eps = j.at("rms_eps").get<double>();
    return c;
}

}  // namespace

void save_checkpoint(const ModelParams& model, const std::string& path, const CheckpointOptions& opts) {
    const auto tensors = model.named_tensors();
    nlohmann::json header;
    header["dtype"] = opts.f32_storage ? "f32" : "f64";
    header["config"] = config_json(model.config);

    if (model.is_moe()) {
        const auto& moe0 = std::get<MoELayer>(model.layers.front().ffn);
        nlohmann::json moe_meta;
        moe_meta["n_experts"] = moe0.n_experts();
        moe_meta["top_k"] = moe0.router.top_k;
        nlohmann::json neurons = nlohmann::json::array();
        for (const auto& layer : model.layers) {
            const auto& moe = std::get<MoELayer>(layer.ffn);
            nlohmann::json per_layer = nlohmann::json::array();
            for (const auto& e : moe.experts) per_layer.push_back(e.neuron_indices);
            neurons.push_back(std::move(per_layer));
        }
        moe_meta["neuron_indices"] = std::move(neurons);
        header["moe"] = std::move(moe_meta);
    } else {
        header["moe"] = nullptr;
    }

    if (model.has_adapters()) {
        const auto& ads = *model.layers.front().adapters;
        const PLoRAAdapter* any = ads.q ? &*ads.q : ads.k ? &*ads.k : ads.v ? &*ads.v : &*ads.o;
        header["plora"] = nlohmann::json{{"rank", any->rank},
                                         {"alpha", any->alpha},
                                         {"query", ads.q.has_value()},
                                         {"key", ads.k.has_value()},
                                         {"value", ads.v.has_value()},
                                         {"out", ads.o.has_value()},
                                         {"all_tokens", model.adapter_mode == AdapterMode::AllTokens}};
    } else {
        header["plora"] = nullptr;
    }

    if (model.expansion) {
        header["expansion"] = nlohmann::json{{"vocab_text", model.expansion->vocab_text},
                                             {"vocab_image", model.expansion->vocab_image},
                                             {"n_special", model.expansion->n_special}};
    } else {
        header["expansion"] = nullptr;
    }

    const size_t elem = opts.f32_storage ? sizeof(float) : sizeof(double);
    nlohmann::json table = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        table.push_back(nlohmann::json{{"name", name},
                                       {"shape", t.shape()},
                                       {"offset", offset},
                                       {"frozen", !t->requires_grad},
                                       {"row_mask", row_mask_descriptor(*t.get())}});
        offset += static_cast<uint64_t>(t.size()) * elem;
    }
    header["tensors"] = std::move(table);

    const std::string header_str = header.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_checkpoint: cannot open " + path);
    f.write(kMagic, 4);
    const uint32_t version = kVersion;
    f.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint64_t header_len = header_str.size();
    f.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, t] : tensors) {
        if (opts.f32_storage) {
            std::vector<float> buf(t->data.size());
            for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t->data[i]);
            f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
        } else {
            f.write(reinterpret_cast<const char*>(t->data.data()),
                    static_cast<std::streamsize>(t->data.size() * sizeof(double)));
        }
    }
    if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

namespace {

struct ParsedFile {
    nlohmann::json header;
    std::vector<char> payload;
};

ParsedFile read_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0) throw IoError("load_checkpoint: bad magic in " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (!f || version != kVersion)
        throw IoError("load_checkpoint: unsupported version " + std::to_string(version) + " in " + path);
    uint64_t header_len = 0;
    f.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
    std::string header_str(header_len, '\0');
    f.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!f) throw IoError("load_checkpoint: truncated header in " + path);
    ParsedFile out;
    out.header = nlohmann::json::parse(header_str);
    out.payload.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
    return out;
}

void fill_tensor(Tensor& t, const nlohmann::json& entry, const std::vector<char>& payload, bool f32) {
    const auto shape = entry.at("shape").get<Shape>();
    if (shape != t.shape())
        throw ShapeError("load_checkpoint: tensor " + entry.at("name").get<std::string>() + " has shape " +
                         shape_str(shape) + ", expected " + shape_str(t.shape()));
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    const size_t elem = f32 ? sizeof(float) : sizeof(double);
    const size_t bytes = t->data.size() * elem;
    if (offset + bytes > payload.size())
        throw IoError("load_checkpoint: tensor " + entry.at("name").get<std::string>() + " exceeds payload");
    if (f32) {
        const float* src = reinterpret_cast<const float*>(payload.data() + offset);
        for (size_t i = 0; i < t->data.size(); ++i) t->data[i] = static_cast<double>(src[i]);
    } else {
        std::memcpy(t->data.data(), payload.data() + offset, bytes);
    }
    t->requires_grad = !entry.at("frozen").get<bool>();
    apply_row_mask_descriptor(t, entry.at("row_mask"));
}

// Model skeleton with the right tensor shapes for the header's metadata.
ModelParams skeleton_from_header(const nlohmann::json& header) {
    DecoderConfig cfg = config_from_json(header.at("config"));
    Rng rng(0);
    ModelParams model = init_dense_model(cfg, rng);

    if (!header.at("moe").is_null()) {
        const auto& moe_meta = header.at("moe");
        convert_to_moe(model, moe_meta.at("n_experts").get<int>(), moe_meta.at("top_k").get<int>(), 0);
        const auto& neurons = moe_meta.at("neuron_indices");
        for (size_t i = 0; i < model.layers.size(); ++i) {
            auto& moe = std::get<MoELayer>(model.layers[i].ffn);
            for (size_t e = 0; e < moe.experts.size(); ++e)
                moe.experts[e].neuron_indices = neurons.at(i).at(e).get<std::vector<int32_t>>();
        }
    }
    if (!header.at("expansion").is_null()) {
        const auto& exp = header.at("expansion");
        VocabLayout layout{exp.at("vocab_text").get<int64_t>(), exp.at("vocab_image").get<int64_t>(),
                           exp.at("n_special").get<int64_t>()};
        expand_vocabulary(model, layout);
    }
    if (!header.at("plora").is_null()) {
        const auto& pl = header.at("plora");
        AdapterTargets targets;
        targets.query = pl.at("query").get<bool>();
        targets.key = pl.at("key").get<bool>();
        targets.value = pl.at("value").get<bool>();
        targets.out = pl.at("out").get<bool>();
        attach_adapters(model, targets, pl.at("rank").get<int>(), pl.at("alpha").get<double>(), 0);
        if (pl.value("all_tokens", false)) model.adapter_mode = AdapterMode::AllTokens;
    }
    return model;
}

void fill_model(ModelParams& model, const ParsedFile& file, const std::string& path) {
    const bool f32 = file.header.at("dtype").get<std::string>() == "f32";
    std::map<std::string, const nlohmann::json*> by_name;
    for (const auto& entry : file.header.at("tensors")) by_name[entry.at("name").get<std::string>()] = &entry;
    for (auto& [name, t] : model.named_tensors()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw ShapeError("load_checkpoint: tensor " + name + " missing from " + path);
        Tensor tt = t;
        fill_tensor(tt, *it->second, file.payload, f32);
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw ShapeError("load_checkpoint: unexpected tensor " + by_name.begin()->first + " in " + path);
}

}  // namespace

ModelParams load_checkpoint(const std::string& path) {
    ParsedFile file = read_container(path);
    ModelParams model = skeleton_from_header(file.header);
    fill_model(model, file, path);
    return model;
}

void load_checkpoint_into(ModelParams& model, const std::string& path) {
    ParsedFile file = read_container(path);
    fill_model(model, file, path);
}

std::string tensor_digest(const Tensor& t) {
    return sha256_hex(t->data.data(), t->data.size() * sizeof(double));
}

std::string model_digest(const ModelParams& model) {
    std::string acc;
    for (const auto& [name, t] : model.named_tensors()) {
        acc += name;
        acc += tensor_digest(t);
    }
    return sha256_hex(acc.data(), acc.size());
}

}  // namespace mmoe
