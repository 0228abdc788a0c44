#include "mmoe/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace mmoe {

using nlohmann::json;

DecoderConfig RunConfig::decoder_config() const {
    DecoderConfig c;
    c.n_layers = model.n_layers;
    c.n_heads = model.n_heads;
    c.d_model = model.d_model;
    c.d_ffn = model.d_ffn;
    c.vocab_text_size = model.vocab_text;
    c.max_seq_len = model.max_seq_len;
    c.tie_head = model.tie_head;
    c.rope_base = model.rope_base;
    c.attn_out_bias = model.attn_out_bias;
    c.rms_eps = model.rms_eps;
    return c;
}

VocabLayout RunConfig::vocab_layout() const {
    return VocabLayout{model.vocab_text, vocab.vocab_image, vocab.n_special};
}

namespace {

void check_mode(const std::string& mode) {
    if (mode != "plora" && mode != "lora" && mode != "frozen-adapter-only")
        throw ConfigError("config: unknown train.mode '" + mode + "'");
}

}  // namespace

void RunConfig::validate() const {
    decoder_config().validate();
    if (moe.n_experts < 2) throw ConfigError("config: moe.n_experts must be >= 2");
    if (model.d_ffn % moe.n_experts != 0)
        throw ConfigError("config: moe.n_experts must divide model.d_ffn");
    if (moe.top_k < 1 || moe.top_k > moe.n_experts) throw ConfigError("config: need 1 <= moe.top_k <= moe.n_experts");
    if (plora.rank < 1) throw ConfigError("config: plora.rank must be >= 1");
    if (vocab.vocab_image < 4) throw ConfigError("config: vocab.vocab_image must be >= 4");
    if (train.batch_size < 1 || train.grad_accum < 1)
        throw ConfigError("config: train.batch_size and train.grad_accum must be >= 1");
    if (data.low.image_len >= data.high.image_len)
        throw ConfigError("config: high-stage image_len must exceed low-stage image_len");
    if (vocab.init_scheme != "random" && vocab.init_scheme != "mean" && vocab.init_scheme != "gw")
        throw ConfigError("config: unknown vocab.init_scheme '" + vocab.init_scheme + "'");
    check_mode(train.mode);
}

namespace {

// Strict reader: every key must be consumed.
class Obj {
public:
    Obj(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
        if (!j.is_object()) throw ConfigError("config: " + (prefix_.empty() ? "document" : prefix_) + " must be an object");
    }

    template <class T>
    void get(const char* key, T& field) {
        if (auto it = j_.find(key); it != j_.end()) {
            try {
                field = it->get<T>();
            } catch (const json::exception&) {
                throw ConfigError("config: bad value for key '" + qualified(key) + "'");
            }
        }
        seen_.insert(key);
    }

    const json* sub(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void done() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + qualified(it.key()) + "'");
    }

private:
    std::string qualified(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

    const json& j_;
    std::string prefix_;
    std::set<std::string> seen_;
};

void parse_stage(const json* j, const std::string& prefix, StageSpec& s) {
    if (!j) return;
    Obj o(*j, prefix);
    o.get("image_len", s.image_len);
    o.get("epochs", s.epochs);
    o.get("n_samples", s.n_samples);
    o.done();
}

json stage_json(const StageSpec& s) {
    return json{{"image_len", s.image_len}, {"epochs", s.epochs}, {"n_samples", s.n_samples}};
}

}  // namespace

std::string config_to_json_string(const RunConfig& c) {
    json j;
    j["model"] = {{"n_layers", c.model.n_layers},   {"n_heads", c.model.n_heads},
                  {"d_model", c.model.d_model},     {"d_ffn", c.model.d_ffn},
                  {"vocab_text", c.model.vocab_text}, {"max_seq_len", c.model.max_seq_len},
                  {"tie_head", c.model.tie_head},   {"attn_out_bias", c.model.attn_out_bias},
                  {"rope_base", c.model.rope_base}, {"rms_eps", c.model.rms_eps}};
    j["moe"] = {{"n_experts", c.moe.n_experts},
                {"top_k", c.moe.top_k},
                {"renormalize_gates", c.moe.renormalize_gates},
                {"aux_load_balance_weight", c.moe.aux_load_balance_weight},
                {"noise_bias_init", c.moe.noise_bias_init},
                {"partition_seed", c.moe.partition_seed}};
    j["plora"] = {{"rank", c.plora.rank}, {"alpha", c.plora.alpha}, {"query", c.plora.query},
                  {"key", c.plora.key},   {"value", c.plora.value}, {"out", c.plora.out},
                  {"init_seed", c.plora.init_seed}};
    j["vocab"] = {{"vocab_image", c.vocab.vocab_image},
                  {"n_special", c.vocab.n_special},
                  {"init_scheme", c.vocab.init_scheme}};
    j["gw"] = {{"epsilon", c.gw.epsilon},
               {"epsilon_scale", c.gw.epsilon_scale},
               {"max_outer", c.gw.max_outer},
               {"max_sinkhorn", c.gw.max_sinkhorn},
               {"tol", c.gw.tol},
               {"max_anchors", c.gw.max_anchors},
               {"geometry", c.gw.geometry},
               {"cooc_window", c.gw.cooc_window},
               {"factor_dim", c.gw.factor_dim},
               {"codebook_path", c.gw.codebook_path},
               {"geometry_seed", c.gw.geometry_seed}};
    j["data"] = {{"n_classes", c.data.n_classes},
                 {"text_len", c.data.text_len},
                 {"low", stage_json(c.data.low)},
                 {"high", stage_json(c.data.high)},
                 {"pretrain_len", c.data.pretrain_len},
                 {"pretrain_samples", c.data.pretrain_samples},
                 {"pretrain_epochs", c.data.pretrain_epochs},
                 {"eval_text_samples", c.data.eval_text_samples},
                 {"eval_text_len", c.data.eval_text_len},
                 {"probe_samples", c.data.probe_samples},
                 {"source_seed", c.data.source_seed}};
    j["train"] = {{"lr_max", c.train.lr_max},
                  {"lr_min", c.train.lr_min},
                  {"warmup_steps", c.train.warmup_steps},
                  {"beta1", c.train.beta1},
                  {"beta2", c.train.beta2},
                  {"adam_eps", c.train.adam_eps},
                  {"weight_decay", c.train.weight_decay},
                  {"batch_size", c.train.batch_size},
                  {"grad_accum", c.train.grad_accum},
                  {"mode", c.train.mode},
                  {"seed", c.train.seed},
                  {"pretrain_lr_max", c.train.pretrain_lr_max},
                  {"pretrain_lr_min", c.train.pretrain_lr_min},
                  {"moe_warmup_epochs", c.train.moe_warmup_epochs},
                  {"moe_warmup_lr_max", c.train.moe_warmup_lr_max},
                  {"moe_warmup_lr_min", c.train.moe_warmup_lr_min},
                  {"loss_threshold", c.train.loss_threshold},
                  {"threshold_window", c.train.threshold_window}};
    j["analytics"] = {{"top_m", c.analytics.top_m}};
    return j.dump(2);
}

RunConfig parse_config_json_string(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    RunConfig c;
    Obj root(j, "");
    if (const json* m = root.sub("model")) {
        Obj o(*m, "model");
        o.get("n_layers", c.model.n_layers);
        o.get("n_heads", c.model.n_heads);
        o.get("d_model", c.model.d_model);
        o.get("d_ffn", c.model.d_ffn);
        o.get("vocab_text", c.model.vocab_text);
        o.get("max_seq_len", c.model.max_seq_len);
        o.get("tie_head", c.model.tie_head);
        o.get("attn_out_bias", c.model.attn_out_bias);
        o.get("rope_base", c.model.rope_base);
        o.get("rms_eps", c.model.rms_eps);
        o.done();
    }
    if (const json* m = root.sub("moe")) {
        Obj o(*m, "moe");
        o.get("n_experts", c.moe.n_experts);
        o.get("top_k", c.moe.top_k);
        o.get("renormalize_gates", c.moe.renormalize_gates);
        o.get("aux_load_balance_weight", c.moe.aux_load_balance_weight);
        o.get("noise_bias_init", c.moe.noise_bias_init);
        o.get("partition_seed", c.moe.partition_seed);
        o.done();
    }
    if (const json* m = root.sub("plora")) {
        Obj o(*m, "plora");
        o.get("rank", c.plora.rank);
        o.get("alpha", c.plora.alpha);
        o.get("query", c.plora.query);
        o.get("key", c.plora.key);
        o.get("value", c.plora.value);
        o.get("out", c.plora.out);
        o.get("init_seed", c.plora.init_seed);
        o.done();
    }
    if (const json* m = root.sub("vocab")) {
        Obj o(*m, "vocab");
        o.get("vocab_image", c.vocab.vocab_image);
        o.get("n_special", c.vocab.n_special);
        o.get("init_scheme", c.vocab.init_scheme);
        o.done();
    }
    if (const json* m = root.sub("gw")) {
        Obj o(*m, "gw");
        o.get("epsilon", c.gw.epsilon);
        o.get("epsilon_scale", c.gw.epsilon_scale);
        o.get("max_outer", c.gw.max_outer);
        o.get("max_sinkhorn", c.gw.max_sinkhorn);
        o.get("tol", c.gw.tol);
        o.get("max_anchors", c.gw.max_anchors);
        o.get("geometry", c.gw.geometry);
        o.get("cooc_window", c.gw.cooc_window);
        o.get("factor_dim", c.gw.factor_dim);
        o.get("codebook_path", c.gw.codebook_path);
        o.get("geometry_seed", c.gw.geometry_seed);
        o.done();
    }
    if (const json* m = root.sub("data")) {
        Obj o(*m, "data");
        o.get("n_classes", c.data.n_classes);
        o.get("text_len", c.data.text_len);
        parse_stage(o.sub("low"), "data.low", c.data.low);
        parse_stage(o.sub("high"), "data.high", c.data.high);
        o.get("pretrain_len", c.data.pretrain_len);
        o.get("pretrain_samples", c.data.pretrain_samples);
        o.get("pretrain_epochs", c.data.pretrain_epochs);
        o.get("eval_text_samples", c.data.eval_text_samples);
        o.get("eval_text_len", c.data.eval_text_len);
        o.get("probe_samples", c.data.probe_samples);
        o.get("source_seed", c.data.source_seed);
        o.done();
    }
    if (const json* m = root.sub("train")) {
        Obj o(*m, "train");
        o.get("lr_max", c.train.lr_max);
        o.get("lr_min", c.train.lr_min);
        o.get("warmup_steps", c.train.warmup_steps);
        o.get("beta1", c.train.beta1);
        o.get("beta2", c.train.beta2);
        o.get("adam_eps", c.train.adam_eps);
        o.get("weight_decay", c.train.weight_decay);
        o.get("batch_size", c.train.batch_size);
        o.get("grad_accum", c.train.grad_accum);
        o.get("mode", c.train.mode);
        o.get("seed", c.train.seed);
        o.get("pretrain_lr_max", c.train.pretrain_lr_max);
        o.get("pretrain_lr_min", c.train.pretrain_lr_min);
        o.get("moe_warmup_epochs", c.train.moe_warmup_epochs);
        o.get("moe_warmup_lr_max", c.train.moe_warmup_lr_max);
        o.get("moe_warmup_lr_min", c.train.moe_warmup_lr_min);
        o.get("loss_threshold", c.train.loss_threshold);
        o.get("threshold_window", c.train.threshold_window);
        o.done();
    }
    if (const json* m = root.sub("analytics")) {
        Obj o(*m, "analytics");
        o.get("top_m", c.analytics.top_m);
        o.done();
    }
    root.done();
    check_mode(c.train.mode);
    return c;
}

RunConfig preset_desk() { return RunConfig{}; }

RunConfig preset_paper7b() {
    RunConfig c;
    c.model = {32, 32, 4096, 11008, 32000, 4096, false, false, 10000.0, 1e-6};
    c.moe.n_experts = 16;
    c.moe.top_k = 4;
    c.plora.rank = 64;
    c.plora.alpha = 128.0;  // 2·rank
    c.vocab.vocab_image = 16384;
    c.data.text_len = 180;
    c.data.low = {"low", 1024, 5, 4000000};
    c.data.high = {"high", 4096, 5, 3500000};
    c.train.lr_max = 2e-4;
    c.train.lr_min = 2e-5;
    c.train.warmup_steps = 1000;
    c.train.batch_size = 16;
    c.train.grad_accum = 4;
    return c;
}

RunConfig preset_by_name(const std::string& name) {
    if (name == "desk") return preset_desk();
    if (name == "paper-7b") return preset_paper7b();
    throw ConfigError("unknown preset '" + name + "' (expected desk|paper-7b)");
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("load_config_file: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_config_json_string(text);
}

void save_config_file(const RunConfig& cfg, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("save_config_file: cannot open " + path);
    f << config_to_json_string(cfg) << "\n";
    if (!f) throw IoError("save_config_file: write failed for " + path);
}

}  // namespace mmoe
