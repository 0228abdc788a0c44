#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmoe/data.hpp"
#include "mmoe/decoder.hpp"

namespace mmoe {

// Full run configuration. Every field has a default; unknown keys in a config
// document are rejected with the offending key named; parse→serialize→parse
// is idempotent.
struct RunConfig {
    struct Model {
        int n_layers = 4, n_heads = 4, d_model = 128, d_ffn = 512;
        int vocab_text = 512, max_seq_len = 256;
        bool tie_head = false, attn_out_bias = false;
        double rope_base = 10000.0, rms_eps = 1e-6;
    } model;

    struct Moe {
        int n_experts = 16, top_k = 4;
        bool renormalize_gates = false;
        double aux_load_balance_weight = 0.0;
        double noise_bias_init = -10.0;
        uint64_t partition_seed = 1234;
    } moe;

    struct Plora {
        int rank = 8;
        double alpha = 16.0;
        bool query = true, key = true, value = true, out = true;
        uint64_t init_seed = 77;
    } plora;

    struct Vocab {
        int64_t vocab_image = 256;
        int64_t n_special = 2;
        std::string init_scheme = "gw";  // random | mean | gw
    } vocab;

    struct Gw {
        double epsilon = 5e-4;  // <= 0: auto from destination geometry
        double epsilon_scale = 5e-3;
        int max_outer = 200, max_sinkhorn = 500;
        double tol = 1e-7;
        int max_anchors = 1024;
        std::string geometry = "cooccurrence";
        int cooc_window = 2;
        int factor_dim = 16;
        std::string codebook_path;
        uint64_t geometry_seed = 99;
    } gw;

    struct Data {
        int n_classes = 4;
        int text_len = 16;
        StageSpec low{"low", 16, 5, 8000};
        StageSpec high{"high", 64, 5, 7000};
        int pretrain_len = 32;
        int64_t pretrain_samples = 4000;
        int pretrain_epochs = 2;
        int64_t eval_text_samples = 256;
        int eval_text_len = 32;
        int64_t probe_samples = 64;
        uint64_t source_seed = 7;
    } data;

    struct Train {
        double lr_max = 2e-3, lr_min = 2e-4;
        int warmup_steps = 50;
        double beta1 = 0.9, beta2 = 0.95, adam_eps = 1e-8;
        double weight_decay = 0.1;
        int batch_size = 8, grad_accum = 1;
        std::string mode = "plora";
        uint64_t seed = 1;
        double pretrain_lr_max = 3e-3, pretrain_lr_min = 3e-4;
        int moe_warmup_epochs = 1;
        double moe_warmup_lr_max = 1e-3, moe_warmup_lr_min = 1e-4;
        double loss_threshold = 0.0;  // 0 = no steps-to-threshold tracking
        int threshold_window = 16;
    } train;

    struct Analytics {
        int top_m = 0;  // 0 = default to the router's K
    } analytics;

    DecoderConfig decoder_config() const;
    VocabLayout vocab_layout() const;
    void validate() const;
};

RunConfig preset_desk();
RunConfig preset_paper7b();
RunConfig preset_by_name(const std::string& name);

std::string config_to_json_string(const RunConfig& cfg);
RunConfig parse_config_json_string(const std::string& text);
RunConfig load_config_file(const std::string& path);
void save_config_file(const RunConfig& cfg, const std::string& path);

}  // namespace mmoe
