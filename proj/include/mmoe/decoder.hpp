#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mmoe/rng.hpp"
#include "mmoe/tensor.hpp"
#include "mmoe/vocab_layout.hpp"

namespace mmoe {

struct DecoderConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 128;
    int d_ffn = 512;
    int vocab_text_size = 512;
    int max_seq_len = 256;
    bool tie_head = false;
    double rope_base = 10000.0;
    bool attn_out_bias = false;
    double rms_eps = 1e-6;

    void validate() const;
};

// Gate/up/down triple of a SwiGLU FFN: y = W_down · (silu(W_gate·x) ⊙ W_up·x).
struct DenseFFN {
    Tensor w_gate;  // [d_ffn, d_model]
    Tensor w_up;    // [d_ffn, d_model]
    Tensor w_down;  // [d_model, d_ffn]
};

struct AttentionBlock {
    Tensor w_q, w_k, w_v, w_o;  // [d_model, d_model]
    Tensor b_o;                 // optional out-projection bias; undefined when disabled
};

struct ExpertSlice {
    std::vector<int32_t> neuron_indices;  // sorted rows of the parent intermediate dim
    Tensor w_gate, w_up;                  // [d_ffn/N, d_model]
    Tensor w_down;                        // [d_model, d_ffn/N]
};

struct Router {
    Tensor w_g;      // [N, d_model]
    Tensor w_noise;  // [N, d_model]
    Tensor b_noise;  // [N]
    int top_k = 1;
};

struct MoELayer {
    Router router;
    std::vector<ExpertSlice> experts;
    int n_experts() const { return static_cast<int>(experts.size()); }
};

enum class ProjTarget { Query, Key, Value, Out };
const char* proj_target_name(ProjTarget t);

struct PLoRAAdapter {
    Tensor a;  // [rank, c_in]
    Tensor b;  // [c_out, rank]
    int rank = 0;
    double alpha = 0.0;
    double scale() const { return alpha / std::sqrt(static_cast<double>(rank)); }
};

struct LayerAdapters {
    std::optional<PLoRAAdapter> q, k, v, o;
    std::optional<PLoRAAdapter>& slot(ProjTarget t);
    const std::optional<PLoRAAdapter>* slots[4] = {nullptr, nullptr, nullptr, nullptr};
};

struct DecoderLayer {
    Tensor attn_gain, ffn_gain;  // [d_model]
    AttentionBlock attn;
    std::variant<DenseFFN, MoELayer> ffn;
    std::optional<LayerAdapters> adapters;

    bool is_moe() const { return std::holds_alternative<MoELayer>(ffn); }
};

// Per-token routing outcome of one MoE layer: expert ids in descending score
// order with the raw softmax scores of exactly those experts.
struct RoutingDecision {
    std::vector<int32_t> experts;
    std::vector<double> gates;
};

class RoutingTraceSink {
public:
    virtual ~RoutingTraceSink() = default;
    virtual void record(int layer, int64_t position, bool new_modality, const RoutingDecision& d) = 0;
};

// How attached adapters select tokens: masked = new-modality rows only
// (partial adaptation); all_tokens = the conventional-LoRA baseline. The mode
// is a model property so evaluation and trace collection follow the same
// forward rule the model was trained under.
enum class AdapterMode { Masked, AllTokens };

struct ModelParams {
    DecoderConfig config;
    Tensor embedding;  // [V, d]
    std::vector<DecoderLayer> layers;
    Tensor final_gain;
    Tensor head;  // [V, d]; aliases embedding when tie_head
    std::optional<VocabLayout> expansion;  // set once the vocabulary grew
    AdapterMode adapter_mode = AdapterMode::Masked;

    int64_t vocab_size() const { return embedding.rows(); }
    bool is_moe() const;
    bool has_adapters() const;
    // Every parameter tensor with a stable dotted name, deterministic order.
    std::vector<std::pair<std::string, Tensor>> named_tensors() const;
};

ModelParams init_dense_model(const DecoderConfig& config, Rng& rng);

struct ForwardOptions {
    bool train_mode = false;  // enables gating noise (needs noise_rng)
    Rng* noise_rng = nullptr;
    bool lora_all_tokens = false;   // adapters fire on every token
    bool diag_all_experts = false;  // bypass routing: all experts at weight 1
    bool renormalize_gates = false;
    RoutingTraceSink* trace = nullptr;
    int64_t* expert_eval_counter = nullptr;  // incremented once per (token, expert)
    // Auxiliary load-balance term (importance CoV²) summed over MoE layers;
    // written when aux_out is non-null and train_mode is on.
    Tensor* aux_out = nullptr;
};

// Full causal forward pass: token embedding, rotary-position multi-head
// attention (with optional partial low-rank adapters), dense-or-MoE FFN,
// final norm, head projection. Returns [T, V] logits.
Tensor decoder_forward(Tape& tape, const ModelParams& model, std::span<const int32_t> ids,
                       const ForwardOptions& opts = {});

// SwiGLU forward of one FFN on activations [T, d_model].
Tensor swiglu_ffn_forward(Tape& tape, const DenseFFN& ffn, const Tensor& x);

struct SamplingConfig {
    bool greedy = true;
    double temperature = 1.0;
    int top_k = 0;  // 0 = no truncation
};

std::vector<int32_t> generate(const ModelParams& model, std::span<const int32_t> prompt, int max_new,
                              const SamplingConfig& sampling, uint64_t seed,
                              std::optional<int32_t> stop_token = std::nullopt);

}  // namespace mmoe
