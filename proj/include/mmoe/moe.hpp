#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mmoe/decoder.hpp"

namespace mmoe {

// Splits an FFN into n_experts equal slices by a seeded random partition of
// its intermediate neurons. Summed back, the slices reproduce the parent
// exactly: SwiGLU decomposes along the intermediate dimension.
std::vector<ExpertSlice> partition_ffn(const DenseFFN& ffn, int n_experts, uint64_t seed);

// Fresh router: zero gate weights (uniform initial scores) and a noise gate
// whose softplus bias starts deeply negative, so initial noise is ~4.5e-5.
Router make_router(int n_experts, int d_model, int top_k, double noise_bias_init = -10.0);

// Per-token expert scores, rows summing to 1. Training mode perturbs the gate
// logits with eps ⊙ softplus(W_noise·x + b_noise), eps ~ N(0,1); eval mode is
// noise-free and deterministic.
Tensor gate_scores(Tape& tape, const Router& router, const Tensor& x, bool train_mode, Rng* noise_rng);

// Keeps the K highest scores with their raw values (no renormalization);
// ties break toward the lower expert index.
RoutingDecision select_top_k(std::span<const double> scores, int k);

struct MoEForwardResult {
    Tensor output;
    std::vector<RoutingDecision> decisions;  // one per token
};

struct MoEForwardOptions {
    bool train_mode = false;
    Rng* noise_rng = nullptr;
    bool diag_all_experts = false;
    bool renormalize_gates = false;
    int64_t* expert_eval_counter = nullptr;
    Tensor* aux_out = nullptr;  // accumulates importance-CoV² load-balance term
    Tape* aux_tape = nullptr;
};

MoEForwardResult moe_layer_forward(Tape& tape, const MoELayer& layer, const Tensor& x,
                                   const MoEForwardOptions& opts = {});

// Max |Σ_i expert_i(x) − parent(x)| over a batch of activation rows.
// Throws if the slices are not a complete disjoint partition of the parent.
double dense_equivalence_check(const DenseFFN& parent, std::span<const ExpertSlice> experts,
                               const Tensor& x_batch);

struct LoadBalanceStats {
    std::vector<double> fractions;  // per expert, sums to 1
    double cov = 0.0;               // coefficient of variation of the fractions
};

LoadBalanceStats load_balance_stats(std::span<const RoutingDecision> decisions, int n_experts);

// Replaces every dense FFN with an MoE layer built by partition_ffn plus a
// fresh router. The dense model is consumed; attention and norms carry over.
void convert_to_moe(ModelParams& model, int n_experts, int top_k, uint64_t seed,
                    double noise_bias_init = -10.0);

}  // namespace mmoe
