#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mmoe/analytics.hpp"
#include "mmoe/data.hpp"
#include "mmoe/decoder.hpp"
#include "mmoe/vocab.hpp"

namespace mmoe {

enum class TrainMode { PLoRA, LoRA, FrozenAdapterOnly };
TrainMode train_mode_from_string(const std::string& s);
const char* train_mode_name(TrainMode m);

// Which tensors the optimizer may touch; everything else is frozen in the
// same pass (requires_grad cleared).
enum class TrainableSetKind {
    DenseAll,          // text pretraining of the dense model
    RouterAndExperts,  // post-conversion text adaptation
    ExpertsOnly,       // expert settling with the router untouched
    Multimodal,        // new embed/head rows + adapters + routers + experts
    MultimodalFrozenAdapterOnly,  // as Multimodal but routers/experts stay frozen
};

struct TrainableSet {
    std::vector<Tensor> tensors;
    std::vector<std::string> names;
};

TrainableSet apply_trainable_set(ModelParams& model, TrainableSetKind kind);

struct TrainConfig {
    double lr_max = 2e-3;
    double lr_min = 2e-4;
    int warmup_steps = 50;
    int64_t total_steps = 0;  // schedule horizon; 0 = derive from data size
    double beta1 = 0.9, beta2 = 0.95, adam_eps = 1e-8;
    double weight_decay = 0.1;  // applied to expert/router tensors only
    int batch_size = 8;
    int grad_accum = 1;
    int epochs = 1;
    uint64_t seed = 1;
    bool lora_all_tokens = false;  // adapters fire on every token
    double aux_load_balance_weight = 0.0;
    bool renormalize_gates = false;
    bool check_finite = false;
};

// Piecewise closed form: linear 0→lr_max over warmup_steps, then cosine down
// to lr_min at total_steps.
double lr_at(int64_t step, const TrainConfig& cfg);

struct StepLog {
    int64_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<StepLog> curve;
    int64_t steps = 0;
};

struct TrainHooks {
    std::function<void(int epoch)> on_epoch_end;
};

// AdamW on the currently-trainable tensors. Deterministic for a fixed seed:
// data order, gating noise, and reduction order are all pinned.
TrainResult train(ModelParams& model, const std::vector<std::vector<int32_t>>& sequences, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

// Loss of one packed batch on the given tape (position-weighted mean over
// the batch). Pad slots are loss-masked; their input ids are replaced by 0
// before embedding, which causality keeps invisible to unmasked positions.
Tensor batch_loss(Tape& tape, const ModelParams& model, const PackedBatch& batch, const ForwardOptions& fwd);

enum class PositionFilter { TextOnly, ImageOnly, All };

// exp(mean NLL) over positions whose target passes the filter. Filtered
// variants renormalize over the matching vocabulary slice, so text perplexity
// is comparable before and after expansion. Eval mode: no gating noise.
double perplexity(const ModelParams& model, const std::vector<std::vector<int32_t>>& sequences,
                  PositionFilter filter);

// Eval-mode routing trace of the model over a probe set.
RoutingTrace collect_trace(const ModelParams& model, const std::vector<std::vector<int32_t>>& probe);

// First step at which the trailing-window mean loss drops below the
// threshold; -1 if never.
int64_t steps_to_threshold(const std::vector<StepLog>& curve, double threshold, int window);

struct MatrixOptions {
    std::vector<TrainMode> modes;
    std::vector<InitScheme> inits;
    std::vector<uint64_t> seeds;
    TrainConfig train;            // per-cell schedule (epochs over the corpus)
    CorpusSpec corpus;            // multimodal training data (shared across cells)
    CorpusSpec probe;             // held-out probe for routing traces
    int64_t eval_text_samples = 256;
    int eval_text_len = 32;
    uint64_t eval_text_seed = 0xe7a1;
    int rank = 8;
    double alpha = 16.0;
    GeometryOptions geometry;
    GwOptions gw_solver;
    int gw_max_anchors = 1024;
    double loss_threshold = 0.0;
    int threshold_window = 16;
};

struct MatrixCellResult {
    TrainMode mode = TrainMode::PLoRA;
    InitScheme init = InitScheme::Random;
    uint64_t seed = 0;
    double ppl_text_before = 0.0, ppl_text_after = 0.0;
    double dppl_text = 0.0;      // after − before
    double dppl_text_rel = 0.0;  // (after − before)/before
    double ppl_image = 0.0;
    int64_t steps_to_threshold = -1;
    std::vector<StepLog> curve;
    RoutingTrace trace_before, trace_after;
};

// Expands, initializes, adapts and fine-tunes one copy of the base model per
// (mode, init, seed) cell. All cells share the corpus, probe set, and data
// order for equal seeds.
std::vector<MatrixCellResult> run_comparison_matrix(const ModelParams& base, const MatrixOptions& opts,
                                                    const std::function<void(const MatrixCellResult&)>& on_cell = {},
                                                    int jobs = 1);

// CSV schema: mode,init,seed,dppl_text,ppl_image,steps_to_threshold.
void write_matrix_csv(const std::vector<MatrixCellResult>& cells, const std::string& path);
void write_curve_csv(const std::vector<StepLog>& curve, const std::string& path);

// Deep copy: fresh storage for every tensor, same values/flags/masks.
ModelParams clone_model(const ModelParams& model);

}  // namespace mmoe
