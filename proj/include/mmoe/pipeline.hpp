#pragma once

#include <functional>
#include <string>

#include "mmoe/config.hpp"
#include "mmoe/train.hpp"

namespace mmoe {

struct ConvertReport {
    double max_deviation = 0.0;
    int n_experts = 0, top_k = 0;
};

// Dense→MoE conversion with verification: every layer's summed-expert output
// is checked against its parent FFN on random batches; the MoE checkpoint is
// only written when the worst deviation stays below abort_above.
ConvertReport convert_command(const std::string& dense_ckpt, const std::string& out_ckpt, int n_experts, int top_k,
                              uint64_t seed, double noise_bias_init = -10.0, int inputs_per_layer = 100,
                              double abort_above = 1e-6);

struct AnalyzeReport {
    std::vector<RedundancyDelta> redundancy;
    double exclusivity_first = 0.0, exclusivity_last = 0.0;
    std::string trace_before_path, trace_after_path;
};

// Routing diagnostics between two checkpoints on a shared probe dataset:
// trace files, co-activation and histogram CSVs, exclusivity table, and the
// per-layer redundancy chart.
AnalyzeReport analyze_command(const std::string& before_ckpt, const std::string& after_ckpt,
                              const std::string& probe_dataset, const std::string& out_dir, int top_m = 0);

struct PipelineOptions {
    RunConfig config;
    std::string out_dir;
    bool low_only = false;
    bool f32_checkpoints = false;
    std::function<void(const std::string&)> log;  // stage progress lines
};

struct PipelineSummary {
    std::string summary_json;  // exact bytes written to reports/summary.json
    double ppl_text_base = 0.0, ppl_text_final = 0.0, ppl_image_final = 0.0;
};

// Full desk pipeline: text pretraining, dense→MoE conversion (verified), MoE
// text warmup, vocabulary expansion + initialization, two-stage multimodal
// fine-tuning, evaluation, and routing analytics. Writes ckpt/, traces/,
// curves/, reports/ under out_dir. Deterministic for a fixed config.
PipelineSummary run_pipeline(const PipelineOptions& opts);

}  // namespace mmoe
