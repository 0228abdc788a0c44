#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmoe/decoder.hpp"

namespace mmoe {

struct TraceRecord {
    uint16_t layer = 0;
    uint32_t position = 0;
    uint8_t modality = 0;  // 1 = new-modality token
    std::vector<uint16_t> experts;  // exactly K distinct ids, descending score
};

struct RoutingTrace {
    int n_experts = 0;
    int top_k = 0;
    int n_layers = 0;
    std::vector<TraceRecord> records;
    // run metadata, not serialized
    std::string model_id, dataset_id;

    void validate() const;
};

// Collects decisions straight off the forward pass.
class TraceCollector : public RoutingTraceSink {
public:
    TraceCollector(int n_experts, int top_k, int n_layers) {
        trace.n_experts = n_experts;
        trace.top_k = top_k;
        trace.n_layers = n_layers;
    }
    void record(int layer, int64_t position, bool new_modality, const RoutingDecision& d) override;
    void set_position_base(int64_t base) { position_base_ = base; }

    RoutingTrace trace;

private:
    int64_t position_base_ = 0;
};

// Binary trace file: magic "RTRC", u32 version, u16 N, u16 K, u16 layer
// count, then records of (u16 layer, u32 position, u8 modality, K×u16
// experts) until end of file.
void write_trace(const RoutingTrace& trace, const std::string& path);
RoutingTrace read_trace(const std::string& path);

// Co-activation matrix of one layer. Entry (i,j) is the fraction of records
// containing expert i that also contain expert j; the diagonal is 1 where
// defined. Rows of never-activated experts are undefined and excluded from
// averages.
struct ECAMatrix {
    int n = 0;
    std::vector<double> eca;           // n×n
    std::vector<int64_t> activations;  // per-expert record counts
    std::vector<int64_t> pair_counts;  // n×n simultaneous-activation counts

    double at(int i, int j) const { return eca[static_cast<size_t>(i) * static_cast<size_t>(n) + static_cast<size_t>(j)]; }
    bool defined(int i) const { return activations[static_cast<size_t>(i)] > 0; }
};

ECAMatrix expert_coactivation(const RoutingTrace& trace, int layer);

// Mean over the observed off-diagonal co-activations (defined rows, pairs
// with a nonzero simultaneous count). Concentrated expert pairings give
// values near 1; fully diversified routing approaches (K-1)/(N-1).
double average_layer_redundancy(const ECAMatrix& m);

// Token-slot counts per expert for one layer, restricted to one modality.
std::vector<int64_t> routing_preference_histogram(const RoutingTrace& trace, int layer, bool new_modality);

// 1 − overlap of the top-m expert sets of the two histograms (ties toward
// the lower index). 1 = fully exclusive pathways, 0 = identical.
double exclusivity_score(std::span<const int64_t> hist_image, std::span<const int64_t> hist_text, int top_m);

struct RedundancyDelta {
    int layer = 0;
    double before = 0.0, after = 0.0, delta = 0.0;
};

std::vector<RedundancyDelta> redundancy_delta_report(const RoutingTrace& before, const RoutingTrace& after);

void write_eca_csv(const RoutingTrace& trace, const std::string& path);
void write_histogram_csv(const RoutingTrace& trace, const std::string& path);
void write_redundancy_delta_csv(const std::vector<RedundancyDelta>& rows, const std::string& path);

}  // namespace mmoe
