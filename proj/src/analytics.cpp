#include "mmoe/analytics.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "mmoe/util.hpp"

namespace mmoe {

void RoutingTrace::validate() const {
    for (const auto& r : records) {
        if (static_cast<int>(r.experts.size()) != top_k)
            throw ValueError("routing trace: record with " + std::to_string(r.experts.size()) +
                             " experts, expected K = " + std::to_string(top_k));
        if (r.layer >= n_layers) throw ValueError("routing trace: layer out of range");
        std::vector<uint16_t> sorted(r.experts);
        std::sort(sorted.begin(), sorted.end());
        for (size_t i = 0; i < sorted.size(); ++i) {
            if (sorted[i] >= n_experts) throw ValueError("routing trace: expert id out of range");
            if (i > 0 && sorted[i] == sorted[i - 1]) throw ValueError("routing trace: duplicate expert in record");
        }
    }
}

void TraceCollector::record(int layer, int64_t position, bool new_modality, const RoutingDecision& d) {
    TraceRecord r;
    r.layer = static_cast<uint16_t>(layer);
    r.position = static_cast<uint32_t>(position_base_ + position);
    r.modality = new_modality ? 1 : 0;
    r.experts.assign(d.experts.begin(), d.experts.end());
    trace.records.push_back(std::move(r));
}

void write_trace(const RoutingTrace& trace, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("write_trace: cannot open " + path);
    f.write("RTRC", 4);
    const uint32_t version = 1;
    f.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const uint16_t n = static_cast<uint16_t>(trace.n_experts);
    const uint16_t k = static_cast<uint16_t>(trace.top_k);
    const uint16_t layers = static_cast<uint16_t>(trace.n_layers);
    f.write(reinterpret_cast<const char*>(&n), sizeof(n));
    f.write(reinterpret_cast<const char*>(&k), sizeof(k));
    f.write(reinterpret_cast<const char*>(&layers), sizeof(layers));
    for (const auto& r : trace.records) {
        f.write(reinterpret_cast<const char*>(&r.layer), sizeof(r.layer));
        f.write(reinterpret_cast<const char*>(&r.position), sizeof(r.position));
        f.write(reinterpret_cast<const char*>(&r.modality), sizeof(r.modality));
        f.write(reinterpret_cast<const char*>(r.experts.data()),
                static_cast<std::streamsize>(r.experts.size() * sizeof(uint16_t)));
    }
    if (!f) throw IoError("write_trace: write failed for " + path);
}

RoutingTrace read_trace(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_trace: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "RTRC") throw IoError("read_trace: bad magic in " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), sizeof(version));
    if (version != 1) throw IoError("read_trace: unsupported version in " + path);
    uint16_t n = 0, k = 0, layers = 0;
    f.read(reinterpret_cast<char*>(&n), sizeof(n));
    f.read(reinterpret_cast<char*>(&k), sizeof(k));
    f.read(reinterpret_cast<char*>(&layers), sizeof(layers));
    if (!f) throw IoError("read_trace: truncated header in " + path);
    RoutingTrace trace;
    trace.n_experts = n;
    trace.top_k = k;
    trace.n_layers = layers;
    while (true) {
        TraceRecord r;
        f.read(reinterpret_cast<char*>(&r.layer), sizeof(r.layer));
        if (f.eof()) break;
        f.read(reinterpret_cast<char*>(&r.position), sizeof(r.position));
        f.read(reinterpret_cast<char*>(&r.modality), sizeof(r.modality));
        r.experts.resize(k);
        f.read(reinterpret_cast<char*>(r.experts.data()), static_cast<std::streamsize>(k * sizeof(uint16_t)));
        if (!f) throw IoError("read_trace: truncated record in " + path);
        trace.records.push_back(std::move(r));
    }
    trace.validate();
    return trace;
}

ECAMatrix expert_coactivation(const RoutingTrace& trace, int layer) {
    if (trace.records.empty()) throw ValueError("expert_coactivation: empty trace");
    const int n = trace.n_experts;
    ECAMatrix m;
    m.n = n;
    m.eca.assign(static_cast<size_t>(n) * static_cast<size_t>(n), 0.0);
    m.activations.assign(static_cast<size_t>(n), 0);
    m.pair_counts.assign(static_cast<size_t>(n) * static_cast<size_t>(n), 0);
    for (const auto& r : trace.records) {
        if (r.layer != layer) continue;
        for (uint16_t a : r.experts) {
            ++m.activations[a];
            for (uint16_t b : r.experts)
                if (a != b) ++m.pair_counts[static_cast<size_t>(a) * static_cast<size_t>(n) + b];
        }
    }
    for (int i = 0; i < n; ++i) {
        if (!m.defined(i)) continue;
        for (int j = 0; j < n; ++j) {
            const size_t idx = static_cast<size_t>(i) * static_cast<size_t>(n) + static_cast<size_t>(j);
            m.eca[idx] = i == j ? 1.0
                                : static_cast<double>(m.pair_counts[idx]) /
                                      static_cast<double>(m.activations[static_cast<size_t>(i)]);
        }
    }
    return m;
}

double average_layer_redundancy(const ECAMatrix& m) {
    // With K experts per record, every defined row of the matrix sums to
    // exactly K-1, so a mean over all entries is the constant (K-1)/(N-1)
    // no matter how routing is structured. The meaningful average is over
    // the co-activations actually observed: concentrated pairings score
    // near 1, fully spread routing approaches (K-1)/(N-1).
    double sum = 0.0;
    int64_t count = 0;
    for (int i = 0; i < m.n; ++i) {
        if (!m.defined(i)) continue;
        for (int j = 0; j < m.n; ++j) {
            if (i == j || m.pair_counts[static_cast<size_t>(i) * static_cast<size_t>(m.n) + static_cast<size_t>(j)] == 0)
                continue;
            sum += m.at(i, j);
            ++count;
        }
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

std::vector<int64_t> routing_preference_histogram(const RoutingTrace& trace, int layer, bool new_modality) {
    if (trace.records.empty()) throw ValueError("routing_preference_histogram: empty trace");
    std::vector<int64_t> hist(static_cast<size_t>(trace.n_experts), 0);
    for (const auto& r : trace.records) {
        if (r.layer != layer) continue;
        if ((r.modality != 0) != new_modality) continue;
        for (uint16_t e : r.experts) ++hist[e];
    }
    return hist;
}

double exclusivity_score(std::span<const int64_t> hist_image, std::span<const int64_t> hist_text, int top_m) {
    const int n = static_cast<int>(hist_image.size());
    if (static_cast<int>(hist_text.size()) != n) throw ShapeError("exclusivity_score: histogram length mismatch");
    if (top_m < 1 || top_m > n)
        throw ValueError("exclusivity_score: top_m " + std::to_string(top_m) + " out of range for " +
                         std::to_string(n) + " experts");
    auto nonzero = [](std::span<const int64_t> h) {
        for (int64_t v : h)
            if (v != 0) return true;
        return false;
    };
    if (!nonzero(hist_image) || !nonzero(hist_text)) throw ValueError("exclusivity_score: a histogram is all-zero");

    auto top_set = [&](std::span<const int64_t> h) {
        std::vector<int> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::partial_sort(order.begin(), order.begin() + top_m, order.end(), [&](int a, int b) {
            if (h[static_cast<size_t>(a)] != h[static_cast<size_t>(b)]) return h[static_cast<size_t>(a)] > h[static_cast<size_t>(b)];
            return a < b;
        });
        return std::vector<int>(order.begin(), order.begin() + top_m);
    };
    const auto ti = top_set(hist_image);
    const auto tt = top_set(hist_text);
    int overlap = 0;
    for (int a : ti)
        for (int b : tt)
            if (a == b) ++overlap;
    return 1.0 - static_cast<double>(overlap) / static_cast<double>(top_m);
}

std::vector<RedundancyDelta> redundancy_delta_report(const RoutingTrace& before, const RoutingTrace& after) {
    if (before.n_experts != after.n_experts || before.top_k != after.top_k || before.n_layers != after.n_layers)
        throw ValueError("redundancy_delta_report: traces disagree on N/K/layers");
    std::vector<RedundancyDelta> rows;
    for (int layer = 0; layer < before.n_layers; ++layer) {
        RedundancyDelta d;
        d.layer = layer;
        d.before = average_layer_redundancy(expert_coactivation(before, layer));
        d.after = average_layer_redundancy(expert_coactivation(after, layer));
        d.delta = d.after - d.before;
        rows.push_back(d);
    }
    return rows;
}

void write_eca_csv(const RoutingTrace& trace, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("write_eca_csv: cannot open " + path);
    f << "layer,expert_i,expert_j,eca\n";
    f.precision(17);
    for (int layer = 0; layer < trace.n_layers; ++layer) {
        const auto m = expert_coactivation(trace, layer);
        for (int i = 0; i < m.n; ++i) {
            if (!m.defined(i)) continue;
            for (int j = 0; j < m.n; ++j) f << layer << "," << i << "," << j << "," << m.at(i, j) << "\n";
        }
    }
}

void write_histogram_csv(const RoutingTrace& trace, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("write_histogram_csv: cannot open " + path);
    f << "layer,expert,modality,count\n";
    for (int layer = 0; layer < trace.n_layers; ++layer) {
        for (int modality = 0; modality < 2; ++modality) {
            const auto hist = routing_preference_histogram(trace, layer, modality == 1);
            for (int e = 0; e < trace.n_experts; ++e)
                f << layer << "," << e << "," << (modality ? "image" : "text") << "," << hist[static_cast<size_t>(e)]
                  << "\n";
        }
    }
}

void write_redundancy_delta_csv(const std::vector<RedundancyDelta>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("write_redundancy_delta_csv: cannot open " + path);
    f << "layer,eca_before,eca_after,delta\n";
    f.precision(17);
    for (const auto& r : rows) f << r.layer << "," << r.before << "," << r.after << "," << r.delta << "\n";
}

}  // namespace mmoe
