#include "mmoe/plora.hpp"

#include <cmath>

namespace mmoe {

std::vector<uint8_t> modality_mask_from_tokens(std::span<const int32_t> ids, const VocabLayout& layout) {
    std::vector<uint8_t> mask(ids.size(), 0);
    for (size_t t = 0; t < ids.size(); ++t) {
        if (layout.is_text(ids[t])) continue;
        if (layout.is_new(ids[t])) {
            mask[t] = 1;
            continue;
        }
        throw ValueError("modality_mask: token id " + std::to_string(ids[t]) +
                         " outside text and new-modality ranges at position " + std::to_string(t));
    }
    return mask;
}

Tensor plora_linear_forward(Tape& tape, const Tensor& w, const Tensor& bias, const PLoRAAdapter& adapter,
                            const Tensor& x, std::span<const uint8_t> mask) {
    if (static_cast<int64_t>(mask.size()) != x.rows())
        throw ShapeError("plora_linear_forward: mask length " + std::to_string(mask.size()) + " vs " +
                         std::to_string(x.rows()) + " tokens");
    Tensor base = tape.linear(x, w);
    if (bias.defined()) base = tape.add_row_bias(base, bias);

    std::vector<int64_t> rows;
    for (size_t t = 0; t < mask.size(); ++t)
        if (mask[t]) rows.push_back(static_cast<int64_t>(t));
    if (rows.empty()) return base;

    Tensor xv = tape.gather_rows(x, rows);
    Tensor delta = tape.scale(tape.linear(tape.linear(xv, adapter.a), adapter.b), adapter.scale());
    return tape.scatter_add_rows(base, delta, std::move(rows));
}

void attach_adapters(ModelParams& model, const AdapterTargets& targets, int rank, double alpha, uint64_t seed) {
    if (!model.is_moe()) throw ValueError("attach_adapters: model must be in MoE form first");
    if (rank < 1) throw ValueError("attach_adapters: rank must be >= 1");
    if (model.has_adapters()) throw ValueError("attach_adapters: adapters already attached");
    Rng rng(seed);
    const int64_t d = model.config.d_model;
    for (size_t i = 0; i < model.layers.size(); ++i) {
        auto& layer = model.layers[i];
        LayerAdapters ads;
        auto make = [&](ProjTarget t, Tensor& base_w) -> std::optional<PLoRAAdapter> {
            PLoRAAdapter a;
            a.rank = rank;
            a.alpha = alpha;
            const std::string p = "layer." + std::to_string(i) + "." + proj_target_name(t) + ".plora.";
            a.a = Tensor::randn({rank, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true);
            a.a->name = p + "A";
            a.b = Tensor::zeros({d, rank}, true);
            a.b->name = p + "B";
            base_w->requires_grad = false;
            return a;
        };
        if (targets.query) ads.q = make(ProjTarget::Query, layer.attn.w_q);
        if (targets.key) ads.k = make(ProjTarget::Key, layer.attn.w_k);
        if (targets.value) ads.v = make(ProjTarget::Value, layer.attn.w_v);
        if (targets.out) ads.o = make(ProjTarget::Out, layer.attn.w_o);
        layer.adapters = std::move(ads);
    }
}

int64_t adapter_param_count(const ModelParams& model) {
    int64_t total = 0;
    for (const auto& layer : model.layers) {
        if (!layer.adapters) continue;
        for (const auto* slot : {&layer.adapters->q, &layer.adapters->k, &layer.adapters->v, &layer.adapters->o}) {
            if (!slot->has_value()) continue;
            const auto& a = **slot;
            total += static_cast<int64_t>(a.rank) * (a.a.cols() + a.b.rows());
        }
    }
    return total;
}

}  // namespace mmoe
