#include "mmoe/decoder.hpp"

#include <algorithm>
#include <cmath>

#include "mmoe/moe.hpp"
#include "mmoe/plora.hpp"

namespace mmoe {

void DecoderConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ffn < 1) throw ConfigError("decoder: sizes must be positive");
    if (d_model % n_heads != 0) throw ConfigError("decoder: d_model must be divisible by n_heads");
    if ((d_model / n_heads) % 2 != 0) throw ConfigError("decoder: head dim must be even for rotary positions");
    if (vocab_text_size < 1) throw ConfigError("decoder: vocab_text_size must be positive");
    if (max_seq_len < 1) throw ConfigError("decoder: max_seq_len must be positive");
    if (rms_eps <= 0) throw ConfigError("decoder: rms_eps must be > 0");
}

const char* proj_target_name(ProjTarget t) {
    switch (t) {
        case ProjTarget::Query: return "q";
        case ProjTarget::Key: return "k";
        case ProjTarget::Value: return "v";
        case ProjTarget::Out: return "o";
    }
    return "?";
}

std::optional<PLoRAAdapter>& LayerAdapters::slot(ProjTarget t) {
    switch (t) {
        case ProjTarget::Query: return q;
        case ProjTarget::Key: return k;
        case ProjTarget::Value: return v;
        case ProjTarget::Out: return o;
    }
    return q;
}

bool ModelParams::is_moe() const {
    return !layers.empty() && layers.front().is_moe();
}

bool ModelParams::has_adapters() const {
    for (const auto& l : layers)
        if (l.adapters) return true;
    return false;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embedding", embedding);
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string p = "layer." + std::to_string(i) + ".";
        out.emplace_back(p + "attn_gain", l.attn_gain);
        out.emplace_back(p + "ffn_gain", l.ffn_gain);
        out.emplace_back(p + "attn.wq", l.attn.w_q);
        out.emplace_back(p + "attn.wk", l.attn.w_k);
        out.emplace_back(p + "attn.wv", l.attn.w_v);
        out.emplace_back(p + "attn.wo", l.attn.w_o);
        if (l.attn.b_o.defined()) out.emplace_back(p + "attn.bo", l.attn.b_o);
        if (const auto* dense = std::get_if<DenseFFN>(&l.ffn)) {
            out.emplace_back(p + "ffn.w_gate", dense->w_gate);
            out.emplace_back(p + "ffn.w_up", dense->w_up);
            out.emplace_back(p + "ffn.w_down", dense->w_down);
        } else {
            const auto& moe = std::get<MoELayer>(l.ffn);
            out.emplace_back(p + "moe.router.w_g", moe.router.w_g);
            out.emplace_back(p + "moe.router.w_noise", moe.router.w_noise);
            out.emplace_back(p + "moe.router.b_noise", moe.router.b_noise);
            for (size_t e = 0; e < moe.experts.size(); ++e) {
                const std::string ep = p + "moe.expert." + std::to_string(e) + ".";
                out.emplace_back(ep + "w_gate", moe.experts[e].w_gate);
                out.emplace_back(ep + "w_up", moe.experts[e].w_up);
                out.emplace_back(ep + "w_down", moe.experts[e].w_down);
            }
        }
        if (l.adapters) {
            for (ProjTarget t : {ProjTarget::Query, ProjTarget::Key, ProjTarget::Value, ProjTarget::Out}) {
                const auto& slot = const_cast<LayerAdapters&>(*l.adapters).slot(t);
                if (slot) {
                    out.emplace_back(p + proj_target_name(t) + ".plora.A", slot->a);
                    out.emplace_back(p + proj_target_name(t) + ".plora.B", slot->b);
                }
            }
        }
    }
    out.emplace_back("final_gain", final_gain);
    if (!config.tie_head) out.emplace_back("head", head);
    return out;
}

namespace {

Tensor named(Tensor t, std::string name) {
    t->name = std::move(name);
    return t;
}

}  // namespace

ModelParams init_dense_model(const DecoderConfig& config, Rng& rng) {
    config.validate();
    const double std0 = 0.02;
    ModelParams m;
    m.config = config;
    const int64_t d = config.d_model, f = config.d_ffn, v = config.vocab_text_size;
    m.embedding = named(Tensor::randn({v, d}, rng, std0, true), "embedding");
    for (int i = 0; i < config.n_layers; ++i) {
        DecoderLayer layer;
        const std::string p = "layer." + std::to_string(i) + ".";
        layer.attn_gain = named(Tensor::full({d}, 1.0, true), p + "attn_gain");
        layer.ffn_gain = named(Tensor::full({d}, 1.0, true), p + "ffn_gain");
        layer.attn.w_q = named(Tensor::randn({d, d}, rng, std0, true), p + "attn.wq");
        layer.attn.w_k = named(Tensor::randn({d, d}, rng, std0, true), p + "attn.wk");
        layer.attn.w_v = named(Tensor::randn({d, d}, rng, std0, true), p + "attn.wv");
        layer.attn.w_o = named(Tensor::randn({d, d}, rng, std0, true), p + "attn.wo");
        if (config.attn_out_bias) layer.attn.b_o = named(Tensor::zeros({d}, true), p + "attn.bo");
        DenseFFN ffn;
        ffn.w_gate = named(Tensor::randn({f, d}, rng, std0, true), p + "ffn.w_gate");
        ffn.w_up = named(Tensor::randn({f, d}, rng, std0, true), p + "ffn.w_up");
        ffn.w_down = named(Tensor::randn({d, f}, rng, std0, true), p + "ffn.w_down");
        layer.ffn = std::move(ffn);
        m.layers.push_back(std::move(layer));
    }
    m.final_gain = named(Tensor::full({d}, 1.0, true), "final_gain");
    m.head = config.tie_head ? m.embedding : named(Tensor::randn({v, d}, rng, std0, true), "head");
    return m;
}

Tensor swiglu_ffn_forward(Tape& tape, const DenseFFN& ffn, const Tensor& x) {
    Tensor gated = tape.mul(tape.silu(tape.linear(x, ffn.w_gate)), tape.linear(x, ffn.w_up));
    return tape.linear(gated, ffn.w_down);
}

namespace {

Tensor project(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias,
               const std::optional<PLoRAAdapter>& adapter, const std::vector<uint8_t>* mask) {
    if (adapter && mask) return plora_linear_forward(tape, w, bias, *adapter, x, *mask);
    Tensor y = tape.linear(x, w);
    if (bias.defined()) y = tape.add_row_bias(y, bias);
    return y;
}

}  // namespace

Tensor decoder_forward(Tape& tape, const ModelParams& model, std::span<const int32_t> ids,
                       const ForwardOptions& opts) {
    const auto& cfg = model.config;
    const int64_t t_len = static_cast<int64_t>(ids.size());
    if (t_len == 0) throw ValueError("decoder_forward: empty input");
    if (t_len > cfg.max_seq_len)
        throw ValueError("decoder_forward: sequence length " + std::to_string(t_len) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));

    std::vector<uint8_t> mask;
    const std::vector<uint8_t>* mask_ptr = nullptr;
    if (model.has_adapters()) {
        if (opts.lora_all_tokens || model.adapter_mode == AdapterMode::AllTokens) {
            mask.assign(ids.size(), 1);
        } else {
            if (!model.expansion)
                throw ValueError("decoder_forward: adapters attached but no vocabulary layout to derive the modality mask");
            mask = modality_mask_from_tokens(ids, *model.expansion);
        }
        mask_ptr = &mask;
    } else if (model.expansion && opts.trace) {
        mask = modality_mask_from_tokens(ids, *model.expansion);
    }

    const int hd = cfg.d_model / cfg.n_heads;
    const double attn_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor h = tape.embedding_lookup(model.embedding, ids);
    Tensor aux;  // accumulated load-balance term
    for (size_t li = 0; li < model.layers.size(); ++li) {
        const auto& layer = model.layers[li];
        const auto* ad = layer.adapters ? &*layer.adapters : nullptr;

        Tensor a_in = tape.rms_norm(h, layer.attn_gain, cfg.rms_eps);
        Tensor q = project(tape, a_in, layer.attn.w_q, Tensor(), ad ? ad->q : std::nullopt, mask_ptr);
        Tensor k = project(tape, a_in, layer.attn.w_k, Tensor(), ad ? ad->k : std::nullopt, mask_ptr);
        Tensor v = project(tape, a_in, layer.attn.w_v, Tensor(), ad ? ad->v : std::nullopt, mask_ptr);
        q = tape.rope(q, cfg.n_heads, cfg.rope_base);
        k = tape.rope(k, cfg.n_heads, cfg.rope_base);

        std::vector<Tensor> heads;
        heads.reserve(static_cast<size_t>(cfg.n_heads));
        for (int hh = 0; hh < cfg.n_heads; ++hh) {
            Tensor qh = tape.col_slice(q, hh * hd, (hh + 1) * hd);
            Tensor kh = tape.col_slice(k, hh * hd, (hh + 1) * hd);
            Tensor vh = tape.col_slice(v, hh * hd, (hh + 1) * hd);
            Tensor scores = tape.scale(tape.matmul_nt(qh, kh), attn_scale);
            Tensor probs = tape.causal_softmax_rows(scores);
            heads.push_back(tape.matmul(probs, vh));
        }
        Tensor ctx = cfg.n_heads == 1 ? heads[0] : tape.col_concat(heads);
        Tensor attn_out = project(tape, ctx, layer.attn.w_o, layer.attn.b_o, ad ? ad->o : std::nullopt, mask_ptr);
        h = tape.add(h, attn_out);

        Tensor f_in = tape.rms_norm(h, layer.ffn_gain, cfg.rms_eps);
        Tensor ffn_out;
        if (const auto* dense = std::get_if<DenseFFN>(&layer.ffn)) {
            ffn_out = swiglu_ffn_forward(tape, *dense, f_in);
        } else {
            MoEForwardOptions mo;
            mo.train_mode = opts.train_mode;
            mo.noise_rng = opts.noise_rng;
            mo.diag_all_experts = opts.diag_all_experts;
            mo.renormalize_gates = opts.renormalize_gates;
            mo.expert_eval_counter = opts.expert_eval_counter;
            if (opts.aux_out) {
                mo.aux_out = &aux;
                mo.aux_tape = &tape;
            }
            auto res = moe_layer_forward(tape, std::get<MoELayer>(layer.ffn), f_in, mo);
            ffn_out = res.output;
            if (opts.trace) {
                for (int64_t t = 0; t < t_len; ++t)
                    opts.trace->record(static_cast<int>(li), t, !mask.empty() && mask[static_cast<size_t>(t)],
                                       res.decisions[static_cast<size_t>(t)]);
            }
        }
        h = tape.add(h, ffn_out);
    }
    h = tape.rms_norm(h, model.final_gain, cfg.rms_eps);
    if (opts.aux_out) *opts.aux_out = aux;
    return tape.linear(h, model.head);
}

std::vector<int32_t> generate(const ModelParams& model, std::span<const int32_t> prompt, int max_new,
                              const SamplingConfig& sampling, uint64_t seed, std::optional<int32_t> stop_token) {
    if (prompt.empty()) throw ValueError("generate: prompt must be nonempty");
    Rng rng(seed);
    std::vector<int32_t> ids(prompt.begin(), prompt.end());
    const bool greedy = sampling.greedy || sampling.temperature <= 0.0;
    for (int step = 0; step < max_new; ++step) {
        if (static_cast<int64_t>(ids.size()) >= model.config.max_seq_len) break;
        Tape tape(Tape::Mode::NoGrad);
        Tensor logits = decoder_forward(tape, model, ids);
        const int64_t v = logits.cols();
        const double* z = logits->data.data() + (logits.rows() - 1) * v;
        int32_t next = 0;
        if (greedy) {
            for (int64_t i = 1; i < v; ++i)
                if (z[i] > z[next]) next = static_cast<int32_t>(i);
        } else {
            std::vector<std::pair<double, int64_t>> cand(static_cast<size_t>(v));
            for (int64_t i = 0; i < v; ++i) cand[static_cast<size_t>(i)] = {z[i] / sampling.temperature, i};
            std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
                return a.first != b.first ? a.first > b.first : a.second < b.second;
            });
            const size_t keep = sampling.top_k > 0 ? std::min<size_t>(cand.size(), static_cast<size_t>(sampling.top_k))
                                                   : cand.size();
            double m = cand[0].first, sum = 0.0;
            std::vector<double> w(keep);
            for (size_t i = 0; i < keep; ++i) {
                w[i] = std::exp(cand[i].first - m);
                sum += w[i];
            }
            double u = rng.uniform() * sum, acc = 0.0;
            next = static_cast<int32_t>(cand[keep - 1].second);
            for (size_t i = 0; i < keep; ++i) {
                acc += w[i];
                if (u < acc) {
                    next = static_cast<int32_t>(cand[i].second);
                    break;
                }
            }
        }
        ids.push_back(next);
        if (stop_token && next == *stop_token) break;
    }
    return std::vector<int32_t>(ids.begin() + static_cast<int64_t>(prompt.size()), ids.end());
}

}  // namespace mmoe
