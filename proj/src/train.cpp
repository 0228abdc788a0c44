#include "mmoe/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "mmoe/moe.hpp"
#include "mmoe/plora.hpp"

namespace mmoe {

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "plora") return TrainMode::PLoRA;
    if (s == "lora") return TrainMode::LoRA;
    if (s == "frozen-adapter-only") return TrainMode::FrozenAdapterOnly;
    throw ConfigError("unknown train mode '" + s + "' (expected plora|lora|frozen-adapter-only)");
}

const char* train_mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::PLoRA: return "plora";
        case TrainMode::LoRA: return "lora";
        case TrainMode::FrozenAdapterOnly: return "frozen-adapter-only";
    }
    return "?";
}

namespace {

bool is_moe_tensor(const std::string& name) { return name.find(".moe.") != std::string::npos; }
bool is_adapter_tensor(const std::string& name) { return name.find(".plora.") != std::string::npos; }
bool is_vocab_matrix(const std::string& name) { return name == "embedding" || name == "head"; }

}  // namespace

TrainableSet apply_trainable_set(ModelParams& model, TrainableSetKind kind) {
    if ((kind == TrainableSetKind::Multimodal || kind == TrainableSetKind::MultimodalFrozenAdapterOnly) &&
        !model.expansion)
        throw ValueError("apply_trainable_set: multimodal set needs an expanded vocabulary");
    TrainableSet set;
    for (auto& [name, t] : model.named_tensors()) {
        bool trainable = false;
        switch (kind) {
            case TrainableSetKind::DenseAll:
                trainable = !is_adapter_tensor(name);
                break;
            case TrainableSetKind::RouterAndExperts:
                trainable = is_moe_tensor(name);
                break;
            case TrainableSetKind::ExpertsOnly:
                trainable = name.find(".moe.expert.") != std::string::npos;
                break;
            case TrainableSetKind::Multimodal:
                trainable = is_moe_tensor(name) || is_adapter_tensor(name) || is_vocab_matrix(name);
                break;
            case TrainableSetKind::MultimodalFrozenAdapterOnly:
                trainable = is_adapter_tensor(name) || is_vocab_matrix(name);
                break;
        }
        t->requires_grad = trainable;
        if (trainable) {
            set.tensors.push_back(t);
            set.names.push_back(name);
        }
    }
    return set;
}

double lr_at(int64_t step, const TrainConfig& cfg) {
    if (step < 0) throw ValueError("lr_at: negative step");
    const int64_t warmup = cfg.warmup_steps;
    const int64_t total = std::max<int64_t>(cfg.total_steps, warmup + 1);
    if (warmup > 0 && step <= warmup)
        return cfg.lr_max * static_cast<double>(step) / static_cast<double>(warmup);
    if (step >= total) return cfg.lr_min;
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

Tensor batch_loss(Tape& tape, const ModelParams& model, const PackedBatch& batch, const ForwardOptions& fwd) {
    int64_t total_count = 0;
    std::vector<int64_t> counts(batch.inputs.size(), 0);
    for (size_t r = 0; r < batch.inputs.size(); ++r) {
        for (uint8_t m : batch.ignore_mask[r])
            if (!m) ++counts[r];
        total_count += counts[r];
    }
    if (total_count == 0) throw ValueError("batch_loss: batch has no unmasked positions");

    Tensor acc;
    Tensor aux_acc;
    int64_t aux_rows = 0;
    for (size_t r = 0; r < batch.inputs.size(); ++r) {
        if (counts[r] == 0) continue;
        std::vector<int32_t> ids(batch.inputs[r]);
        for (auto& id : ids)
            if (id == batch.pad_token) id = 0;
        ForwardOptions row_fwd = fwd;
        Tensor row_aux;
        if (fwd.aux_out) row_fwd.aux_out = &row_aux;
        Tensor logits = decoder_forward(tape, model, ids, row_fwd);
        Tensor loss = tape.cross_entropy_next_token(logits, batch.targets[r], batch.ignore_mask[r]);
        Tensor weighted = tape.scale(loss, static_cast<double>(counts[r]) / static_cast<double>(total_count));
        acc = acc.defined() ? tape.add(acc, weighted) : weighted;
        if (fwd.aux_out && row_aux.defined()) {
            aux_acc = aux_acc.defined() ? tape.add(aux_acc, row_aux) : row_aux;
            ++aux_rows;
        }
    }
    if (fwd.aux_out && aux_acc.defined())
        *fwd.aux_out = tape.scale(aux_acc, 1.0 / static_cast<double>(aux_rows));
    return acc;
}

namespace {

struct AdamSlot {
    std::vector<double> m, v;
};

void adamw_step(std::vector<Tensor>& params, const std::vector<std::string>& names,
                std::vector<AdamSlot>& slots, int64_t t, double lr, const TrainConfig& cfg) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        auto& slot = slots[pi];
        if (slot.m.empty()) {
            slot.m.assign(p->data.size(), 0.0);
            slot.v.assign(p->data.size(), 0.0);
        }
        const double wd = is_moe_tensor(names[pi]) ? cfg.weight_decay : 0.0;
        p->ensure_grad();
        const int64_t cols = p.cols();
        for (int64_t i = 0; i < p.size(); ++i) {
            if (!p->row_trainable(i / std::max<int64_t>(cols, 1))) continue;
            const double g = p->grad[static_cast<size_t>(i)];
            double& m = slot.m[static_cast<size_t>(i)];
            double& v = slot.v[static_cast<size_t>(i)];
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            const double mh = m / bc1;
            const double vh = v / bc2;
            double& x = p->data[static_cast<size_t>(i)];
            if (wd > 0.0) x -= lr * wd * x;
            x -= lr * mh / (std::sqrt(vh) + cfg.adam_eps);
        }
    }
}

std::string batch_preview(const PackedBatch& batch) {
    std::ostringstream os;
    os << batch.inputs.size() << " sequences, first: [";
    if (!batch.inputs.empty())
        for (size_t i = 0; i < std::min<size_t>(batch.inputs[0].size(), 12); ++i)
            os << (i ? " " : "") << batch.inputs[0][i];
    os << (batch.inputs.empty() || batch.inputs[0].size() <= 12 ? "]" : " ...]");
    return os.str();
}

}  // namespace

TrainResult train(ModelParams& model, const std::vector<std::vector<int32_t>>& sequences, const TrainConfig& cfg,
                  const TrainHooks& hooks) {
    TrainResult res;
    if (sequences.empty() || cfg.epochs == 0) return res;

    std::vector<Tensor> params;
    std::vector<std::string> names;
    for (auto& [name, t] : model.named_tensors()) {
        if (!t->requires_grad) continue;
        params.push_back(t);
        names.push_back(name);
    }
    if (params.empty()) throw ValueError("train: nothing is trainable");
    std::vector<AdamSlot> slots(params.size());

    const int64_t batches_per_epoch =
        (static_cast<int64_t>(sequences.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t opt_steps_per_epoch = (batches_per_epoch + cfg.grad_accum - 1) / cfg.grad_accum;
    TrainConfig sched = cfg;
    if (sched.total_steps <= 0) sched.total_steps = opt_steps_per_epoch * cfg.epochs;

    Rng noise_rng(derive_seed(cfg.seed, 0x4e4f495345));
    const int32_t pad = model.expansion ? static_cast<int32_t>(model.expansion->total())
                                        : static_cast<int32_t>(model.config.vocab_text_size);

    int64_t global_step = 0;
    int64_t adam_t = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::vector<int32_t>> arranged(sequences);
        Rng order_rng(derive_seed(cfg.seed, 0xe70c000 + static_cast<uint64_t>(epoch)));
        order_rng.shuffle(arranged);
        auto batches = pack_batches(arranged, cfg.batch_size, model.config.max_seq_len + 1, pad);

        for (size_t b0 = 0; b0 < batches.size(); b0 += static_cast<size_t>(cfg.grad_accum)) {
            const size_t b1 = std::min(batches.size(), b0 + static_cast<size_t>(cfg.grad_accum));
            for (auto& p : params) p->zero_grad();
            double step_loss = 0.0;
            for (size_t b = b0; b < b1; ++b) {
                Tape tape;
                tape.set_check_finite(cfg.check_finite);
                ForwardOptions fwd;
                fwd.train_mode = true;
                fwd.noise_rng = &noise_rng;
                fwd.lora_all_tokens = cfg.lora_all_tokens;
                fwd.renormalize_gates = cfg.renormalize_gates;
                Tensor aux;
                if (cfg.aux_load_balance_weight > 0.0 && model.is_moe()) fwd.aux_out = &aux;
                Tensor loss = batch_loss(tape, model, batches[b], fwd);
                const double loss_val = loss.item();
                if (!std::isfinite(loss_val))
                    throw NumericError("train: non-finite loss at step " + std::to_string(global_step) + " (" +
                                       batch_preview(batches[b]) + ")");
                step_loss += loss_val;
                Tensor total = loss;
                if (aux.defined()) total = tape.add(total, tape.scale(aux, cfg.aux_load_balance_weight));
                if (b1 - b0 > 1) total = tape.scale(total, 1.0 / static_cast<double>(b1 - b0));
                backward_pass(tape, total);
            }
            const double lr = lr_at(global_step + 1, sched);
            adamw_step(params, names, slots, ++adam_t, lr, sched);
            res.curve.push_back({global_step, step_loss / static_cast<double>(b1 - b0), lr});
            ++global_step;
        }
        if (hooks.on_epoch_end) hooks.on_epoch_end(epoch);
    }
    res.steps = global_step;
    return res;
}

namespace {

// Stable log-sum-exp over a logits slice.
double slice_lse(const double* z, int64_t begin, int64_t end) {
    double m = z[begin];
    for (int64_t i = begin + 1; i < end; ++i) m = std::max(m, z[i]);
    double s = 0.0;
    for (int64_t i = begin; i < end; ++i) s += std::exp(z[i] - m);
    return m + std::log(s);
}

}  // namespace

double perplexity(const ModelParams& model, const std::vector<std::vector<int32_t>>& sequences,
                  PositionFilter filter) {
    if (sequences.empty()) throw ValueError("perplexity: empty evaluation set");
    const int64_t v = model.vocab_size();
    int64_t text_end = model.config.vocab_text_size;
    int64_t new_begin = text_end, new_end = v;
    if (model.expansion) {
        text_end = model.expansion->vocab_text;
        new_begin = text_end;
        new_end = model.expansion->total();
    } else if (filter == PositionFilter::ImageOnly) {
        throw ValueError("perplexity: image filter needs an expanded vocabulary");
    }

    double nll = 0.0;
    int64_t count = 0;
    for (const auto& seq : sequences) {
        if (seq.size() < 2) continue;
        std::span<const int32_t> inputs(seq.data(), seq.size() - 1);
        Tape tape(Tape::Mode::NoGrad);
        Tensor logits = decoder_forward(tape, model, inputs);
        for (size_t t = 0; t + 1 < seq.size(); ++t) {
            const int32_t target = seq[t + 1];
            int64_t begin = 0, end = v;
            if (filter == PositionFilter::TextOnly) {
                if (target >= text_end) continue;
                begin = 0;
                end = text_end;
            } else if (filter == PositionFilter::ImageOnly) {
                if (target < new_begin || target >= new_end) continue;
                begin = new_begin;
                end = new_end;
            }
            const double* z = logits->data.data() + static_cast<int64_t>(t) * v;
            nll += slice_lse(z, begin, end) - z[target];
            ++count;
        }
    }
    if (count == 0) throw ValueError("perplexity: no positions match the filter");
    return std::exp(nll / static_cast<double>(count));
}

RoutingTrace collect_trace(const ModelParams& model, const std::vector<std::vector<int32_t>>& probe) {
    if (!model.is_moe()) throw ValueError("collect_trace: model has no MoE layers");
    const auto& moe0 = std::get<MoELayer>(model.layers.front().ffn);
    TraceCollector collector(moe0.n_experts(), moe0.router.top_k, model.config.n_layers);
    for (const auto& seq : probe) {
        if (seq.size() < 2) continue;
        std::span<const int32_t> inputs(seq.data(), seq.size() - 1);
        Tape tape(Tape::Mode::NoGrad);
        ForwardOptions fwd;
        fwd.trace = &collector;
        decoder_forward(tape, model, inputs, fwd);
    }
    collector.trace.validate();
    return collector.trace;
}

int64_t steps_to_threshold(const std::vector<StepLog>& curve, double threshold, int window) {
    if (window < 1) throw ValueError("steps_to_threshold: window must be >= 1");
    double acc = 0.0;
    for (size_t i = 0; i < curve.size(); ++i) {
        acc += curve[i].loss;
        if (i >= static_cast<size_t>(window)) acc -= curve[i - static_cast<size_t>(window)].loss;
        const int64_t have = std::min<int64_t>(static_cast<int64_t>(i) + 1, window);
        if (have == window && acc / static_cast<double>(window) < threshold) return curve[i].step;
    }
    return -1;
}

ModelParams clone_model(const ModelParams& model) {
    ModelParams out;
    out.config = model.config;
    out.expansion = model.expansion;
    out.adapter_mode = model.adapter_mode;
    auto dup = [](const Tensor& t) {
        if (!t.defined()) return Tensor();
        Tensor c = t.clone();
        c->requires_grad = t->requires_grad;
        return c;
    };
    out.embedding = dup(model.embedding);
    for (const auto& layer : model.layers) {
        DecoderLayer l;
        l.attn_gain = dup(layer.attn_gain);
        l.ffn_gain = dup(layer.ffn_gain);
        l.attn.w_q = dup(layer.attn.w_q);
        l.attn.w_k = dup(layer.attn.w_k);
        l.attn.w_v = dup(layer.attn.w_v);
        l.attn.w_o = dup(layer.attn.w_o);
        l.attn.b_o = dup(layer.attn.b_o);
        if (const auto* dense = std::get_if<DenseFFN>(&layer.ffn)) {
            DenseFFN f;
            f.w_gate = dup(dense->w_gate);
            f.w_up = dup(dense->w_up);
            f.w_down = dup(dense->w_down);
            l.ffn = std::move(f);
        } else {
            const auto& moe = std::get<MoELayer>(layer.ffn);
            MoELayer m;
            m.router.w_g = dup(moe.router.w_g);
            m.router.w_noise = dup(moe.router.w_noise);
            m.router.b_noise = dup(moe.router.b_noise);
            m.router.top_k = moe.router.top_k;
            for (const auto& e : moe.experts) {
                ExpertSlice s;
                s.neuron_indices = e.neuron_indices;
                s.w_gate = dup(e.w_gate);
                s.w_up = dup(e.w_up);
                s.w_down = dup(e.w_down);
                m.experts.push_back(std::move(s));
            }
            l.ffn = std::move(m);
        }
        if (layer.adapters) {
            LayerAdapters ads;
            auto dup_ad = [&](const std::optional<PLoRAAdapter>& a) -> std::optional<PLoRAAdapter> {
                if (!a) return std::nullopt;
                PLoRAAdapter c = *a;
                c.a = dup(a->a);
                c.b = dup(a->b);
                return c;
            };
            ads.q = dup_ad(layer.adapters->q);
            ads.k = dup_ad(layer.adapters->k);
            ads.v = dup_ad(layer.adapters->v);
            ads.o = dup_ad(layer.adapters->o);
            l.adapters = std::move(ads);
        }
        out.layers.push_back(std::move(l));
    }
    out.final_gain = dup(model.final_gain);
    out.head = model.config.tie_head ? out.embedding : dup(model.head);
    return out;
}

namespace {

MatrixCellResult run_matrix_cell(const ModelParams& base, const MatrixOptions& opts, const Dataset& corpus,
                                 const Dataset& probe, const std::vector<std::vector<int32_t>>& eval_text,
                                 const MetricSpace& geometry, double ppl_text_before, TrainMode mode,
                                 InitScheme init, uint64_t seed) {
    MatrixCellResult cell;
    cell.mode = mode;
    cell.init = init;
    cell.seed = seed;
    cell.ppl_text_before = ppl_text_before;

    ModelParams model = clone_model(base);
    expand_vocabulary(model, corpus.layout);
    GwInitInputs gw;
    gw.geometry = geometry;
    gw.solver = opts.gw_solver;
    gw.max_anchors = opts.gw_max_anchors;
    gw.anchor_seed = derive_seed(seed, 0x67770001);
    init_new_rows(model, init, init == InitScheme::GW ? &gw : nullptr, derive_seed(seed, 0x696e6974));
    attach_adapters(model, AdapterTargets{}, opts.rank, opts.alpha, derive_seed(seed, 0xada9));
    if (mode == TrainMode::LoRA) model.adapter_mode = AdapterMode::AllTokens;
    apply_trainable_set(model, mode == TrainMode::FrozenAdapterOnly
                                   ? TrainableSetKind::MultimodalFrozenAdapterOnly
                                   : TrainableSetKind::Multimodal);

    cell.trace_before = collect_trace(model, probe.sequences);

    TrainConfig tc = opts.train;
    tc.seed = seed;
    tc.lora_all_tokens = (mode == TrainMode::LoRA);
    TrainResult tr = train(model, corpus.sequences, tc);
    cell.curve = std::move(tr.curve);

    cell.ppl_text_after = perplexity(model, eval_text, PositionFilter::TextOnly);
    cell.dppl_text = cell.ppl_text_after - cell.ppl_text_before;
    cell.dppl_text_rel = cell.dppl_text / cell.ppl_text_before;
    cell.ppl_image = perplexity(model, probe.sequences, PositionFilter::ImageOnly);
    cell.trace_after = collect_trace(model, probe.sequences);
    cell.steps_to_threshold =
        opts.loss_threshold > 0.0 ? mmoe::steps_to_threshold(cell.curve, opts.loss_threshold, opts.threshold_window)
                                  : -1;
    return cell;
}

}  // namespace

std::vector<MatrixCellResult> run_comparison_matrix(const ModelParams& base, const MatrixOptions& opts,
                                                    const std::function<void(const MatrixCellResult&)>& on_cell,
                                                    int jobs) {
    if (opts.seeds.size() < 2) throw ValueError("run_comparison_matrix: need at least 2 seeds");
    const Dataset corpus = generate_corpus(opts.corpus);
    const Dataset probe = generate_corpus(opts.probe);
    const auto eval_text = generate_text_corpus(opts.corpus.vocab_text, opts.corpus.source_seed,
                                                opts.eval_text_len, opts.eval_text_samples, opts.eval_text_seed);
    const MetricSpace geometry = image_side_geometry(corpus, opts.geometry);
    const double ppl_text_before = perplexity(base, eval_text, PositionFilter::TextOnly);

    struct CellSpec {
        TrainMode mode;
        InitScheme init;
        uint64_t seed;
    };
    std::vector<CellSpec> specs;
    for (uint64_t seed : opts.seeds)
        for (TrainMode mode : opts.modes)
            for (InitScheme init : opts.inits) specs.push_back({mode, init, seed});

    std::vector<MatrixCellResult> cells(specs.size());
    const int workers = std::max(1, jobs);
    for (size_t start = 0; start < specs.size(); start += static_cast<size_t>(workers)) {
        const size_t end = std::min(specs.size(), start + static_cast<size_t>(workers));
        std::vector<std::future<MatrixCellResult>> futures;
        for (size_t i = start; i < end; ++i) {
            const auto& s = specs[i];
            futures.push_back(std::async(std::launch::async, [&, s]() {
                return run_matrix_cell(base, opts, corpus, probe, eval_text, geometry, ppl_text_before, s.mode,
                                       s.init, s.seed);
            }));
        }
        for (size_t i = start; i < end; ++i) {
            cells[i] = futures[i - start].get();
            if (on_cell) on_cell(cells[i]);
        }
    }
    return cells;
}

void write_matrix_csv(const std::vector<MatrixCellResult>& cells, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("write_matrix_csv: cannot open " + path);
    f << "mode,init,seed,dppl_text,ppl_image,steps_to_threshold\n";
    f.precision(17);
    for (const auto& c : cells)
        f << train_mode_name(c.mode) << "," << init_scheme_name(c.init) << "," << c.seed << "," << c.dppl_text
          << "," << c.ppl_image << "," << c.steps_to_threshold << "\n";
}

void write_curve_csv(const std::vector<StepLog>& curve, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("write_curve_csv: cannot open " + path);
    f << "step,loss,lr\n";
    f.precision(17);
    for (const auto& s : curve) f << s.step << "," << s.loss << "," << s.lr << "\n";
}

}  // namespace mmoe
