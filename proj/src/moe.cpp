#include "mmoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mmoe {

std::vector<ExpertSlice> partition_ffn(const DenseFFN& ffn, int n_experts, uint64_t seed) {
    const int64_t d_ffn = ffn.w_gate.rows();
    const int64_t d_model = ffn.w_gate.cols();
    if (n_experts < 2) throw ValueError("partition_ffn: need at least 2 experts, got " + std::to_string(n_experts));
    if (d_ffn % n_experts != 0)
        throw ValueError("partition_ffn: expert count " + std::to_string(n_experts) +
                         " does not divide intermediate width " + std::to_string(d_ffn));
    const int64_t slice = d_ffn / n_experts;

    std::vector<int32_t> perm(static_cast<size_t>(d_ffn));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    rng.shuffle(perm);

    std::vector<ExpertSlice> experts;
    experts.reserve(static_cast<size_t>(n_experts));
    for (int e = 0; e < n_experts; ++e) {
        ExpertSlice ex;
        ex.neuron_indices.assign(perm.begin() + e * slice, perm.begin() + (e + 1) * slice);
        std::sort(ex.neuron_indices.begin(), ex.neuron_indices.end());
        ex.w_gate = Tensor::zeros({slice, d_model}, true);
        ex.w_up = Tensor::zeros({slice, d_model}, true);
        ex.w_down = Tensor::zeros({d_model, slice}, true);
        for (int64_t r = 0; r < slice; ++r) {
            const int64_t src = ex.neuron_indices[static_cast<size_t>(r)];
            std::copy_n(ffn.w_gate->data.data() + src * d_model, d_model, ex.w_gate->data.data() + r * d_model);
            std::copy_n(ffn.w_up->data.data() + src * d_model, d_model, ex.w_up->data.data() + r * d_model);
            for (int64_t m = 0; m < d_model; ++m) ex.w_down.at(m, r) = ffn.w_down.at(m, src);
        }
        experts.push_back(std::move(ex));
    }
    return experts;
}

Router make_router(int n_experts, int d_model, int top_k, double noise_bias_init) {
    if (top_k < 1 || top_k > n_experts) throw ValueError("router: need 1 <= top_k <= n_experts");
    Router r;
    r.w_g = Tensor::zeros({n_experts, d_model}, true);
    r.w_noise = Tensor::zeros({n_experts, d_model}, true);
    r.b_noise = Tensor::full({n_experts}, noise_bias_init, true);
    r.top_k = top_k;
    return r;
}

Tensor gate_scores(Tape& tape, const Router& router, const Tensor& x, bool train_mode, Rng* noise_rng) {
    Tensor logits = tape.linear(x, router.w_g);
    if (train_mode) {
        if (!noise_rng) throw ValueError("gate_scores: training mode requires a noise rng");
        Tensor width = tape.softplus(tape.add_row_bias(tape.linear(x, router.w_noise), router.b_noise));
        Tensor eps = Tensor::zeros(width.shape(), false);
        for (auto& v : eps->data) v = noise_rng->normal();
        logits = tape.add(logits, tape.mul(width, eps));
    }
    return tape.softmax_rows(logits);
}

RoutingDecision select_top_k(std::span<const double> scores, int k) {
    const int n = static_cast<int>(scores.size());
    if (k < 1 || k > n) throw ValueError("select_top_k: need 1 <= k <= n");
    std::vector<int32_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int32_t a, int32_t b) {
        if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
            return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
        return a < b;
    });
    RoutingDecision d;
    d.experts.assign(order.begin(), order.begin() + k);
    d.gates.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) d.gates.push_back(scores[static_cast<size_t>(d.experts[static_cast<size_t>(i)])]);
    return d;
}

namespace {

Tensor expert_ffn(Tape& tape, const ExpertSlice& e, const Tensor& x) {
    Tensor gated = tape.mul(tape.silu(tape.linear(x, e.w_gate)), tape.linear(x, e.w_up));
    return tape.linear(gated, e.w_down);
}

// Importance CoV² of the (noisy) scores: the row sums of s are 1, so the mean
// importance is the constant T/N and only the variance needs gradients.
Tensor load_balance_term(Tape& tape, const Tensor& scores) {
    const int64_t t_len = scores.rows(), n = scores.cols();
    Tensor ones = Tensor::full({1, t_len}, 1.0, false);
    Tensor importance = tape.matmul(ones, scores);  // [1, N]
    const double mean = static_cast<double>(t_len) / static_cast<double>(n);
    Tensor mean_row = Tensor::full({1, n}, mean, false);
    Tensor diff = tape.sub(importance, mean_row);
    Tensor var = tape.scale(tape.sum(tape.mul(diff, diff)), 1.0 / static_cast<double>(n));
    return tape.scale(var, 1.0 / (mean * mean));
}

}  // namespace

MoEForwardResult moe_layer_forward(Tape& tape, const MoELayer& layer, const Tensor& x,
                                   const MoEForwardOptions& opts) {
    const int n = layer.n_experts();
    const int64_t t_len = x.rows();
    const int64_t d = x.cols();
    MoEForwardResult res;
    res.decisions.resize(static_cast<size_t>(t_len));

    if (opts.diag_all_experts) {
        Tensor y = Tensor::zeros({t_len, d}, false);
        std::vector<int64_t> all_rows(static_cast<size_t>(t_len));
        std::iota(all_rows.begin(), all_rows.end(), 0);
        for (int e = 0; e < n; ++e) {
            y = tape.scatter_add_rows(y, expert_ffn(tape, layer.experts[static_cast<size_t>(e)], x), all_rows);
            if (opts.expert_eval_counter) *opts.expert_eval_counter += t_len;
        }
        for (int64_t t = 0; t < t_len; ++t) {
            auto& dec = res.decisions[static_cast<size_t>(t)];
            dec.experts.resize(static_cast<size_t>(n));
            std::iota(dec.experts.begin(), dec.experts.end(), 0);
            dec.gates.assign(static_cast<size_t>(n), 1.0);
        }
        res.output = y;
        return res;
    }

    Tensor scores = gate_scores(tape, layer.router, x, opts.train_mode, opts.noise_rng);
    if (opts.aux_out && opts.aux_tape) {
        Tensor term = load_balance_term(*opts.aux_tape, scores);
        *opts.aux_out = opts.aux_out->defined() ? opts.aux_tape->add(*opts.aux_out, term) : term;
    }

    const int k = layer.router.top_k;
    std::vector<std::vector<int64_t>> expert_rows(static_cast<size_t>(n));
    std::vector<std::vector<std::pair<int64_t, int64_t>>> expert_coords(static_cast<size_t>(n));
    for (int64_t t = 0; t < t_len; ++t) {
        auto dec = select_top_k(std::span<const double>(scores->data.data() + t * n, static_cast<size_t>(n)), k);
        for (int32_t e : dec.experts) {
            expert_rows[static_cast<size_t>(e)].push_back(t);
            expert_coords[static_cast<size_t>(e)].emplace_back(t, e);
        }
        res.decisions[static_cast<size_t>(t)] = std::move(dec);
    }

    Tensor inv_kept;
    if (opts.renormalize_gates) {
        Tensor keep = Tensor::zeros({t_len, static_cast<int64_t>(n)}, false);
        for (int64_t t = 0; t < t_len; ++t)
            for (int32_t e : res.decisions[static_cast<size_t>(t)].experts) keep.at(t, e) = 1.0;
        Tensor kept_sum = tape.matmul(tape.mul(scores, keep), Tensor::full({n, 1}, 1.0, false));
        inv_kept = tape.reciprocal(kept_sum);
    }

    Tensor y = Tensor::zeros({t_len, d}, false);
    for (int e = 0; e < n; ++e) {
        auto& rows = expert_rows[static_cast<size_t>(e)];
        if (rows.empty()) continue;
        Tensor xe = tape.gather_rows(x, rows);
        Tensor oe = expert_ffn(tape, layer.experts[static_cast<size_t>(e)], xe);
        Tensor ge = tape.gather_elems(scores, expert_coords[static_cast<size_t>(e)]);
        if (opts.renormalize_gates) ge = tape.mul(ge, tape.gather_rows(inv_kept, rows));
        y = tape.scatter_add_rows(y, tape.scale_rows(oe, ge), rows);
        if (opts.expert_eval_counter) *opts.expert_eval_counter += static_cast<int64_t>(rows.size());
    }
    res.output = y;
    return res;
}

double dense_equivalence_check(const DenseFFN& parent, std::span<const ExpertSlice> experts,
                               const Tensor& x_batch) {
    const int64_t d_ffn = parent.w_gate.rows();
    std::vector<uint8_t> seen(static_cast<size_t>(d_ffn), 0);
    int64_t covered = 0;
    for (const auto& e : experts) {
        for (int32_t idx : e.neuron_indices) {
            if (idx < 0 || idx >= d_ffn) throw ValueError("dense_equivalence_check: neuron index out of range");
            if (seen[static_cast<size_t>(idx)]++)
                throw ValueError("dense_equivalence_check: neuron " + std::to_string(idx) +
                                 " appears in more than one expert");
            ++covered;
        }
    }
    if (covered != d_ffn)
        throw ValueError("dense_equivalence_check: experts cover " + std::to_string(covered) + " of " +
                         std::to_string(d_ffn) + " neurons");

    Tape tape(Tape::Mode::NoGrad);
    Tensor ref = swiglu_ffn_forward(tape, parent, x_batch);
    Tensor acc = Tensor::zeros(ref.shape(), false);
    std::vector<int64_t> all_rows(static_cast<size_t>(x_batch.rows()));
    std::iota(all_rows.begin(), all_rows.end(), 0);
    for (const auto& e : experts) acc = tape.scatter_add_rows(acc, expert_ffn(tape, e, x_batch), all_rows);
    double max_dev = 0.0;
    for (size_t i = 0; i < ref->data.size(); ++i) max_dev = std::max(max_dev, std::abs(acc->data[i] - ref->data[i]));
    return max_dev;
}

LoadBalanceStats load_balance_stats(std::span<const RoutingDecision> decisions, int n_experts) {
    if (decisions.empty()) throw ValueError("load_balance_stats: empty decision set");
    LoadBalanceStats st;
    st.fractions.assign(static_cast<size_t>(n_experts), 0.0);
    int64_t slots = 0;
    for (const auto& d : decisions) {
        for (int32_t e : d.experts) {
            st.fractions[static_cast<size_t>(e)] += 1.0;
            ++slots;
        }
    }
    for (auto& f : st.fractions) f /= static_cast<double>(slots);
    const double mean = 1.0 / static_cast<double>(n_experts);
    double var = 0.0;
    for (double f : st.fractions) var += (f - mean) * (f - mean);
    var /= static_cast<double>(n_experts);
    st.cov = std::sqrt(var) / mean;
    return st;
}

void convert_to_moe(ModelParams& model, int n_experts, int top_k, uint64_t seed, double noise_bias_init) {
    if (model.is_moe()) throw ValueError("convert_to_moe: model is already in MoE form");
    for (size_t i = 0; i < model.layers.size(); ++i) {
        auto& layer = model.layers[i];
        const auto& dense = std::get<DenseFFN>(layer.ffn);
        MoELayer moe;
        moe.experts = partition_ffn(dense, n_experts, derive_seed(seed, i));
        moe.router = make_router(n_experts, model.config.d_model, top_k, noise_bias_init);
        const std::string p = "layer." + std::to_string(i) + ".moe.";
        moe.router.w_g->name = p + "router.w_g";
        moe.router.w_noise->name = p + "router.w_noise";
        moe.router.b_noise->name = p + "router.b_noise";
        for (size_t e = 0; e < moe.experts.size(); ++e) {
            moe.experts[e].w_gate->name = p + "expert." + std::to_string(e) + ".w_gate";
            moe.experts[e].w_up->name = p + "expert." + std::to_string(e) + ".w_up";
            moe.experts[e].w_down->name = p + "expert." + std::to_string(e) + ".w_down";
        }
        layer.ffn = std::move(moe);
    }
}

}  // namespace mmoe
