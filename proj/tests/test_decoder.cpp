#include <doctest.h>

#include <cmath>
#include <vector>

#include "mmoe/decoder.hpp"
#include "mmoe/train.hpp"

using namespace mmoe;

namespace {

DecoderConfig tiny_config() {
    DecoderConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 32;
    c.d_ffn = 64;
    c.vocab_text_size = 24;
    c.max_seq_len = 64;
    return c;
}

// Plain-loop reference forward, kept free of the Tape machinery on purpose.
std::vector<double> reference_forward(const ModelParams& m, const std::vector<int32_t>& ids) {
    const auto& cfg = m.config;
    const int64_t T = static_cast<int64_t>(ids.size()), d = cfg.d_model;
    const int64_t hd = d / cfg.n_heads;
    auto rms = [&](std::vector<double>& h, const Tensor& gain) {
        std::vector<double> out(h.size());
        for (int64_t t = 0; t < T; ++t) {
            double ms = 0.0;
            for (int64_t i = 0; i < d; ++i) ms += h[t * d + i] * h[t * d + i];
            const double inv = 1.0 / std::sqrt(ms / d + cfg.rms_eps);
            for (int64_t i = 0; i < d; ++i) out[t * d + i] = gain->data[i] * h[t * d + i] * inv;
        }
        return out;
    };
    auto lin = [&](const std::vector<double>& x, const Tensor& w, int64_t out_dim) {
        std::vector<double> y(static_cast<size_t>(T * out_dim), 0.0);
        for (int64_t t = 0; t < T; ++t)
            for (int64_t o = 0; o < out_dim; ++o) {
                double acc = 0.0;
                for (int64_t i = 0; i < d; ++i) acc += x[t * d + i] * w.at(o, i);
                y[t * out_dim + o] = acc;
            }
        return y;
    };
    auto apply_rope = [&](std::vector<double>& x) {
        for (int64_t t = 0; t < T; ++t)
            for (int h = 0; h < cfg.n_heads; ++h)
                for (int64_t j = 0; j < hd / 2; ++j) {
                    const double theta = t * std::pow(cfg.rope_base, -2.0 * j / static_cast<double>(hd));
                    const int64_t off = t * d + h * hd + 2 * j;
                    const double a = x[off], b = x[off + 1];
                    x[off] = a * std::cos(theta) - b * std::sin(theta);
                    x[off + 1] = a * std::sin(theta) + b * std::cos(theta);
                }
    };

    std::vector<double> h(static_cast<size_t>(T * d));
    for (int64_t t = 0; t < T; ++t)
        for (int64_t i = 0; i < d; ++i) h[t * d + i] = m.embedding.at(ids[t], i);

    for (const auto& layer : m.layers) {
        auto a_in = rms(h, layer.attn_gain);
        auto q = lin(a_in, layer.attn.w_q, d), k = lin(a_in, layer.attn.w_k, d), v = lin(a_in, layer.attn.w_v, d);
        apply_rope(q);
        apply_rope(k);
        std::vector<double> ctx(static_cast<size_t>(T * d), 0.0);
        for (int hh = 0; hh < cfg.n_heads; ++hh) {
            for (int64_t t = 0; t < T; ++t) {
                std::vector<double> scores(static_cast<size_t>(t + 1));
                double mx = -1e300;
                for (int64_t s = 0; s <= t; ++s) {
                    double acc = 0.0;
                    for (int64_t j = 0; j < hd; ++j) acc += q[t * d + hh * hd + j] * k[s * d + hh * hd + j];
                    scores[s] = acc / std::sqrt(static_cast<double>(hd));
                    mx = std::max(mx, scores[s]);
                }
                double sum = 0.0;
                for (int64_t s = 0; s <= t; ++s) {
                    scores[s] = std::exp(scores[s] - mx);
                    sum += scores[s];
                }
                for (int64_t s = 0; s <= t; ++s)
                    for (int64_t j = 0; j < hd; ++j)
                        ctx[t * d + hh * hd + j] += scores[s] / sum * v[s * d + hh * hd + j];
            }
        }
        auto attn_out = lin(ctx, layer.attn.w_o, d);
        for (size_t i = 0; i < h.size(); ++i) h[i] += attn_out[i];

        auto f_in = rms(h, layer.ffn_gain);
        const auto& ffn = std::get<DenseFFN>(layer.ffn);
        const int64_t f = ffn.w_gate.rows();
        std::vector<double> z(static_cast<size_t>(T * f));
        for (int64_t t = 0; t < T; ++t)
            for (int64_t o = 0; o < f; ++o) {
                double g = 0.0, u = 0.0;
                for (int64_t i = 0; i < d; ++i) {
                    g += f_in[t * d + i] * ffn.w_gate.at(o, i);
                    u += f_in[t * d + i] * ffn.w_up.at(o, i);
                }
                const double sig = 1.0 / (1.0 + std::exp(-g));
                z[t * f + o] = g * sig * u;
            }
        for (int64_t t = 0; t < T; ++t)
            for (int64_t o = 0; o < d; ++o) {
                double acc = 0.0;
                for (int64_t i = 0; i < f; ++i) acc += z[t * f + i] * ffn.w_down.at(o, i);
                h[t * d + o] += acc;
            }
    }
    auto fin = rms(h, m.final_gain);
    const int64_t V = m.head.rows();
    std::vector<double> logits(static_cast<size_t>(T * V));
    for (int64_t t = 0; t < T; ++t)
        for (int64_t o = 0; o < V; ++o) {
            double acc = 0.0;
            for (int64_t i = 0; i < d; ++i) acc += fin[t * d + i] * m.head.at(o, i);
            logits[t * V + o] = acc;
        }
    return logits;
}

}  // namespace

TEST_CASE("single-token input gives finite 1xV logits") {
    Rng rng(1);
    ModelParams m = init_dense_model(tiny_config(), rng);
    Tape t(Tape::Mode::NoGrad);
    std::vector<int32_t> ids = {5};
    Tensor logits = decoder_forward(t, m, ids);
    CHECK(logits.rows() == 1);
    CHECK(logits.cols() == 24);
    for (double v : logits->data) CHECK(std::isfinite(v));
}

TEST_CASE("causality: changing future tokens leaves earlier logits untouched") {
    Rng rng(2);
    ModelParams m = init_dense_model(tiny_config(), rng);
    std::vector<int32_t> ids = {1, 2, 3, 4, 5, 6, 7, 8};
    Tape t(Tape::Mode::NoGrad);
    Tensor full = decoder_forward(t, m, ids);
    for (size_t cut = 1; cut + 1 < ids.size(); ++cut) {
        std::vector<int32_t> mutated(ids);
        for (size_t j = cut; j < mutated.size(); ++j) mutated[j] = static_cast<int32_t>((mutated[j] + 7) % 24);
        Tape t2(Tape::Mode::NoGrad);
        Tensor other = decoder_forward(t2, m, mutated);
        for (size_t p = 0; p < cut; ++p)
            for (int64_t c = 0; c < full.cols(); ++c)
                CHECK(std::abs(full.at(static_cast<int64_t>(p), c) - other.at(static_cast<int64_t>(p), c)) < 1e-12);
    }
}

TEST_CASE("forward matches an independent plain-loop recomputation") {
    Rng rng(3);
    ModelParams m = init_dense_model(tiny_config(), rng);
    std::vector<int32_t> ids = {3, 1, 9, 0, 17, 5};
    Tape t(Tape::Mode::NoGrad);
    Tensor logits = decoder_forward(t, m, ids);
    const auto ref = reference_forward(m, ids);
    REQUIRE(ref.size() == logits->data.size());
    for (size_t i = 0; i < ref.size(); ++i)
        CHECK(logits->data[i] == doctest::Approx(ref[i]).epsilon(1e-9));
}

TEST_CASE("out-of-range token id names the offending position") {
    Rng rng(4);
    ModelParams m = init_dense_model(tiny_config(), rng);
    std::vector<int32_t> ids = {1, 2, 99};
    Tape t(Tape::Mode::NoGrad);
    CHECK_THROWS_WITH_AS(decoder_forward(t, m, ids), doctest::Contains("position 2"), ValueError);
}

TEST_CASE("sequences beyond max_seq_len are rejected") {
    DecoderConfig cfg = tiny_config();
    cfg.max_seq_len = 4;
    Rng rng(5);
    ModelParams m = init_dense_model(cfg, rng);
    std::vector<int32_t> ids = {1, 2, 3, 4, 5};
    Tape t(Tape::Mode::NoGrad);
    CHECK_THROWS_AS(decoder_forward(t, m, ids), ValueError);
}

TEST_CASE("swiglu ffn: zero input and zero down-projection give zero") {
    Rng rng(5);
    ModelParams m = init_dense_model(tiny_config(), rng);
    auto& ffn = std::get<DenseFFN>(m.layers[0].ffn);
    Tape t(Tape::Mode::NoGrad);
    Tensor zero = Tensor::zeros({3, 32});
    Tensor y = swiglu_ffn_forward(t, ffn, zero);
    for (double v : y->data) CHECK(v == 0.0);

    Rng rng2(6);
    Tensor x = Tensor::randn({3, 32}, rng2, 1.0, false);
    DenseFFN zero_down = ffn;
    zero_down.w_down = Tensor::zeros({32, 64});
    Tensor y2 = swiglu_ffn_forward(t, zero_down, x);
    for (double v : y2->data) CHECK(v == 0.0);
}

TEST_CASE("head tying aliases the embedding storage") {
    DecoderConfig cfg = tiny_config();
    cfg.tie_head = true;
    Rng rng(7);
    ModelParams m = init_dense_model(cfg, rng);
    CHECK(m.head.same_storage(m.embedding));
    const double before = m.head.at(3, 4);
    m.embedding.at(3, 4) = before + 1.5;
    CHECK(m.head.at(3, 4) == before + 1.5);
}

TEST_CASE("parameter count: embedding and untied head each contribute V*d") {
    Rng rng(8);
    DecoderConfig cfg = tiny_config();
    ModelParams m = init_dense_model(cfg, rng);
    CHECK(m.embedding.size() == cfg.vocab_text_size * cfg.d_model);
    CHECK(m.head.size() == cfg.vocab_text_size * cfg.d_model);
    CHECK_FALSE(m.head.same_storage(m.embedding));
}

TEST_CASE("full decoder gradients pass finite differences") {
    DecoderConfig cfg = tiny_config();
    cfg.n_layers = 1;
    Rng rng(9);
    ModelParams m = init_dense_model(cfg, rng);
    std::vector<int32_t> ids = {3, 1, 9, 0, 17};
    std::vector<int32_t> targets = {1, 9, 0, 17, 5};
    std::vector<uint8_t> mask = {0, 0, 0, 0, 0};
    auto f = [&]() {
        Tape t;
        return t.cross_entropy_next_token(decoder_forward(t, m, ids), targets, mask).item();
    };
    {
        Tape t;
        backward_pass(t, t.cross_entropy_next_token(decoder_forward(t, m, ids), targets, mask));
    }
    std::vector<Tensor> params;
    for (auto& [name, p] : m.named_tensors()) params.push_back(p);
    Rng sample_rng(10);
    auto report = finite_difference_check(f, params, 1e-5, 1e-4, 6, sample_rng);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("generate: temperature 0 equals greedy; fixed seed reproduces") {
    Rng rng(11);
    ModelParams m = init_dense_model(tiny_config(), rng);
    std::vector<int32_t> prompt = {2, 4, 6};
    SamplingConfig greedy;
    SamplingConfig temp0;
    temp0.greedy = false;
    temp0.temperature = 0.0;
    CHECK(generate(m, prompt, 10, greedy, 1) == generate(m, prompt, 10, temp0, 2));

    SamplingConfig sampled;
    sampled.greedy = false;
    sampled.temperature = 1.0;
    sampled.top_k = 5;
    CHECK(generate(m, prompt, 10, sampled, 42) == generate(m, prompt, 10, sampled, 42));
    CHECK_THROWS_AS(generate(m, {}, 5, greedy, 1), ValueError);
}

TEST_CASE("greedy decode of an overfit single-sequence model reproduces the sequence") {
    DecoderConfig cfg;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_model = 32;
    cfg.d_ffn = 64;
    cfg.vocab_text_size = 16;
    cfg.max_seq_len = 32;
    Rng rng(12);
    ModelParams m = init_dense_model(cfg, rng);
    apply_trainable_set(m, TrainableSetKind::DenseAll);
    const std::vector<int32_t> seq = {4, 9, 1, 14, 7, 2, 11, 5, 3, 8, 12, 6};

    TrainConfig tc;
    tc.lr_max = 5e-3;
    tc.lr_min = 5e-4;
    tc.warmup_steps = 20;
    tc.batch_size = 1;
    tc.epochs = 1500;
    tc.seed = 1;
    double final_loss = 1e9;
    // stop early once overfit
    int epochs_run = 0;
    for (int round = 0; round < 30 && final_loss >= 0.01; ++round) {
        TrainConfig chunk = tc;
        chunk.epochs = 50;
        chunk.seed = derive_seed(1, static_cast<uint64_t>(round));
        TrainResult r = train(m, {seq}, chunk);
        final_loss = r.curve.back().loss;
        epochs_run += 50;
    }
    REQUIRE(final_loss < 0.01);

    std::vector<int32_t> prompt(seq.begin(), seq.begin() + 2);
    auto continuation = generate(m, prompt, static_cast<int>(seq.size()) - 2, SamplingConfig{}, 1);
    CHECK(continuation == std::vector<int32_t>(seq.begin() + 2, seq.end()));
}
