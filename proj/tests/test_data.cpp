#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <map>

#include "mmoe/data.hpp"
#include "mmoe/decoder.hpp"
#include "mmoe/train.hpp"

using namespace mmoe;

namespace {

CorpusSpec small_spec(uint64_t sample_seed = 1) {
    CorpusSpec s;
    s.vocab_text = 48;
    s.vocab_image = 12;
    s.n_classes = 3;
    s.text_len = 5;
    s.image_len = 7;
    s.n_samples = 64;
    s.source_seed = 7;
    s.sample_seed = sample_seed;
    return s;
}

}  // namespace

TEST_CASE("zero samples give an empty dataset") {
    CorpusSpec s = small_spec();
    s.n_samples = 0;
    Dataset d = generate_corpus(s);
    CHECK(d.sequences.empty());
    CHECK(d.labels.empty());
}

TEST_CASE("every sequence follows text+ boi image+ eoi with exactly one marker pair") {
    Dataset d = generate_corpus(small_spec());
    const auto& lay = d.layout;
    for (const auto& seq : d.sequences) {
        REQUIRE(static_cast<int>(seq.size()) == 5 + 7 + 2);
        int boi_count = 0, eoi_count = 0;
        for (int i = 0; i < 5; ++i) CHECK(lay.is_text(seq[static_cast<size_t>(i)]));
        CHECK(seq[5] == lay.boi());
        for (int i = 6; i < 13; ++i) {
            CHECK(seq[static_cast<size_t>(i)] >= lay.image_base());
            CHECK(seq[static_cast<size_t>(i)] < lay.boi());
        }
        CHECK(seq[13] == lay.eoi());
        for (int32_t id : seq) {
            boi_count += id == lay.boi();
            eoi_count += id == lay.eoi();
        }
        CHECK(boi_count == 1);
        CHECK(eoi_count == 1);
    }
}

TEST_CASE("labels are the deterministic class of the text prefix") {
    Dataset d = generate_corpus(small_spec(3));
    for (size_t i = 0; i < d.sequences.size(); ++i)
        CHECK(d.labels[i] == d.latent_class_of_prefix(d.sequences[i]));
}

TEST_CASE("generation is byte-identical across runs with equal seeds") {
    Dataset a = generate_corpus(small_spec(9));
    Dataset b = generate_corpus(small_spec(9));
    Dataset c = generate_corpus(small_spec(10));
    CHECK(a.sequences == b.sequences);
    CHECK(a.labels == b.labels);
    CHECK(a.sequences != c.sequences);
}

TEST_CASE("single-class bigram frequencies converge to the declared transition table") {
    CorpusSpec s;
    s.vocab_text = 16;
    s.vocab_image = 12;
    s.n_classes = 1;
    s.text_len = 2;
    s.image_len = 50;
    s.n_samples = 2100;  // ~1e5 image tokens
    s.source_seed = 11;
    s.sample_seed = 12;
    Dataset d = generate_corpus(s);

    const int32_t base = static_cast<int32_t>(d.layout.image_base());
    std::vector<std::vector<int64_t>> counts(static_cast<size_t>(s.vocab_image),
                                             std::vector<int64_t>(static_cast<size_t>(s.vocab_image), 0));
    std::vector<int64_t> row_tot(static_cast<size_t>(s.vocab_image), 0);
    for (const auto& seq : d.sequences) {
        std::vector<int32_t> block;
        for (int32_t id : seq)
            if (id >= base && id < base + s.vocab_image) block.push_back(id - base);
        for (size_t i = 0; i + 1 < block.size(); ++i) {
            ++counts[static_cast<size_t>(block[i])][static_cast<size_t>(block[i + 1])];
            ++row_tot[static_cast<size_t>(block[i])];
        }
    }
    double worst_tv = 0.0;
    int rows_checked = 0;
    for (int64_t prev = 0; prev < s.vocab_image; ++prev) {
        if (row_tot[static_cast<size_t>(prev)] < 500) continue;
        const auto truth = image_transition_row(s, 0, prev);
        double tv = 0.0;
        for (int64_t nxt = 0; nxt < s.vocab_image; ++nxt) {
            const double emp = static_cast<double>(counts[static_cast<size_t>(prev)][static_cast<size_t>(nxt)]) /
                               static_cast<double>(row_tot[static_cast<size_t>(prev)]);
            tv += std::abs(emp - truth[static_cast<size_t>(nxt)]);
        }
        worst_tv = std::max(worst_tv, 0.5 * tv);
        ++rows_checked;
    }
    REQUIRE(rows_checked > 0);
    CHECK(worst_tv < 0.05);
}

TEST_CASE("learnability: class-conditional bigrams beat the pooled model on every generated spec") {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        CorpusSpec s = small_spec(seed);
        s.n_samples = 400;
        s.image_len = 12;
        const auto rep = image_learnability(generate_corpus(s));
        CHECK(rep.ok());
        CHECK(rep.ppl_conditional < rep.ppl_unconditional);
    }
}

TEST_CASE("pack_batches: equal lengths give zero padding; counts follow the next-token shift") {
    std::vector<std::vector<int32_t>> seqs = {{1, 2, 3, 4}, {5, 6, 7, 8}, {1, 1, 1, 1}};
    auto batches = pack_batches(seqs, 2, 16, 99);
    REQUIRE(batches.size() == 2);
    int64_t unmasked = 0;
    for (const auto& b : batches) {
        for (const auto& row : b.ignore_mask)
            for (uint8_t m : row) CHECK(m == 0);  // no padding anywhere
        unmasked += b.unmasked_positions();
    }
    CHECK(unmasked == 3 * 3);  // Σ (len − 1)

    std::vector<std::vector<int32_t>> ragged = {{1, 2, 3, 4, 5}, {6, 7}};
    auto rb = pack_batches(ragged, 2, 16, 99);
    REQUIRE(rb.size() == 1);
    CHECK(rb[0].unmasked_positions() == 4 + 1);
    CHECK(rb[0].inputs[1].size() == 4);
    CHECK(rb[0].inputs[1][2] == 99);  // pad token fills the tail
    CHECK(rb[0].ignore_mask[1][1] == 1);
}

TEST_CASE("pack_batches rejects over-long sequences") {
    std::vector<std::vector<int32_t>> seqs = {{1, 2, 3, 4, 5}};
    CHECK_THROWS_AS(pack_batches(seqs, 1, 4, 99), ValueError);
}

TEST_CASE("packed batch loss equals the position-weighted mean of unpacked per-sequence losses") {
    DecoderConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.d_ffn = 32;
    cfg.vocab_text_size = 20;
    cfg.max_seq_len = 32;
    Rng rng(5);
    ModelParams m = init_dense_model(cfg, rng);

    std::vector<std::vector<int32_t>> seqs = {{1, 2, 3, 4, 5, 6}, {7, 8, 9}, {10, 11, 12, 13}};
    auto batches = pack_batches(seqs, 3, 32, 20);
    REQUIRE(batches.size() == 1);
    Tape t(Tape::Mode::NoGrad);
    const double packed = batch_loss(t, m, batches[0], {}).item();

    // oracle: independent per-sequence forwards, weighted by position count
    double total = 0.0;
    int64_t count = 0;
    for (const auto& seq : seqs) {
        std::vector<int32_t> in(seq.begin(), seq.end() - 1);
        std::vector<int32_t> tg(seq.begin() + 1, seq.end());
        std::vector<uint8_t> ig(in.size(), 0);
        Tape t2(Tape::Mode::NoGrad);
        const double l = t2.cross_entropy_next_token(decoder_forward(t2, m, in), tg, ig).item();
        total += l * static_cast<double>(in.size());
        count += static_cast<int64_t>(in.size());
    }
    CHECK(packed == doctest::Approx(total / static_cast<double>(count)).epsilon(1e-10));
}

TEST_CASE("stage plan defaults mirror the two-stage schedule") {
    const StagePlan plan = stage_plan_default();
    CHECK(plan.low.epochs == 5);
    CHECK(plan.high.epochs == 5);
    CHECK(plan.low.image_len == 16);
    CHECK(plan.high.image_len == 64);
    CHECK(plan.high.image_len / plan.low.image_len == 4);
    CHECK(plan.low.n_samples == 8000);
    CHECK(plan.high.n_samples == 7000);
    CHECK(static_cast<double>(plan.low.n_samples) / static_cast<double>(plan.high.n_samples) ==
          doctest::Approx(4.0 / 3.5).epsilon(1e-12));
}

TEST_CASE("dataset files round-trip through the documented format") {
    Dataset d = generate_corpus(small_spec(21));
    const std::string path = "test_dataset.tokens";
    write_dataset(d, path);
    Dataset back = read_dataset(path);
    CHECK(back.sequences == d.sequences);
    CHECK(back.labels == d.labels);
    CHECK(back.spec.vocab_text == d.spec.vocab_text);
    CHECK(back.spec.sample_seed == d.spec.sample_seed);
    std::remove(path.c_str());
    std::remove((path + ".meta.json").c_str());
}

TEST_CASE("corpus spec validation") {
    CorpusSpec s = small_spec();
    s.vocab_image = 2;
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s = small_spec();
    s.text_len = 0;
    CHECK_THROWS_AS(s.validate(), ConfigError);
}
