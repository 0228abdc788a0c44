#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmoe/rng.hpp"
#include "mmoe/vocab_layout.hpp"

namespace mmoe {

// Two-modality corpus generator. Text comes from a seeded order-2 Markov
// chain; the block of new-modality tokens from a per-class order-1 chain
// whose class is a fixed function of the text prefix, so the block is
// predictable from the text in principle. Every sequence is laid out
// text⁺ boi image⁺ eoi.
struct CorpusSpec {
    int64_t vocab_text = 512;
    int64_t vocab_image = 256;
    int n_classes = 4;
    int text_len = 16;
    int image_len = 16;
    int64_t n_samples = 1000;
    uint64_t source_seed = 7;  // transition tables (shared across splits)
    uint64_t sample_seed = 1;  // draws (disjoint per split)

    VocabLayout layout() const { return VocabLayout{vocab_text, vocab_image, 2}; }
    void validate() const;
};

struct Dataset {
    CorpusSpec spec;
    VocabLayout layout;
    std::vector<std::vector<int32_t>> sequences;
    std::vector<int32_t> labels;  // latent class per sequence; evaluation only

    int64_t latent_class_of_prefix(const std::vector<int32_t>& seq) const;
};

Dataset generate_corpus(const CorpusSpec& spec);

// Dense next-token distribution of the class-conditional chain for one
// previous token (prev = -1 gives the start distribution). This is the
// ground-truth table the sampler draws from.
std::vector<double> image_transition_row(const CorpusSpec& spec, int latent_class, int64_t prev);

// Pure-text sequences from the same order-2 source as `source_seed`.
std::vector<std::vector<int32_t>> generate_text_corpus(int64_t vocab_text, uint64_t source_seed, int len,
                                                       int64_t n_samples, uint64_t sample_seed);

// Conditional-vs-unconditional bigram comparison over the new-modality
// blocks; the conditional model sees the true latent class. A corpus carries
// usable training signal only if conditioning helps.
struct LearnabilityReport {
    double ppl_conditional = 0.0;
    double ppl_unconditional = 0.0;
    bool ok() const { return ppl_conditional < ppl_unconditional; }
};

LearnabilityReport image_learnability(const Dataset& data);

// Right-padded next-token batches. Inputs keep the pad token as given; loss
// masking plus causal attention make the pad slots inert, and batch_loss
// substitutes a valid id before embedding.
struct PackedBatch {
    std::vector<std::vector<int32_t>> inputs;       // [n][width], width = max len − 1
    std::vector<std::vector<int32_t>> targets;      // shifted by one
    std::vector<std::vector<uint8_t>> ignore_mask;  // 1 = excluded from the loss
    std::vector<int32_t> lengths;                   // original sequence lengths
    int32_t pad_token = -1;

    int64_t unmasked_positions() const;
};

std::vector<PackedBatch> pack_batches(const std::vector<std::vector<int32_t>>& sequences, int batch_size,
                                      int max_seq_len, int32_t pad_token, Rng* shuffle_rng = nullptr);

// Two-stage schedule: short new-modality blocks first, then 4× longer ones,
// five epochs each, with sample counts in the 4 : 3.5 ratio.
struct StageSpec {
    std::string id;
    int image_len = 0;
    int epochs = 0;
    int64_t n_samples = 0;
};

struct StagePlan {
    StageSpec low, high;
};

StagePlan stage_plan_default();

// One sequence per line of space-separated decimal ids; spec and labels in a
// companion "<path>.meta.json".
void write_dataset(const Dataset& data, const std::string& path);
Dataset read_dataset(const std::string& path);

}  // namespace mmoe
