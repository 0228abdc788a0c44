#include "mmoe/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace mmoe {

void CorpusSpec::validate() const {
    if (vocab_text < 4 || vocab_image < 4) throw ConfigError("corpus: vocab sizes must be >= 4");
    if (text_len < 1 || image_len < 1) throw ConfigError("corpus: lengths must be >= 1");
    if (n_classes < 1) throw ConfigError("corpus: n_classes must be >= 1");
    if (n_samples < 0) throw ConfigError("corpus: n_samples must be >= 0");
}

namespace {

// Categorical over a small support with seeded log-normal weights.
struct SupportDist {
    std::vector<int32_t> tokens;
    std::vector<double> cum;  // cumulative, last entry 1

    int32_t sample(Rng& rng) const {
        const double u = rng.uniform();
        for (size_t i = 0; i < cum.size(); ++i)
            if (u < cum[i]) return tokens[i];
        return tokens.back();
    }
};

SupportDist make_support(int64_t vocab, int support, Rng& rng, double spread = 1.2, bool zipf_ids = false) {
    SupportDist d;
    d.tokens.reserve(static_cast<size_t>(support));
    std::vector<double> w(static_cast<size_t>(support));
    for (int i = 0; i < support; ++i) {
        int32_t tok;
        if (zipf_ids) {
            // skewed marginal: low ids dominate, like a frequency-sorted vocabulary
            const double u = rng.uniform();
            tok = static_cast<int32_t>(static_cast<double>(vocab) * u * u * u);
            tok = std::min<int32_t>(tok, static_cast<int32_t>(vocab) - 1);
        } else {
            tok = static_cast<int32_t>(rng.uniform_int(static_cast<uint64_t>(vocab)));
        }
        d.tokens.push_back(tok);
        w[static_cast<size_t>(i)] = std::exp(spread * rng.normal());
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    double acc = 0.0;
    d.cum.reserve(w.size());
    for (double v : w) {
        acc += v / total;
        d.cum.push_back(acc);
    }
    d.cum.back() = 1.0;
    return d;
}

// Order-2 text chain with tied rows: the context class factors over the two
// previous tokens (residue classes), so the table stays desk-sized at any
// vocabulary and the class structure is low-rank enough for a small decoder
// to pick up.
struct TextSource {
    static constexpr int kClasses1 = 8, kClasses2 = 4;
    static constexpr int kContexts = kClasses1 * kClasses2;
    static constexpr int kSupport = 12;
    int64_t vocab;
    std::vector<SupportDist> table;

    TextSource(int64_t vocab_text, uint64_t source_seed) : vocab(vocab_text) {
        table.reserve(kContexts);
        for (int c = 0; c < kContexts; ++c) {
            Rng rng(derive_seed(source_seed, 0x7478 * 131 + static_cast<uint64_t>(c)));
            table.push_back(make_support(vocab, kSupport, rng, 1.5, /*zipf_ids=*/true));
        }
    }

    int ctx(int32_t prev2, int32_t prev1) const {
        return static_cast<int>((prev1 % kClasses1) * kClasses2 + (prev2 % kClasses2));
    }

    void sample_into(std::vector<int32_t>& out, int len, Rng& rng) const {
        const double u = rng.uniform();
        int32_t p2 = std::min<int32_t>(static_cast<int32_t>(static_cast<double>(vocab) * u * u * u),
                                       static_cast<int32_t>(vocab) - 1);
        out.push_back(p2);
        int32_t p1 = p2;
        for (int i = 1; i < len; ++i) {
            const int32_t next = table[static_cast<size_t>(ctx(p2, p1))].sample(rng);
            out.push_back(next);
            p2 = p1;
            p1 = next;
        }
    }
};

// Order-1 chain over new-modality tokens, one table per latent class.
struct ImageSource {
    static constexpr int kSupport = 8;
    int64_t vocab;
    int n_classes;
    uint64_t source_seed;

    ImageSource(int64_t vocab_image, int classes, uint64_t seed)
        : vocab(vocab_image), n_classes(classes), source_seed(seed) {}

    SupportDist row(int cls, int64_t prev) const {  // prev = -1 is the start row
        Rng rng(derive_seed(source_seed, 0x696d67ULL * 1000003 + static_cast<uint64_t>(cls) * 65537 +
                                             static_cast<uint64_t>(prev + 1)));
        return make_support(vocab, kSupport, rng);
    }

    void sample_into(std::vector<int32_t>& out, int cls, int len, int32_t base, Rng& rng) const {
        int64_t prev = -1;
        for (int i = 0; i < len; ++i) {
            const int32_t tok = row(cls, prev).sample(rng);
            out.push_back(base + tok);
            prev = tok;
        }
    }
};

}  // namespace

std::vector<double> image_transition_row(const CorpusSpec& spec, int latent_class, int64_t prev) {
    const ImageSource image(spec.vocab_image, spec.n_classes, spec.source_seed);
    const SupportDist dist = image.row(latent_class, prev);
    std::vector<double> row(static_cast<size_t>(spec.vocab_image), 0.0);
    double prev_cum = 0.0;
    for (size_t i = 0; i < dist.tokens.size(); ++i) {
        row[static_cast<size_t>(dist.tokens[i])] += dist.cum[i] - prev_cum;
        prev_cum = dist.cum[i];
    }
    return row;
}

int64_t Dataset::latent_class_of_prefix(const std::vector<int32_t>& seq) const {
    if (seq.empty()) throw ValueError("latent_class_of_prefix: empty sequence");
    return seq[0] % spec.n_classes;
}

Dataset generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    Dataset out;
    out.spec = spec;
    out.layout = spec.layout();
    const TextSource text(spec.vocab_text, spec.source_seed);
    const ImageSource image(spec.vocab_image, spec.n_classes, spec.source_seed);
    const int32_t image_base = static_cast<int32_t>(out.layout.image_base());

    out.sequences.reserve(static_cast<size_t>(spec.n_samples));
    out.labels.reserve(static_cast<size_t>(spec.n_samples));
    for (int64_t s = 0; s < spec.n_samples; ++s) {
        Rng rng(derive_seed(spec.sample_seed, static_cast<uint64_t>(s)));
        std::vector<int32_t> seq;
        seq.reserve(static_cast<size_t>(spec.text_len + spec.image_len + 2));
        text.sample_into(seq, spec.text_len, rng);
        const int cls = static_cast<int>(seq[0] % spec.n_classes);
        seq.push_back(static_cast<int32_t>(out.layout.boi()));
        image.sample_into(seq, cls, spec.image_len, image_base, rng);
        seq.push_back(static_cast<int32_t>(out.layout.eoi()));
        out.sequences.push_back(std::move(seq));
        out.labels.push_back(cls);
    }
    return out;
}

std::vector<std::vector<int32_t>> generate_text_corpus(int64_t vocab_text, uint64_t source_seed, int len,
                                                       int64_t n_samples, uint64_t sample_seed) {
    if (len < 2) throw ConfigError("generate_text_corpus: len must be >= 2");
    const TextSource text(vocab_text, source_seed);
    std::vector<std::vector<int32_t>> out;
    out.reserve(static_cast<size_t>(n_samples));
    for (int64_t s = 0; s < n_samples; ++s) {
        Rng rng(derive_seed(sample_seed, 0x74657874ULL + static_cast<uint64_t>(s)));
        std::vector<int32_t> seq;
        seq.reserve(static_cast<size_t>(len));
        text.sample_into(seq, len, rng);
        out.push_back(std::move(seq));
    }
    return out;
}

LearnabilityReport image_learnability(const Dataset& data) {
    const int64_t v = data.spec.vocab_image;
    const int classes = data.spec.n_classes;
    const int32_t base = static_cast<int32_t>(data.layout.image_base());
    const double alpha = 0.5;  // add-alpha smoothing

    // counts[cls][prev*v + next]; cls index `classes` pools everything.
    std::vector<std::vector<double>> counts(static_cast<size_t>(classes + 1),
                                            std::vector<double>(static_cast<size_t>(v * v), 0.0));
    auto image_block = [&](const std::vector<int32_t>& seq) {
        std::vector<int32_t> block;
        for (int32_t id : seq)
            if (id >= base && id < base + v) block.push_back(id - base);
        return block;
    };
    for (size_t s = 0; s < data.sequences.size(); ++s) {
        const auto block = image_block(data.sequences[s]);
        const int cls = data.labels[s];
        for (size_t i = 0; i + 1 < block.size(); ++i) {
            const size_t idx = static_cast<size_t>(block[i]) * static_cast<size_t>(v) + static_cast<size_t>(block[i + 1]);
            counts[static_cast<size_t>(cls)][idx] += 1.0;
            counts[static_cast<size_t>(classes)][idx] += 1.0;
        }
    }
    std::vector<std::vector<double>> row_tot(static_cast<size_t>(classes + 1),
                                             std::vector<double>(static_cast<size_t>(v), 0.0));
    for (int c = 0; c <= classes; ++c)
        for (int64_t r = 0; r < v; ++r)
            for (int64_t j = 0; j < v; ++j)
                row_tot[static_cast<size_t>(c)][static_cast<size_t>(r)] +=
                    counts[static_cast<size_t>(c)][static_cast<size_t>(r * v + j)];

    double nll_cond = 0.0, nll_unc = 0.0;
    int64_t n_obs = 0;
    for (size_t s = 0; s < data.sequences.size(); ++s) {
        const auto block = image_block(data.sequences[s]);
        const int cls = data.labels[s];
        for (size_t i = 0; i + 1 < block.size(); ++i) {
            const size_t idx = static_cast<size_t>(block[i]) * static_cast<size_t>(v) + static_cast<size_t>(block[i + 1]);
            const double pc = (counts[static_cast<size_t>(cls)][idx] + alpha) /
                              (row_tot[static_cast<size_t>(cls)][static_cast<size_t>(block[i])] + alpha * static_cast<double>(v));
            const double pu = (counts[static_cast<size_t>(classes)][idx] + alpha) /
                              (row_tot[static_cast<size_t>(classes)][static_cast<size_t>(block[i])] + alpha * static_cast<double>(v));
            nll_cond -= std::log(pc);
            nll_unc -= std::log(pu);
            ++n_obs;
        }
    }
    if (n_obs == 0) throw ValueError("image_learnability: corpus has no new-modality transitions");
    LearnabilityReport rep;
    rep.ppl_conditional = std::exp(nll_cond / static_cast<double>(n_obs));
    rep.ppl_unconditional = std::exp(nll_unc / static_cast<double>(n_obs));
    return rep;
}

int64_t PackedBatch::unmasked_positions() const {
    int64_t n = 0;
    for (const auto& row : ignore_mask)
        for (uint8_t m : row)
            if (!m) ++n;
    return n;
}

std::vector<PackedBatch> pack_batches(const std::vector<std::vector<int32_t>>& sequences, int batch_size,
                                      int max_seq_len, int32_t pad_token, Rng* shuffle_rng) {
    if (batch_size < 1) throw ConfigError("pack_batches: batch_size must be >= 1");
    for (size_t s = 0; s < sequences.size(); ++s)
        if (static_cast<int>(sequences[s].size()) > max_seq_len)
            throw ValueError("pack_batches: sequence " + std::to_string(s) + " of length " +
                             std::to_string(sequences[s].size()) + " exceeds max_seq_len " +
                             std::to_string(max_seq_len));

    std::vector<size_t> order(sequences.size());
    std::iota(order.begin(), order.end(), 0);
    if (shuffle_rng) shuffle_rng->shuffle(order);

    std::vector<PackedBatch> batches;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
        PackedBatch b;
        b.pad_token = pad_token;
        int64_t width = 0;
        for (size_t i = start; i < end; ++i)
            width = std::max<int64_t>(width, static_cast<int64_t>(sequences[order[i]].size()) - 1);
        for (size_t i = start; i < end; ++i) {
            const auto& seq = sequences[order[i]];
            const int64_t len = static_cast<int64_t>(seq.size());
            std::vector<int32_t> in(static_cast<size_t>(width), pad_token);
            std::vector<int32_t> tg(static_cast<size_t>(width), 0);
            std::vector<uint8_t> ig(static_cast<size_t>(width), 1);
            for (int64_t t = 0; t + 1 < len; ++t) {
                in[static_cast<size_t>(t)] = seq[static_cast<size_t>(t)];
                tg[static_cast<size_t>(t)] = seq[static_cast<size_t>(t + 1)];
                ig[static_cast<size_t>(t)] = 0;
            }
            b.inputs.push_back(std::move(in));
            b.targets.push_back(std::move(tg));
            b.ignore_mask.push_back(std::move(ig));
            b.lengths.push_back(static_cast<int32_t>(len));
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

StagePlan stage_plan_default() {
    StagePlan plan;
    plan.low = {"low", 16, 5, 8000};
    plan.high = {"high", 64, 5, 7000};
    return plan;
}

void write_dataset(const Dataset& data, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("write_dataset: cannot open " + path);
    for (const auto& seq : data.sequences) {
        for (size_t i = 0; i < seq.size(); ++i) f << (i ? " " : "") << seq[i];
        f << "\n";
    }
    if (!f) throw IoError("write_dataset: write failed for " + path);

    nlohmann::json meta;
    meta["vocab_text"] = data.spec.vocab_text;
    meta["vocab_image"] = data.spec.vocab_image;
    meta["n_classes"] = data.spec.n_classes;
    meta["text_len"] = data.spec.text_len;
    meta["image_len"] = data.spec.image_len;
    meta["n_samples"] = data.spec.n_samples;
    meta["source_seed"] = data.spec.source_seed;
    meta["sample_seed"] = data.spec.sample_seed;
    meta["labels"] = data.labels;
    std::ofstream mf(path + ".meta.json");
    if (!mf) throw IoError("write_dataset: cannot open " + path + ".meta.json");
    mf << meta.dump(2) << "\n";
}

Dataset read_dataset(const std::string& path) {
    std::ifstream mf(path + ".meta.json");
    if (!mf) throw IoError("read_dataset: cannot open " + path + ".meta.json");
    nlohmann::json meta = nlohmann::json::parse(mf);
    Dataset out;
    out.spec.vocab_text = meta.at("vocab_text").get<int64_t>();
    out.spec.vocab_image = meta.at("vocab_image").get<int64_t>();
    out.spec.n_classes = meta.at("n_classes").get<int>();
    out.spec.text_len = meta.at("text_len").get<int>();
    out.spec.image_len = meta.at("image_len").get<int>();
    out.spec.n_samples = meta.at("n_samples").get<int64_t>();
    out.spec.source_seed = meta.at("source_seed").get<uint64_t>();
    out.spec.sample_seed = meta.at("sample_seed").get<uint64_t>();
    out.labels = meta.at("labels").get<std::vector<int32_t>>();
    out.layout = out.spec.layout();

    std::ifstream f(path);
    if (!f) throw IoError("read_dataset: cannot open " + path);
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::vector<int32_t> seq;
        int32_t id;
        while (ss >> id) seq.push_back(id);
        out.sequences.push_back(std::move(seq));
    }
    return out;
}

}  // namespace mmoe
