#include "mmoe/vocab.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mmoe {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

void append_rows(Tensor& t, int64_t new_rows) {
    const int64_t d = t.cols();
    t->data.resize(t->data.size() + static_cast<size_t>(new_rows * d), 0.0);
    t->shape[0] += new_rows;
    if (!t->grad.empty()) t->grad.resize(t->data.size(), 0.0);
}

}  // namespace

ExpansionReport expand_vocabulary(ModelParams& model, const VocabLayout& layout) {
    if (model.expansion) throw ValueError("expand_vocabulary: vocabulary already expanded");
    if (model.embedding.rows() != layout.vocab_text)
        throw ValueError("expand_vocabulary: model has " + std::to_string(model.embedding.rows()) +
                         " rows, layout expects |V_t| = " + std::to_string(layout.vocab_text));
    const int64_t t_new = layout.new_tokens();
    const int64_t v_old = layout.vocab_text;

    append_rows(model.embedding, t_new);
    if (!model.config.tie_head) append_rows(model.head, t_new);

    // Only the appended rows may train from here on.
    auto set_mask = [&](Tensor& t) {
        t->row_mask.assign(static_cast<size_t>(t.rows()), 0);
        for (int64_t r = v_old; r < t.rows(); ++r) t->row_mask[static_cast<size_t>(r)] = 1;
    };
    set_mask(model.embedding);
    if (!model.config.tie_head) set_mask(model.head);

    model.expansion = layout;
    ExpansionReport rep;
    rep.added_per_matrix = VocabLayout::added_params_per_matrix(static_cast<uint64_t>(t_new),
                                                                static_cast<uint64_t>(model.config.d_model));
    rep.new_rows_begin = v_old;
    rep.new_rows_end = v_old + t_new;
    return rep;
}

InitScheme init_scheme_from_string(const std::string& s) {
    if (s == "random") return InitScheme::Random;
    if (s == "mean") return InitScheme::Mean;
    if (s == "gw") return InitScheme::GW;
    throw ConfigError("unknown init scheme '" + s + "' (expected random|mean|gw)");
}

const char* init_scheme_name(InitScheme s) {
    switch (s) {
        case InitScheme::Random: return "random";
        case InitScheme::Mean: return "mean";
        case InitScheme::GW: return "gw";
    }
    return "?";
}

namespace {

// Existing-rows view as a standalone tensor.
Tensor copy_rows(const Tensor& t, int64_t r0, int64_t r1) {
    Tensor out = Tensor::zeros({r1 - r0, t.cols()}, false);
    std::copy_n(t->data.data() + r0 * t.cols(), (r1 - r0) * t.cols(), out->data.data());
    return out;
}

void write_rows(Tensor& t, int64_t r0, const Tensor& rows) {
    std::copy_n(rows->data.data(), rows.size(), t->data.data() + r0 * t.cols());
}

struct AnchorSolve {
    GwResult result;
    std::vector<int64_t> src_anchors, dst_anchors;
};

MetricSpace subspace(const MetricSpace& s, const std::vector<int64_t>& idx) {
    MetricSpace out = MetricSpace::uniform(static_cast<int64_t>(idx.size()));
    for (size_t i = 0; i < idx.size(); ++i)
        for (size_t j = 0; j < idx.size(); ++j)
            out.d(static_cast<int64_t>(i), static_cast<int64_t>(j)) = s.d(idx[i], idx[j]);
    return out;
}

std::vector<int64_t> pick_anchors(int64_t n, int64_t want, Rng& rng) {
    std::vector<int64_t> all(static_cast<size_t>(n));
    std::iota(all.begin(), all.end(), 0);
    if (want >= n) return all;
    rng.shuffle(all);
    all.resize(static_cast<size_t>(want));
    std::sort(all.begin(), all.end());
    return all;
}

// Solve on anchor subsets when the full problem is too large, then extend:
// each non-anchor target copies the projected row of its nearest anchor in
// the destination geometry.
Tensor gw_rows_for(const Tensor& existing_rows, const MetricSpace& dst_geometry, const GwInitInputs& gw,
                   GwResult* out_result) {
    const int64_t n = existing_rows.rows(), m = dst_geometry.n;
    const int64_t max_anchors = std::max<int64_t>(2, gw.max_anchors);
    if (n <= max_anchors && m <= max_anchors) {
        MetricSpace src = pairwise_distance_matrix(existing_rows, DistanceMetric::Euclidean);
        GwResult res = entropic_gw_coupling(src, dst_geometry, gw.solver);
        Tensor rows = barycentric_project(res.coupling, existing_rows);
        if (out_result) *out_result = std::move(res);
        return rows;
    }

    Rng rng(derive_seed(gw.anchor_seed, 0x616e6368));
    const auto src_idx = pick_anchors(n, max_anchors, rng);
    const auto dst_idx = pick_anchors(m, max_anchors, rng);
    Tensor src_rows = Tensor::zeros({static_cast<int64_t>(src_idx.size()), existing_rows.cols()}, false);
    for (size_t i = 0; i < src_idx.size(); ++i)
        std::copy_n(existing_rows->data.data() + src_idx[i] * existing_rows.cols(), existing_rows.cols(),
                    src_rows->data.data() + static_cast<int64_t>(i) * existing_rows.cols());
    MetricSpace src = pairwise_distance_matrix(src_rows, DistanceMetric::Euclidean);
    MetricSpace dst = subspace(dst_geometry, dst_idx);
    GwResult res = entropic_gw_coupling(src, dst, gw.solver);
    Tensor anchor_rows = barycentric_project(res.coupling, src_rows);

    Tensor rows = Tensor::zeros({m, existing_rows.cols()}, false);
    for (int64_t y = 0; y < m; ++y) {
        int64_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (size_t a = 0; a < dst_idx.size(); ++a) {
            const double dd = dst_geometry.d(y, dst_idx[a]);
            if (dd < best_d) {
                best_d = dd;
                best = static_cast<int64_t>(a);
            }
        }
        std::copy_n(anchor_rows->data.data() + best * rows.cols(), rows.cols(), rows->data.data() + y * rows.cols());
    }
    if (out_result) *out_result = std::move(res);
    return rows;
}

}  // namespace

InitResult init_new_rows(ModelParams& model, InitScheme scheme, const GwInitInputs* gw_inputs, uint64_t seed) {
    if (!model.expansion) throw ValueError("init_new_rows: expand the vocabulary first");
    const auto& layout = *model.expansion;
    const int64_t v_old = layout.vocab_text;
    const int64_t t_new = layout.new_tokens();
    InitResult out;

    auto init_matrix = [&](Tensor& mat, uint64_t stream, GwResult* solve_out) {
        Tensor existing = copy_rows(mat, 0, v_old);
        switch (scheme) {
            case InitScheme::Random: {
                double mean = 0.0;
                for (double v : existing->data) mean += v;
                mean /= static_cast<double>(existing.size());
                double var = 0.0;
                for (double v : existing->data) var += (v - mean) * (v - mean);
                const double stddev = std::sqrt(var / static_cast<double>(existing.size()));
                Rng rng(derive_seed(seed, stream));
                Tensor rows = Tensor::randn({t_new, mat.cols()}, rng, stddev, false);
                write_rows(mat, v_old, rows);
                break;
            }
            case InitScheme::Mean: {
                std::vector<double> mean(static_cast<size_t>(mat.cols()), 0.0);
                for (int64_t r = 0; r < v_old; ++r)
                    for (int64_t c = 0; c < mat.cols(); ++c) mean[static_cast<size_t>(c)] += existing.at(r, c);
                for (auto& v : mean) v /= static_cast<double>(v_old);
                for (int64_t r = v_old; r < v_old + t_new; ++r)
                    for (int64_t c = 0; c < mat.cols(); ++c) mat.at(r, c) = mean[static_cast<size_t>(c)];
                break;
            }
            case InitScheme::GW: {
                if (!gw_inputs) throw ValueError("init_new_rows: gw scheme needs a source geometry");
                if (gw_inputs->geometry.n != t_new)
                    throw ValueError("init_new_rows: geometry has " + std::to_string(gw_inputs->geometry.n) +
                                     " points, expected T = " + std::to_string(t_new));
                GwInitInputs local = *gw_inputs;
                local.anchor_seed = derive_seed(gw_inputs->anchor_seed ? gw_inputs->anchor_seed : seed, stream);
                Tensor rows = gw_rows_for(existing, gw_inputs->geometry, local, solve_out);
                write_rows(mat, v_old, rows);
                break;
            }
        }
    };

    GwResult embed_solve, head_solve;
    init_matrix(model.embedding, 1, &embed_solve);
    if (scheme == InitScheme::GW) out.embedding_solve = std::move(embed_solve);
    if (!model.config.tie_head) {
        init_matrix(model.head, 2, &head_solve);
        if (scheme == InitScheme::GW) out.head_solve = std::move(head_solve);
    }
    return out;
}

GeometryMode geometry_mode_from_string(const std::string& s) {
    if (s == "cooccurrence") return GeometryMode::Cooccurrence;
    if (s == "codebook-file") return GeometryMode::CodebookFile;
    if (s == "random") return GeometryMode::Random;
    throw ConfigError("unknown geometry mode '" + s + "' (expected cooccurrence|codebook-file|random)");
}

namespace {

MetricSpace cooccurrence_geometry(const Dataset& corpus, const GeometryOptions& opts,
                                  std::vector<std::string>* warnings) {
    const VocabLayout layout = corpus.layout;
    const int64_t t_count = layout.new_tokens();
    EMat counts = EMat::Zero(t_count, t_count);
    std::vector<int64_t> occurrences(static_cast<size_t>(t_count), 0);

    for (const auto& seq : corpus.sequences) {
        // Window over the new-token block only (ids >= |V_t|), boundary
        // markers included.
        std::vector<int64_t> block;
        for (int32_t id : seq)
            if (layout.is_new(id)) block.push_back(id - layout.vocab_text);
        for (size_t i = 0; i < block.size(); ++i) {
            ++occurrences[static_cast<size_t>(block[i])];
            for (int w = 1; w <= opts.window; ++w) {
                if (i + static_cast<size_t>(w) >= block.size()) break;
                counts(block[i], block[i + static_cast<size_t>(w)]) += 1.0;
                counts(block[i + static_cast<size_t>(w)], block[i]) += 1.0;
            }
        }
    }

    const double total = counts.sum();
    if (total <= 0.0) throw ValueError("image_side_geometry: corpus has no co-occurring new-modality tokens");
    const Eigen::VectorXd row_tot = counts.rowwise().sum();

    // Positive PMI: log(P(i,j) / (P(i)P(j))) clipped at zero.
    EMat ppmi = EMat::Zero(t_count, t_count);
    for (int64_t i = 0; i < t_count; ++i) {
        if (row_tot(i) <= 0.0) continue;
        for (int64_t j = 0; j < t_count; ++j) {
            if (counts(i, j) <= 0.0 || row_tot(j) <= 0.0) continue;
            const double pmi = std::log(counts(i, j) * total / (row_tot(i) * row_tot(j)));
            ppmi(i, j) = std::max(pmi, 0.0);
        }
    }

    const int64_t dim = std::min<int64_t>(opts.factor_dim, t_count);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(ppmi);
    if (eig.info() != Eigen::Success) throw NumericError("image_side_geometry: eigendecomposition failed");
    // Largest eigenvalues live at the tail of Eigen's ascending order.
    EMat vectors = EMat::Zero(t_count, dim);
    for (int64_t k = 0; k < dim; ++k) {
        const int64_t src = t_count - 1 - k;
        const double lambda = std::max(eig.eigenvalues()(src), 0.0);
        vectors.col(k) = eig.eigenvectors().col(src) * std::sqrt(lambda);
    }

    // Unobserved tokens take the centroid of the observed ones.
    Eigen::RowVectorXd centroid = Eigen::RowVectorXd::Zero(dim);
    int64_t observed = 0;
    for (int64_t i = 0; i < t_count; ++i)
        if (occurrences[static_cast<size_t>(i)] > 0) {
            centroid += vectors.row(i);
            ++observed;
        }
    if (observed > 0) centroid /= static_cast<double>(observed);
    for (int64_t i = 0; i < t_count; ++i) {
        if (occurrences[static_cast<size_t>(i)] > 0) continue;
        vectors.row(i) = centroid;
        if (warnings)
            warnings->push_back("new-modality token " + std::to_string(i) +
                                " never observed in the corpus; assigned centroid geometry");
    }

    Tensor vt = Tensor::zeros({t_count, dim}, false);
    std::copy_n(vectors.data(), vectors.size(), vt->data.data());
    return pairwise_distance_matrix(vt, DistanceMetric::Euclidean);
}

}  // namespace

MetricSpace image_side_geometry(const Dataset& corpus, const GeometryOptions& opts,
                                std::vector<std::string>* warnings) {
    switch (opts.mode) {
        case GeometryMode::Cooccurrence:
            return cooccurrence_geometry(corpus, opts, warnings);
        case GeometryMode::CodebookFile: {
            if (opts.codebook_path.empty()) throw ConfigError("image_side_geometry: codebook path not set");
            Tensor vectors = read_codebook(opts.codebook_path);
            if (vectors.rows() != corpus.layout.new_tokens())
                throw ValueError("image_side_geometry: codebook has " + std::to_string(vectors.rows()) +
                                 " rows, expected T = " + std::to_string(corpus.layout.new_tokens()));
            return pairwise_distance_matrix(vectors, DistanceMetric::Euclidean);
        }
        case GeometryMode::Random: {
            Rng rng(opts.seed);
            Tensor vectors = Tensor::randn({corpus.layout.new_tokens(), opts.random_dim}, rng, 1.0, false);
            return pairwise_distance_matrix(vectors, DistanceMetric::Euclidean);
        }
    }
    throw ConfigError("image_side_geometry: bad mode");
}

Tensor read_codebook(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("read_codebook: cannot open " + path);
    int64_t n = 0, d = 0;
    if (!(f >> n >> d) || n < 1 || d < 1) throw IoError("read_codebook: bad header in " + path);
    Tensor out = Tensor::zeros({n, d}, false);
    for (int64_t i = 0; i < n * d; ++i)
        if (!(f >> out->data[static_cast<size_t>(i)]))
            throw IoError("read_codebook: truncated data in " + path);
    return out;
}

void write_codebook(const Tensor& vectors, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("write_codebook: cannot open " + path);
    f << vectors.rows() << " " << vectors.cols() << "\n";
    f.precision(17);
    for (int64_t r = 0; r < vectors.rows(); ++r) {
        for (int64_t c = 0; c < vectors.cols(); ++c) f << (c ? " " : "") << vectors.at(r, c);
        f << "\n";
    }
    if (!f) throw IoError("write_codebook: write failed for " + path);
}

}  // namespace mmoe
