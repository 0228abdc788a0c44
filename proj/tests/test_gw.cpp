#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "mmoe/data.hpp"
#include "mmoe/gw.hpp"
#include "mmoe/moe.hpp"
#include "mmoe/vocab.hpp"

using namespace mmoe;

namespace {

// Unregularized square-loss objective of an explicit coupling.
double gw_objective(const MetricSpace& a, const MetricSpace& b, const std::vector<double>& gamma) {
    double obj = 0.0;
    for (int64_t i = 0; i < a.n; ++i)
        for (int64_t j = 0; j < b.n; ++j)
            for (int64_t k = 0; k < a.n; ++k)
                for (int64_t l = 0; l < b.n; ++l) {
                    const double diff = a.d(i, k) - b.d(j, l);
                    obj += diff * diff * gamma[static_cast<size_t>(i * b.n + j)] *
                           gamma[static_cast<size_t>(k * b.n + l)];
                }
    return obj;
}

// Exhaustive search over all n! permutation couplings.
double best_permutation_objective(const MetricSpace& a, const MetricSpace& b, std::vector<int>* best_perm) {
    std::vector<int> perm(static_cast<size_t>(a.n));
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
        std::vector<double> gamma(static_cast<size_t>(a.n * b.n), 0.0);
        for (int64_t i = 0; i < a.n; ++i)
            gamma[static_cast<size_t>(i * b.n + perm[static_cast<size_t>(i)])] = 1.0 / static_cast<double>(a.n);
        const double obj = gw_objective(a, b, gamma);
        if (obj < best) {
            best = obj;
            if (best_perm) *best_perm = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

MetricSpace random_space(int64_t n, int64_t dim, uint64_t seed) {
    Rng rng(seed);
    Tensor pts = Tensor::randn({n, dim}, rng, 1.0, false);
    MetricSpace s = pairwise_distance_matrix(pts, DistanceMetric::Euclidean);
    const double med = s.median_distance();
    for (auto& d : s.dist) d /= med;  // normalized so epsilon scales are comparable
    return s;
}

MetricSpace permuted(const MetricSpace& s, const std::vector<int>& perm) {
    MetricSpace out = MetricSpace::uniform(s.n);
    for (int64_t i = 0; i < s.n; ++i)
        for (int64_t j = 0; j < s.n; ++j)
            out.d(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]) = s.d(i, j);
    return out;
}

}  // namespace

TEST_CASE("pairwise distances: duplicates, unit vectors, and the double-loop oracle") {
    Tensor dup = Tensor::from_data({2, 3}, {1, 2, 3, 1, 2, 3});
    MetricSpace s0 = pairwise_distance_matrix(dup, DistanceMetric::Euclidean);
    CHECK(s0.d(0, 1) == 0.0);
    CHECK(s0.d(1, 0) == 0.0);

    Tensor units = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    MetricSpace s1 = pairwise_distance_matrix(units, DistanceMetric::Euclidean);
    CHECK(s1.d(0, 1) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));

    Rng rng(1);
    Tensor pts = Tensor::randn({5, 3}, rng, 1.0, false);
    MetricSpace s2 = pairwise_distance_matrix(pts, DistanceMetric::Euclidean);
    s2.validate();
    for (int64_t i = 0; i < 5; ++i)
        for (int64_t j = 0; j < 5; ++j) {
            double acc = 0.0;
            for (int64_t c = 0; c < 3; ++c) {
                const double d = pts.at(i, c) - pts.at(j, c);
                acc += d * d;
            }
            CHECK(s2.d(i, j) == doctest::Approx(std::sqrt(acc)).epsilon(1e-12));
        }

    Tensor with_zero = Tensor::from_data({2, 2}, {0, 0, 1, 1});
    CHECK_THROWS_AS(pairwise_distance_matrix(with_zero, DistanceMetric::Cosine), ValueError);
}

TEST_CASE("metric space validation rejects asymmetry and bad weights") {
    MetricSpace s = MetricSpace::uniform(2);
    s.d(0, 1) = 1.0;
    CHECK_THROWS_AS(s.validate(), ValueError);
    s.d(1, 0) = 1.0;
    s.validate();
    s.weights = {0.7, 0.7};
    CHECK_THROWS_AS(s.validate(), ValueError);
}

TEST_CASE("one-point spaces couple trivially with objective zero") {
    MetricSpace a = MetricSpace::uniform(1), b = MetricSpace::uniform(1);
    GwOptions opts;
    opts.epsilon = 1e-2;
    auto res = entropic_gw_coupling(a, b, opts);
    CHECK(res.coupling.gamma.size() == 1);
    CHECK(res.coupling.gamma[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(res.objective == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("identical 4-point spaces: near-zero objective and near-permutation coupling") {
    MetricSpace s = random_space(4, 3, 2);
    GwOptions opts;
    opts.epsilon = 1e-2;
    auto res = entropic_gw_coupling(s, s, opts);

    CHECK(res.objective < 1e-3);
    CHECK(res.coupling.max_marginal_violation() < 1e-6);
    // brute force: some permutation attains 0, so the solver must get close
    std::vector<int> perm;
    const double best = best_permutation_objective(s, s, &perm);
    CHECK(best == doctest::Approx(0.0).epsilon(1e-12));

    // >= 90% of each row's mass on one column, and those columns form a permutation
    std::vector<int> argmax(4, -1);
    for (int64_t i = 0; i < 4; ++i) {
        double row_mass = 0.0, best_mass = 0.0;
        for (int64_t j = 0; j < 4; ++j) {
            row_mass += res.coupling.at(i, j);
            if (res.coupling.at(i, j) > best_mass) {
                best_mass = res.coupling.at(i, j);
                argmax[static_cast<size_t>(i)] = static_cast<int>(j);
            }
        }
        CHECK(best_mass / row_mass >= 0.9);
    }
    std::vector<int> sorted(argmax);
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<int>{0, 1, 2, 3});
    // identical spaces: the identity permutation is optimal
    CHECK(argmax == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("planted permutations are recovered and match brute force at n=4..6") {
    for (int64_t n = 4; n <= 6; ++n) {
        MetricSpace src = random_space(n, 3, 100 + static_cast<uint64_t>(n));
        std::vector<int> plant(static_cast<size_t>(n));
        std::iota(plant.begin(), plant.end(), 0);
        Rng rng(200 + static_cast<uint64_t>(n));
        rng.shuffle(plant);
        MetricSpace dst = permuted(src, plant);

        std::vector<int> brute_perm;
        const double brute = best_permutation_objective(src, dst, &brute_perm);
        CHECK(brute == doctest::Approx(0.0).epsilon(1e-10));
        CHECK(brute_perm == plant);

        GwOptions opts;
        opts.epsilon = 1e-2;
        auto res = entropic_gw_coupling(src, dst, opts);
        CHECK(res.objective < 1e-3);
        for (int64_t i = 0; i < n; ++i) {
            int arg = 0;
            for (int64_t j = 1; j < n; ++j)
                if (res.coupling.at(i, j) > res.coupling.at(i, arg)) arg = static_cast<int>(j);
            CHECK(arg == plant[static_cast<size_t>(i)]);
        }
    }
}

TEST_CASE("isometric spaces up to 8 points keep objective < 1e-3") {
    for (int64_t n : {7, 8}) {
        MetricSpace s = random_space(n, 4, 300 + static_cast<uint64_t>(n));
        GwOptions opts;
        opts.epsilon = 1e-2;
        auto res = entropic_gw_coupling(s, s, opts);
        CHECK(res.objective < 1e-3);
        CHECK(res.coupling.max_marginal_violation() < 1e-6);
    }
}

TEST_CASE("rectangular problems satisfy marginals and descend monotonically") {
    MetricSpace src = random_space(9, 4, 4);
    MetricSpace dst = random_space(5, 3, 5);
    GwOptions opts;  // auto epsilon
    auto res = entropic_gw_coupling(src, dst, opts);
    CHECK(res.coupling.max_marginal_violation() < 1e-6);
    for (double g : res.coupling.gamma) CHECK(g >= 0.0);
    for (size_t i = 1; i < res.reg_objective_trace.size(); ++i)
        CHECK(res.reg_objective_trace[i] <= res.reg_objective_trace[i - 1] + 1e-9);
    CHECK(res.outer_iterations >= 1);
}

TEST_CASE("barycentric projection: identity coupling copies rows exactly") {
    Rng rng(6);
    Tensor e = Tensor::randn({4, 5}, rng, 1.0, false);
    Coupling c;
    c.n = 4;
    c.m = 4;
    c.p.assign(4, 0.25);
    c.q.assign(4, 0.25);
    c.gamma.assign(16, 0.0);
    for (int64_t i = 0; i < 4; ++i) c.gamma[static_cast<size_t>(i * 4 + i)] = 0.25;
    Tensor out = barycentric_project(c, e);
    CHECK(out->data == e->data);
}

TEST_CASE("barycentric projection: equal split lands on the midpoint") {
    Tensor e = Tensor::from_data({2, 3}, {0, 0, 0, 2, 4, 6});
    Coupling c;
    c.n = 2;
    c.m = 1;
    c.p = {0.5, 0.5};
    c.q = {1.0};
    c.gamma = {0.5, 0.5};
    Tensor out = barycentric_project(c, e);
    CHECK(out->data == std::vector<double>{1, 2, 3});
}

TEST_CASE("barycentric projection matches the gradient-equals-zero linear-algebra oracle") {
    Rng rng(7);
    Tensor e = Tensor::randn({3, 4}, rng, 1.0, false);
    Coupling c;
    c.n = 3;
    c.m = 2;
    c.p = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    c.q = {0.5, 0.5};
    c.gamma = {0.20, 1.0 / 3 - 0.20, 0.15, 1.0 / 3 - 0.15, 0.15, 1.0 / 3 - 0.15};
    Tensor out = barycentric_project(c, e);

    // oracle: solve (Σ_x γ[x,y])·e_y = Σ_x γ[x,y]·E[x] coordinate-wise
    for (int64_t y = 0; y < 2; ++y) {
        double mass = 0.0;
        std::vector<double> rhs(4, 0.0);
        for (int64_t x = 0; x < 3; ++x) {
            mass += c.at(x, y);
            for (int64_t k = 0; k < 4; ++k) rhs[static_cast<size_t>(k)] += c.at(x, y) * e.at(x, k);
        }
        for (int64_t k = 0; k < 4; ++k)
            CHECK(out.at(y, k) == doctest::Approx(rhs[static_cast<size_t>(k)] / mass).epsilon(1e-12));
    }

    // local-minimum check: perturbing any output row raises the objective
    auto objective = [&](const Tensor& rows) {
        double obj = 0.0;
        for (int64_t x = 0; x < 3; ++x)
            for (int64_t y = 0; y < 2; ++y) {
                double norm2 = 0.0;
                for (int64_t k = 0; k < 4; ++k) {
                    const double diff = e.at(x, k) - rows.at(y, k);
                    norm2 += diff * diff;
                }
                obj += c.at(x, y) * norm2;
            }
        return obj;
    };
    const double base = objective(out);
    for (int64_t y = 0; y < 2; ++y)
        for (int64_t k = 0; k < 4; ++k)
            for (double delta : {1e-3, -1e-3}) {
                Tensor bumped = out.clone();
                bumped.at(y, k) += delta;
                CHECK(objective(bumped) > base);
            }
}

TEST_CASE("barycentric projection rejects a zero-mass column naming it") {
    Tensor e = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Coupling c;
    c.n = 2;
    c.m = 2;
    c.p = {0.5, 0.5};
    c.q = {1.0, 0.0};
    c.gamma = {0.5, 0.0, 0.5, 0.0};
    CHECK_THROWS_WITH_AS(barycentric_project(c, e), doctest::Contains("column 1"), ValueError);
}

TEST_CASE("coupling export writes the documented text layout") {
    Coupling c;
    c.n = 2;
    c.m = 2;
    c.p = {0.5, 0.5};
    c.q = {0.5, 0.5};
    c.gamma = {0.5, 0.0, 0.0, 0.5};
    const std::string path = "test_coupling.txt";
    write_coupling(c, path);
    std::ifstream f(path);
    int64_t n = 0, m = 0;
    f >> n >> m;
    CHECK(n == 2);
    CHECK(m == 2);
    double v = -1;
    f >> v;
    CHECK(v == 0.5);
}

// --- vocabulary expansion and initialization --------------------------------

namespace {

ModelParams small_moe_model(uint64_t seed, int64_t vt = 24, int64_t d = 16) {
    DecoderConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = static_cast<int>(d);
    cfg.d_ffn = 32;
    cfg.vocab_text_size = static_cast<int>(vt);
    cfg.max_seq_len = 64;
    Rng rng(seed);
    ModelParams m = init_dense_model(cfg, rng);
    convert_to_moe(m, 4, 2, derive_seed(seed, 1));
    return m;
}

Dataset tiny_corpus(uint64_t seed, int64_t vi = 10, int64_t n = 200) {
    CorpusSpec spec;
    spec.vocab_text = 24;
    spec.vocab_image = vi;
    spec.n_classes = 2;
    spec.text_len = 6;
    spec.image_len = 8;
    spec.n_samples = n;
    spec.source_seed = 5;
    spec.sample_seed = seed;
    return generate_corpus(spec);
}

}  // namespace

TEST_CASE("expansion: appended rows, conserved originals, double-expansion error, arithmetic") {
    ModelParams m = small_moe_model(11);
    const std::vector<double> orig_emb = m.embedding->data;
    const std::vector<double> orig_head = m.head->data;
    VocabLayout layout{24, 10, 2};

    // text-slice logits are identical before and after expansion
    std::vector<int32_t> ids = {1, 5, 9, 20};
    Tape t0(Tape::Mode::NoGrad);
    Tensor logits_before = decoder_forward(t0, m, ids);
    auto rep = expand_vocabulary(m, layout);
    {
        Tape t1(Tape::Mode::NoGrad);
        Tensor logits_after = decoder_forward(t1, m, ids);
        for (int64_t r = 0; r < logits_before.rows(); ++r)
            for (int64_t c = 0; c < 24; ++c)
                CHECK(std::abs(logits_before.at(r, c) - logits_after.at(r, c)) < 1e-12);
    }
    CHECK(m.embedding.rows() == 24 + 12);
    CHECK(m.head.rows() == 24 + 12);
    CHECK(rep.added_per_matrix == 12u * 16u);
    CHECK(std::equal(orig_emb.begin(), orig_emb.end(), m.embedding->data.begin()));
    CHECK(std::equal(orig_head.begin(), orig_head.end(), m.head->data.begin()));
    for (int64_t r = 0; r < 24; ++r) CHECK_FALSE(m.embedding->row_trainable(r));
    for (int64_t r = 24; r < 36; ++r) CHECK(m.embedding->row_trainable(r));
    CHECK_THROWS_AS(expand_vocabulary(m, layout), ValueError);

    // the full-scale arithmetic
    CHECK(VocabLayout::added_params_per_matrix(16386, 4096) == 67117056u);
    VocabLayout paper{32000, 16384, 2};
    CHECK(paper.new_tokens() == 16386);
    CHECK(VocabLayout::added_params_per_matrix(static_cast<uint64_t>(paper.new_tokens()), 4096) == 67117056u);
}

TEST_CASE("init schemes: mean rows, random std, reproducibility, conservation") {
    ModelParams m = small_moe_model(12);
    const std::vector<double> orig = m.embedding->data;
    expand_vocabulary(m, VocabLayout{24, 10, 2});

    SUBCASE("mean: every new row equals the column mean of existing rows") {
        init_new_rows(m, InitScheme::Mean, nullptr, 1);
        for (int64_t c = 0; c < 16; ++c) {
            double mean = 0.0;
            for (int64_t r = 0; r < 24; ++r) mean += m.embedding.at(r, c);
            mean /= 24.0;
            for (int64_t r = 24; r < 36; ++r) CHECK(std::abs(m.embedding.at(r, c) - mean) < 1e-12);
        }
    }

    SUBCASE("random: matched std within 5% and seed-reproducible") {
        init_new_rows(m, InitScheme::Random, nullptr, 99);
        double mean_e = 0.0, var_e = 0.0;
        for (const double v : orig) mean_e += v;
        mean_e /= static_cast<double>(orig.size());
        for (const double v : orig) var_e += (v - mean_e) * (v - mean_e);
        const double target_std = std::sqrt(var_e / static_cast<double>(orig.size()));

        double mean_n = 0.0, var_n = 0.0;
        const int64_t count = 12 * 16;
        for (int64_t r = 24; r < 36; ++r)
            for (int64_t c = 0; c < 16; ++c) mean_n += m.embedding.at(r, c);
        mean_n /= static_cast<double>(count);
        for (int64_t r = 24; r < 36; ++r)
            for (int64_t c = 0; c < 16; ++c) var_n += (m.embedding.at(r, c) - mean_n) * (m.embedding.at(r, c) - mean_n);
        const double got_std = std::sqrt(var_n / static_cast<double>(count));
        CHECK(got_std == doctest::Approx(target_std).epsilon(0.05));

        ModelParams m2 = small_moe_model(12);
        expand_vocabulary(m2, VocabLayout{24, 10, 2});
        init_new_rows(m2, InitScheme::Random, nullptr, 99);
        CHECK(m2.embedding->data == m.embedding->data);
    }

    SUBCASE("gw scheme requires a geometry") {
        CHECK_THROWS_AS(init_new_rows(m, InitScheme::GW, nullptr, 1), ValueError);
    }

    // originals conserved bitwise by every scheme
    init_new_rows(m, InitScheme::Random, nullptr, 3);
    CHECK(std::equal(orig.begin(), orig.end(), m.embedding->data.begin()));
}

TEST_CASE("gw init lands inside the convex hull of existing rows") {
    ModelParams m = small_moe_model(13);
    expand_vocabulary(m, VocabLayout{24, 10, 2});
    // destination geometry: a subset of the text-embedding geometry itself
    Tensor subset = Tensor::zeros({12, 16});
    for (int64_t r = 0; r < 12; ++r)
        for (int64_t c = 0; c < 16; ++c) subset.at(r, c) = m.embedding.at(r * 2, c);
    GwInitInputs gw;
    gw.geometry = pairwise_distance_matrix(subset, DistanceMetric::Euclidean);
    gw.solver.epsilon = 1e-2;
    InitResult res = init_new_rows(m, InitScheme::GW, &gw, 5);
    REQUIRE(res.embedding_solve.has_value());
    REQUIRE(res.head_solve.has_value());

    for (int64_t c = 0; c < 16; ++c) {
        double lo = 1e300, hi = -1e300;
        for (int64_t r = 0; r < 24; ++r) {
            lo = std::min(lo, m.embedding.at(r, c));
            hi = std::max(hi, m.embedding.at(r, c));
        }
        for (int64_t r = 24; r < 36; ++r) {
            CHECK(m.embedding.at(r, c) >= lo - 1e-9);
            CHECK(m.embedding.at(r, c) <= hi + 1e-9);
        }
    }
}

TEST_CASE("anchor subsampling produces valid rows when the problem exceeds the anchor budget") {
    ModelParams m = small_moe_model(14, 40, 12);
    expand_vocabulary(m, VocabLayout{40, 10, 2});
    Rng rng(15);
    Tensor pts = Tensor::randn({12, 6}, rng, 1.0, false);
    GwInitInputs gw;
    gw.geometry = pairwise_distance_matrix(pts, DistanceMetric::Euclidean);
    gw.solver.epsilon = 1e-2;
    gw.max_anchors = 8;  // force the anchor path on both sides
    gw.anchor_seed = 77;
    init_new_rows(m, InitScheme::GW, &gw, 5);
    for (int64_t r = 40; r < 52; ++r)
        for (int64_t c = 0; c < 12; ++c) CHECK(std::isfinite(m.embedding.at(r, c)));
}

TEST_CASE("image-side geometry: identical contexts give near-zero distance") {
    // Tokens 0 and 1 always appear surrounded by tokens 2 and 3.
    Dataset data = tiny_corpus(1, 10, 0);
    data.sequences.clear();
    const auto layout = data.layout;
    const int32_t base = static_cast<int32_t>(layout.image_base());
    for (int rep = 0; rep < 30; ++rep) {
        for (int32_t tok : {0, 1}) {
            std::vector<int32_t> seq = {0, 1, static_cast<int32_t>(layout.boi())};
            for (int k = 0; k < 6; ++k) {
                seq.push_back(base + 2);
                seq.push_back(base + tok);
                seq.push_back(base + 3);
            }
            seq.push_back(static_cast<int32_t>(layout.eoi()));
            data.sequences.push_back(seq);
            data.labels.push_back(0);
        }
    }
    GeometryOptions opts;
    opts.mode = GeometryMode::Cooccurrence;
    opts.window = 1;
    opts.factor_dim = 6;
    std::vector<std::string> warnings;
    MetricSpace geo = image_side_geometry(data, opts, &warnings);
    geo.validate();
    CHECK(geo.n == 12);
    const double med = geo.median_distance();
    CHECK(geo.d(0, 1) < 0.1 * med);
    CHECK_FALSE(warnings.empty());  // tokens 4..9 never occur
}

TEST_CASE("image-side geometry: random mode is deterministic, codebook one-hots give sqrt(2)") {
    Dataset data = tiny_corpus(2, 4, 5);
    GeometryOptions ropt;
    ropt.mode = GeometryMode::Random;
    ropt.seed = 9;
    MetricSpace g1 = image_side_geometry(data, ropt);
    MetricSpace g2 = image_side_geometry(data, ropt);
    CHECK(g1.dist == g2.dist);
    CHECK(g1.n == 6);

    Tensor onehot = Tensor::zeros({6, 6});
    for (int64_t i = 0; i < 6; ++i) onehot.at(i, i) = 1.0;
    write_codebook(onehot, "test_codebook.txt");
    GeometryOptions copt;
    copt.mode = GeometryMode::CodebookFile;
    copt.codebook_path = "test_codebook.txt";
    MetricSpace g3 = image_side_geometry(data, copt);
    for (int64_t i = 0; i < 6; ++i)
        for (int64_t j = 0; j < 6; ++j)
            if (i != j) CHECK(g3.d(i, j) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
}
