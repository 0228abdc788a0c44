#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mmoe/data.hpp"
#include "mmoe/decoder.hpp"
#include "mmoe/gw.hpp"

namespace mmoe {

struct ExpansionReport {
    uint64_t added_per_matrix = 0;  // T·d
    int64_t new_rows_begin = 0, new_rows_end = 0;
};

// Appends T = |V_i| + n_special rows to embedding and head (zeros until an
// init scheme fills them). Original rows keep their exact bits; the per-row
// trainability mask is set so only the new rows ever receive gradient.
ExpansionReport expand_vocabulary(ModelParams& model, const VocabLayout& layout);

enum class InitScheme { Random, Mean, GW };

InitScheme init_scheme_from_string(const std::string& s);
const char* init_scheme_name(InitScheme s);

struct GwInitInputs {
    MetricSpace geometry;  // new-modality side, T points
    GwOptions solver;
    int max_anchors = 1024;  // larger point sets are solved on an anchor subset
    uint64_t anchor_seed = 0;
};

struct InitResult {
    std::optional<GwResult> embedding_solve, head_solve;
};

// Fills the appended rows of embedding and head. random: zero-mean gaussian
// with the empirical std of the existing rows; mean: every new row equals the
// column mean of the existing rows; gw: entropic coupling between the
// existing-row geometry and the supplied new-modality geometry, then
// barycentric projection. The head uses the same scheme via an independent
// solve on its own geometry.
InitResult init_new_rows(ModelParams& model, InitScheme scheme, const GwInitInputs* gw_inputs, uint64_t seed);

enum class GeometryMode { Cooccurrence, CodebookFile, Random };

GeometryMode geometry_mode_from_string(const std::string& s);

struct GeometryOptions {
    GeometryMode mode = GeometryMode::Cooccurrence;
    int window = 2;    // co-occurrence half-window over the new-token block
    int factor_dim = 16;  // truncated eigendecomposition width
    std::string codebook_path;
    uint64_t seed = 0;
    int random_dim = 16;
};

// Geometry over the T new tokens. cooccurrence: windowed counts over the
// corpus blocks, positive-PMI weighting, truncated eigenfactorization,
// euclidean distances; tokens never observed get the centroid vector and a
// warning. codebook-file: distances over externally supplied vectors.
// random: distances over seeded gaussian vectors.
MetricSpace image_side_geometry(const Dataset& corpus, const GeometryOptions& opts,
                                std::vector<std::string>* warnings = nullptr);

// Codebook file: header "T d'" then T rows of d' floats.
Tensor read_codebook(const std::string& path);
void write_codebook(const Tensor& vectors, const std::string& path);

}  // namespace mmoe
