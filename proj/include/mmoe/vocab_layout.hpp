#pragma once

#include <cstdint>
#include <string>

#include "mmoe/util.hpp"

namespace mmoe {

// Token id layout after vocabulary expansion. Text ids occupy [0, vocab_text);
// the appended block holds the new-modality ids followed by the two boundary
// markers boi/eoi, all of which count as new-modality tokens.
struct VocabLayout {
    int64_t vocab_text = 0;   // |V_t|
    int64_t vocab_image = 0;  // |V_i|
    int64_t n_special = 2;    // boi, eoi

    int64_t new_tokens() const { return vocab_image + n_special; }  // T
    int64_t total() const { return vocab_text + new_tokens(); }
    int64_t image_base() const { return vocab_text; }
    int64_t boi() const { return vocab_text + vocab_image; }
    int64_t eoi() const { return vocab_text + vocab_image + 1; }

    bool is_text(int32_t id) const { return id >= 0 && id < vocab_text; }
    bool is_new(int32_t id) const { return id >= vocab_text && id < total(); }

    // Parameters appended per matrix when the embedding/head gain T rows.
    static uint64_t added_params_per_matrix(uint64_t new_tokens, uint64_t dim) { return new_tokens * dim; }
};

}  // namespace mmoe
