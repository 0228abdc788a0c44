#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mmoe/decoder.hpp"
#include "mmoe/vocab_layout.hpp"

namespace mmoe {

// True per position iff the token id falls in the expanded (new-modality)
// range; boi/eoi live there and are therefore masked true. Ids outside both
// ranges are rejected.
std::vector<uint8_t> modality_mask_from_tokens(std::span<const int32_t> ids, const VocabLayout& layout);

// x̂ = base(x) everywhere; rows with mask true additionally receive
// scale · W_B·(W_A·x). The unmasked rows come out of the very same base
// computation, untouched by any adapter arithmetic, so they are bit-identical
// to a plain linear forward. An all-false mask returns the base tensor itself.
Tensor plora_linear_forward(Tape& tape, const Tensor& w, const Tensor& bias, const PLoRAAdapter& adapter,
                            const Tensor& x, std::span<const uint8_t> mask);

struct AdapterTargets {
    bool query = true, key = true, value = true, out = true;
};

// One adapter per selected projection per layer. W_A ~ N(0, 1/sqrt(C_in)),
// W_B = 0, so the adapted model is functionally identical to the base until
// training moves W_B. Base projections are frozen in the same pass. Attaching
// twice is an error.
void attach_adapters(ModelParams& model, const AdapterTargets& targets, int rank, double alpha, uint64_t seed);

// Σ rank·(C_in + C_out) over all attached adapters.
int64_t adapter_param_count(const ModelParams& model);

}  // namespace mmoe
