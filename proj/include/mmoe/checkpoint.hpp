#pragma once

#include <string>

#include "mmoe/decoder.hpp"

namespace mmoe {

// Container layout: magic "MMOE", u32 format version, u64 header length, a
// JSON header (model config, MoE partition, adapter and expansion metadata,
// tensor table with name/shape/offset/frozen flag/trainable-row range),
// then raw little-endian tensor payloads. dtype "f64" round-trips exactly;
// "f32" is a storage mode that halves the file.
struct CheckpointOptions {
    bool f32_storage = false;
};

void save_checkpoint(const ModelParams& model, const std::string& path, const CheckpointOptions& opts = {});

// Rebuilds a model from the self-describing header.
ModelParams load_checkpoint(const std::string& path);

// Loads tensor payloads into an existing structure; every expected tensor
// must be present with the exact shape, and the first mismatch is named.
void load_checkpoint_into(ModelParams& model, const std::string& path);

// SHA-256 over every named tensor's bytes, in table order.
std::string model_digest(const ModelParams& model);
std::string tensor_digest(const Tensor& t);

}  // namespace mmoe
