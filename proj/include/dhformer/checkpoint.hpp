#pragma once
#include <limits>
#include <string>

#include "dhformer/attention.hpp"

namespace dhformer {

// Checkpoint file layout:
//   bytes 0..3   magic "DHFM"
//   bytes 4..7   format version, u32 little-endian
//   bytes 8..15  header length, u64 little-endian
//   header       JSON text (model configs, run metadata, tensor directory)
//   payload      all tensors as raw little-endian 32-bit floats, params
//                first then buffers, each at the element offset its
//                directory entry declares
// Rewriting a just-loaded checkpoint reproduces the file byte for byte.

inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    ModelConfig model;
    std::string ablation = "full";  // "full" or "residual_only"
    uint64_t seed = 0;
    int epoch = 0;
    double best_val_loss = std::numeric_limits<double>::quiet_NaN();
    std::string optimizer = "adam";
    double learning_rate = 0;
    int batch_size = 0;
    std::string precision = "f32";
};

struct Checkpoint {
    CheckpointMeta meta;
    ModelParams params;
};

void save_checkpoint(const std::string& path, const ModelParams& mp,
                     const CheckpointMeta& meta);

// Validates magic, version, and directory consistency before any tensor is
// materialized; throws FormatError with the offending byte offset, or
// CheckpointMismatchError when the stored tensors do not match the stored
// architecture config.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dhformer
