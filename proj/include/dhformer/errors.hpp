#pragma once
#include <stdexcept>
#include <string>

namespace dhformer {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/extent violations (mismatched dims, non-positive output sizes).
struct DimensionError : Error {
    using Error::Error;
};

// Numeric-domain violations (division by near-zero, negative depth).
struct DomainError : Error {
    using Error::Error;
};

// Caller broke an operation contract (non-scalar backward root, t below t_min).
struct ContractError : Error {
    using Error::Error;
};

// Bad configuration values or unusable manifests.
struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Malformed file contents (PNG, checkpoint, CSV).
struct FormatError : Error {
    using Error::Error;
};

struct TrainingError : Error {
    TrainingError(const std::string& msg, int batch_index)
        : Error(msg), batch_index(batch_index) {}
    int batch_index = -1;
};

// Checkpoint does not match the requested architecture.
struct CheckpointMismatchError : Error {
    using Error::Error;
};

}  // namespace dhformer
