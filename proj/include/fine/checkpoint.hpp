#pragma once

#include <filesystem>
#include <stdexcept>

#include "fine/model.hpp"

namespace fine {

inline constexpr int kCheckpointFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A declared tensor shape or model setting disagrees with what is expected.
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

// Writes <base>.json (model config, names, shapes, byte offsets) and <base>.bin
// (little-endian float64 values in parameter order).
void save_checkpoint(const FineModel& model, const std::filesystem::path& base);

FineModel load_checkpoint(const std::filesystem::path& base);

// Reads the model config stored in a checkpoint manifest.
ModelConfig read_checkpoint_config(const std::filesystem::path& base);

}  // namespace fine
