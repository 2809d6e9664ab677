#pragma once

#include <string>

#include "motion_r1/nn.hpp"

namespace mr1::nn {

// Checkpoint file layout (version 1, little-endian throughout):
//   8 bytes   magic "MR1CKPT1"
//   u32       metadata length, followed by that many bytes of UTF-8 JSON
//   u32       parameter count
//   per parameter, sorted by name:
//     u32     name length + name bytes
//     u32     rank, then rank i64 dimension sizes
//     numel   raw IEEE-754 binary64 values, row-major
// Optimizer state is not persisted; checkpoints are inference artifacts.
void save_checkpoint(const std::string& path, const ParameterSet& params,
                     const std::string& metadata_json);

// Loads parameters and returns the metadata JSON string.
std::string load_checkpoint(const std::string& path, ParameterSet& params);

}  // namespace mr1::nn
