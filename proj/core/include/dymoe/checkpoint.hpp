// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dymoe/backbone.hpp"
#include "dymoe/config.hpp"
#include "dymoe/optimizer.hpp"

namespace dymoe {

inline constexpr int kCheckpointFormatVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when the file carries a format_version this build does not
/// support; such files are rejected, never reinterpreted.
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Optimizer payload carried through a load/save round trip.
struct OptState {
  int step_count = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

struct LoadedCheckpoint {
  Model model;
  RunConfig config;
  std::string cfg_hash;
  int task_reached = 0;
  OptState opt;
};

/// Binary layout: 8-byte magic, little-endian u64 manifest length, JSON
/// manifest, then raw 32-bit little-endian float payload (row-major). The
/// manifest lists every tensor with shape and byte offset.
void save_checkpoint(
    const std::string& path, const Model& model, const RunConfig& config,
    int task_reached,
    const std::vector<std::pair<std::string, const Tensor*>>& opt_tensors,
    int opt_step);

void save_checkpoint(const std::string& path, const Model& model,
                     const RunConfig& config, int task_reached,
                     const AdamW& opt);

void save_checkpoint(const std::string& path, const LoadedCheckpoint& ckpt);

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace dymoe
