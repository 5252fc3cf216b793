// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "dymoe/backbone.hpp"
#include "dymoe/moe.hpp"
#include "dymoe/taskgen.hpp"
#include "dymoe/trainer.hpp"

namespace dymoe {

/// Validation failure that names the offending field.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& msg)
      : std::runtime_error(field + ": " + msg), field(std::move(field)) {}
  std::string field;
};

struct PretrainSettings {
  int steps = 1500;
  double lr = 3e-3;
  int batch_size = 32;
  std::uint64_t seed = 7;
  int n_train = 4000;
  int n_test = 1000;
  std::string base_checkpoint;  // reuse a pretrained backbone when set
};

struct AnalysisSettings {
  int eval_every = 50;
};

/// Merged run configuration; the canonical JSON form is hashed and embedded
/// in every artifact the run produces.
struct RunConfig {
  BackboneConfig backbone;
  MoeConfig moe;
  TrainConfig train;
  PretrainSettings pretrain;
  AnalysisSettings analysis;
  std::vector<TaskSpec> tasks;
};

RunConfig default_run_config();

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
void validate(const RunConfig& cfg);

/// Canonical JSON: fixed key set, keys sorted, stable number formatting.
std::string canonical_json(const RunConfig& cfg);
std::string run_config_json(const RunConfig& cfg);

/// 16-hex-digit digest of the canonical form; stable under key reordering of
/// the input document.
std::string config_hash(const RunConfig& cfg);

}  // namespace dymoe
