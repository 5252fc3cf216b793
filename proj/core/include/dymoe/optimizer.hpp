// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "dymoe/tensor.hpp"

namespace dymoe {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
  double grad_clip = 1.0;     // global norm; <= 0 disables
};

/// Decoupled-weight-decay adaptive moments. Moment slots exist only for
/// parameters that have actually received an update, which for the continual
/// trainer means exactly the unfrozen set of the current task.
class AdamW {
 public:
  explicit AdamW(AdamConfig cfg) : cfg_(cfg) {}

  struct Update {
    std::string name;
    Tensor* param;
    const Tensor* grad;
    double decay = -1.0;  // < 0: use the configured weight_decay
  };

  void step(const std::vector<Update>& updates, double lr_scale = 1.0);

  int step_count() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  struct Slot {
    Tensor m;
    Tensor v;
  };
  const std::map<std::string, Slot>& slots() const { return slots_; }

  /// Moment tensors in deterministic order, for checkpoint manifests.
  std::vector<std::pair<std::string, const Tensor*>> state_tensors() const;

 private:
  AdamConfig cfg_;
  int t_ = 0;
  std::map<std::string, Slot> slots_;
};

}  // namespace dymoe
