// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dymoe/backbone.hpp"
#include "dymoe/drift.hpp"
#include "dymoe/metrics.hpp"
#include "dymoe/optimizer.hpp"
#include "dymoe/taskgen.hpp"

namespace dymoe {

struct TrainConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  // Router rows only: keeps inflated token-independent logit components from
  // accumulating, so group confidences stay comparable across tasks. Expert
  // adapters stay at the conventional zero decay.
  double router_weight_decay = 0.1;
  double warmup_ratio = 0.03;
  int batch_size = 32;
  int steps_per_task = 500;
  double lambda = 1e-3;  // load balance weight
  double alpha = 1e-3;   // exclusivity + specialization weight
  bool tag_enabled = true;
  bool rsr_enabled = true;
  bool rsr_exc_enabled = true;  // per-term switches under rsr_enabled
  bool rsr_spe_enabled = true;
  bool aux_enabled = true;
  int replay_capacity = 0;  // 0 disables replay
  double prune_fraction = 0.0;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
};

void validate(const TrainConfig& cfg);

/// Raised when the training loss leaves the finite domain; carries a dump of
/// the offending step for diagnosis.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::string msg, int task, int step)
      : std::runtime_error(std::move(msg)), task(task), step(step) {}
  int task;
  int step;
};

struct StepLog {
  int step = 0;
  LossBundle loss;
  std::int64_t n_new = 0;
  std::int64_t n_old = 0;
  std::int64_t n_ambiguous = 0;
  std::int64_t n_first = 0;
  bool replay = false;
};

struct TaskLog {
  int task = 0;
  std::vector<StepLog> steps;
};

struct TrainHooks {
  std::function<void(int step)> after_step;  // 1-based step index
};

/// Optimizes Eq-8 style total loss over steps_per_task minibatches. Expects
/// expand_model_for_task(t) to have been applied; only task-t parameters are
/// updated. A RoutingPolicy override replaces the TAG/free default (used by
/// the analysis strategies).
TaskLog train_task(Model& model, AdamW& opt, const TaskDataset& data, int t,
                   const TrainConfig& cfg, ReplayBuffer* replay = nullptr,
                   const RoutingPolicy* policy_override = nullptr,
                   const TrainHooks* hooks = nullptr);

/// Per-token argmax accuracy on the task's head. Routing is unconstrained at
/// inference; the policy only shapes training.
double evaluate(Model& model, const std::vector<Sample>& samples, int t);

/// Forward over the samples with trace collection (free routing), for
/// routing statistics and drift measurement.
std::vector<SiteTrace> collect_traces(Model& model,
                                      const std::vector<Sample>& samples,
                                      int t);

/// Per-expert activation counts per site over an evaluation pass, used to
/// drive expert pruning.
std::vector<std::vector<std::int64_t>> activation_counts(
    Model& model, const std::vector<Sample>& samples, int t);

struct SequenceResult {
  AccuracyMatrix matrix;
  std::vector<TaskLog> logs;
};

struct SequenceHooks {
  /// Called after each task's train + evaluate with the row just filled.
  std::function<void(int task, Model& model, AdamW& opt)> after_task;
};

/// Runs the continual protocol: for each task expand, train, snap the new
/// parameters to f32 (so checkpoints reproduce the model exactly), evaluate
/// on all tasks seen so far.
SequenceResult run_sequence(Model& model,
                            const std::vector<TaskDataset>& stream,
                            const TrainConfig& cfg,
                            const SequenceHooks* hooks = nullptr);

/// Quantizes the parameters owned by `owner_task` through f32, matching the
/// checkpoint payload precision.
void snap_params_to_f32(Model& model, int owner_task);

}  // namespace dymoe
