// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dymoe/backbone.hpp"
#include "dymoe/trainer.hpp"

namespace dymoe {

/// Token-masking strategies of the controlled two-task experiment. Baseline
/// routes every token freely; the others restrict which token types may
/// reach the new expert group during task-2 training.
enum class Strategy { Baseline, OnlyNew, MaskOld, OnlyAmbiguous };

const char* strategy_name(Strategy s);
std::optional<Strategy> strategy_from_name(const std::string& name);

/// Group access for one token type under a strategy:
///  - Baseline: every type routes freely.
///  - OnlyNew: only New tokens may route to the new group.
///  - MaskOld: Old tokens are restricted to the old group, others are free.
///  - OnlyAmbiguous: only Ambiguous tokens may route to the new group.
GroupAccess strategy_access(TokenType type, Strategy s);

RoutingPolicy strategy_policy(Strategy s);

struct CurvePoint {
  int step = 0;
  double acc_task1 = 0.0;
  double acc_task2 = 0.0;
};

/// Trains task 2 from the shared post-task-1 model under the strategy,
/// evaluating both tasks before training and every eval_every steps. The
/// input model is copied; all strategies consume identical task-2 batches.
std::vector<CurvePoint> two_task_experiment(const Model& model_after_task1,
                                            const TaskDataset& task1,
                                            const TaskDataset& task2,
                                            const TrainConfig& cfg,
                                            Strategy strategy, int eval_every);

void write_curve_csv(const std::string& path,
                     const std::vector<CurvePoint>& curve, Strategy strategy,
                     std::uint64_t seed);

}  // namespace dymoe
