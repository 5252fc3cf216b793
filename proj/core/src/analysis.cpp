// SPDX-License-Identifier: Apache-2.0
#include "dymoe/analysis.hpp"

#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace dymoe {

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Baseline: return "baseline";
    case Strategy::OnlyNew: return "only-new";
    case Strategy::MaskOld: return "mask-old";
    case Strategy::OnlyAmbiguous: return "only-ambiguous";
  }
  return "?";
}

std::optional<Strategy> strategy_from_name(const std::string& name) {
  for (Strategy s : {Strategy::Baseline, Strategy::OnlyNew, Strategy::MaskOld,
                     Strategy::OnlyAmbiguous}) {
    if (name == strategy_name(s)) return s;
  }
  return std::nullopt;
}

GroupAccess strategy_access(TokenType type, Strategy s) {
  if (type == TokenType::FirstTask) return GroupAccess::Both;
  switch (s) {
    case Strategy::Baseline:
      return GroupAccess::Both;
    case Strategy::OnlyNew:
      return type == TokenType::New ? GroupAccess::Both : GroupAccess::OldOnly;
    case Strategy::MaskOld:
      return type == TokenType::Old ? GroupAccess::OldOnly : GroupAccess::Both;
    case Strategy::OnlyAmbiguous:
      return type == TokenType::Ambiguous ? GroupAccess::Both
                                          : GroupAccess::OldOnly;
  }
  return GroupAccess::Both;
}

RoutingPolicy strategy_policy(Strategy s) {
  return RoutingPolicy::custom(strategy_access(TokenType::New, s),
                               strategy_access(TokenType::Old, s),
                               strategy_access(TokenType::Ambiguous, s));
}

std::vector<CurvePoint> two_task_experiment(const Model& model_after_task1,
                                            const TaskDataset& task1,
                                            const TaskDataset& task2,
                                            const TrainConfig& cfg,
                                            Strategy strategy,
                                            int eval_every) {
  if (eval_every <= 0) {
    throw std::invalid_argument("two_task_experiment: eval_every must be > 0");
  }
  if (model_after_task1.current_task != 1) {
    throw std::invalid_argument(
        "two_task_experiment: model must be the shared post-task-1 state");
  }

  Model model = model_after_task1;  // strategies never touch the shared state
  auto expand_rng = RngStream::seeded(cfg.seed, "expand.task2");
  expand_model_for_task(model, 2, task2.spec.n_classes, expand_rng);

  // The strategy replaces TAG; the soft losses stay out of the controlled
  // comparison so curves differ only by the token masking.
  TrainConfig run_cfg = cfg;
  run_cfg.tag_enabled = false;
  run_cfg.rsr_enabled = false;
  RoutingPolicy policy = strategy_policy(strategy);

  std::vector<CurvePoint> curve;
  auto record = [&](int step) {
    CurvePoint p;
    p.step = step;
    p.acc_task1 = evaluate(model, task1.test, 1);
    p.acc_task2 = evaluate(model, task2.test, 2);
    curve.push_back(p);
  };
  record(0);  // shared starting point

  AdamConfig ac;
  ac.lr = run_cfg.lr;
  ac.beta1 = run_cfg.beta1;
  ac.beta2 = run_cfg.beta2;
  ac.weight_decay = run_cfg.weight_decay;
  ac.grad_clip = run_cfg.grad_clip;
  AdamW opt(ac);

  TrainHooks hooks;
  hooks.after_step = [&](int step) {
    if (step % eval_every == 0) record(step);
  };
  train_task(model, opt, task2, 2, run_cfg, nullptr, &policy, &hooks);
  if (curve.back().step != run_cfg.steps_per_task) {
    record(run_cfg.steps_per_task);
  }
  return curve;
}

void write_curve_csv(const std::string& path,
                     const std::vector<CurvePoint>& curve, Strategy strategy,
                     std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_curve_csv: cannot open " + path);
  out << "step,acc_task1,acc_task2,strategy,seed\n";
  char buf1[64], buf2[64];
  for (const CurvePoint& p : curve) {
    std::snprintf(buf1, sizeof(buf1), "%.17g", p.acc_task1);
    std::snprintf(buf2, sizeof(buf2), "%.17g", p.acc_task2);
    out << p.step << "," << buf1 << "," << buf2 << "," << strategy_name(strategy)
        << "," << seed << "\n";
  }
}

}  // namespace dymoe
