// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dymoe/drift.hpp"
#include "dymoe/rng.hpp"
#include "dymoe/tensor.hpp"

namespace dymoe {

/// One low-rank adapter expert: the update is up * down (rank r).
struct LoraExpert {
  Tensor down;  // [rank x d_in]
  Tensor up;    // [d_out x rank]
  int rank = 0;
  int owner_task = 0;
  bool frozen = false;
};

/// Expert index range owned by one task.
struct TaskGroup {
  int task = 0;
  int begin = 0;
  int end = 0;
};

/// Per-layer ordered expert list plus the expandable router. Router rows are
/// stored as one block per task so freezing is structural: a frozen block is
/// simply never handed to the optimizer.
struct ExpertRegistry {
  int d_in = 0;
  int d_out = 0;
  std::vector<LoraExpert> experts;
  std::vector<Tensor> router_blocks;      // [group size x d_in] per task
  std::vector<bool> router_block_frozen;  // parallel to router_blocks
  std::vector<TaskGroup> groups;          // partition of [0, size())

  int size() const { return static_cast<int>(experts.size()); }
  bool empty() const { return experts.empty(); }
  int max_task() const { return groups.empty() ? 0 : groups.back().task; }

  /// Experts owned by tasks before `task`: [0, begin of task's group).
  IndexRange old_range(int task) const;
  /// Experts owned by `task` itself.
  IndexRange new_range(int task) const;

  /// Router logits for one token, concatenated across blocks.
  std::vector<double> logits(std::span<const double> h) const;
};

struct MoeConfig {
  int top_k = 4;
  int experts_per_task = 4;
  int rank = 2;
  double tau = 0.2;
  double epsilon = 1e-9;
};

void validate(const MoeConfig& cfg);

/// Routing outcome for one token.
struct RoutingDecision {
  std::vector<double> logits;         // s
  std::vector<double> masked_logits;  // s' (-inf sentinel on excluded group)
  std::vector<double> weights;        // w, dense with exact zeros
  std::vector<int> selected;          // ascending, |selected| = min(K, avail)
  double c_old = 0.0;
  double c_new = 0.0;
  double d_rel = 0.0;
  TokenType token_type = TokenType::FirstTask;
};

/// How routing is constrained during training. Free routing is used at
/// inference and for the first task; Tag applies the hard assignment rule;
/// Custom carries a per-token-type access table (analysis strategies).
struct RoutingPolicy {
  enum class Kind { Free, Tag, Custom };
  Kind kind = Kind::Free;
  GroupAccess access_new = GroupAccess::Both;
  GroupAccess access_old = GroupAccess::Both;
  GroupAccess access_ambiguous = GroupAccess::Both;

  static RoutingPolicy free() { return {}; }
  static RoutingPolicy tag() { return {Kind::Tag, {}, {}, {}}; }
  static RoutingPolicy custom(GroupAccess for_new, GroupAccess for_old,
                              GroupAccess for_ambiguous) {
    return {Kind::Custom, for_new, for_old, for_ambiguous};
  }
  GroupAccess access(TokenType t) const;
};

/// Classifies the token (when an old group exists), applies the policy mask,
/// selects the top-min(K, unmasked) logits (ties to the lowest index) and
/// normalizes them with a softmax; all other weights are exactly zero.
RoutingDecision decide_from_logits(std::vector<double> logits,
                                   IndexRange old_range, IndexRange new_range,
                                   const MoeConfig& cfg,
                                   const RoutingPolicy& policy,
                                   bool first_task);

/// Full routing op: logits from the registry's router, then the decision.
RoutingDecision route(std::span<const double> h, const ExpertRegistry& reg,
                      const MoeConfig& cfg, bool tag_enabled, int current_task);

/// Plain (graph-free) layer output for one token:
/// h_out = w0 * h + sum_i w_i * up_i * (down_i * h).
std::vector<double> moe_forward(std::span<const double> h,
                                const RoutingDecision& decision,
                                const ExpertRegistry& reg, const Tensor& w0);

/// Appends experts_per_task new experts and one router block for task `t`,
/// freezing everything that came before. `t` must be max_task() + 1.
void expand_for_task(ExpertRegistry& reg, const MoeConfig& cfg, int t,
                     RngStream& rng);

/// Removes floor(fraction * N_t) lowest-activation experts of the most
/// recently added task (ties pruned at the lowest index) and their router
/// rows, recomputing group ranges.
void prune_experts(ExpertRegistry& reg, double fraction,
                   const std::vector<std::int64_t>& activation_counts);

}  // namespace dymoe
