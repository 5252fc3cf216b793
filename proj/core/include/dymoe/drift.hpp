// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

namespace dymoe {

/// Contiguous expert index range [begin, end).
struct IndexRange {
  int begin = 0;
  int end = 0;
  int size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(int i) const { return i >= begin && i < end; }
};

enum class TokenType : int { New = 0, Old = 1, Ambiguous = 2, FirstTask = 3 };

const char* token_type_name(TokenType t);

/// Which expert groups a token may be routed to during training.
enum class GroupAccess { Both, OldOnly, NewOnly };

/// Group-wise confidence scores of a token's router logits: the maximum
/// logit inside each group and their relative difference.
struct GroupConfidence {
  double c_old = 0.0;
  double c_new = 0.0;
  double d_rel = 0.0;
};

GroupConfidence group_confidence(std::span<const double> logits,
                                 IndexRange old_range, IndexRange new_range,
                                 double epsilon);

/// Ambiguous when d_rel <= tau; otherwise New when the new group dominates,
/// else Old.
TokenType classify_token(const GroupConfidence& gc, double tau);

/// Hard token assignment rule: New tokens go exclusively to the new group,
/// everything else to the safe old group.
GroupAccess tag_access(TokenType type);

/// Masked logits with a -inf sentinel on the excluded group. The decision is
/// piecewise-constant and carries no gradient.
std::vector<double> tag_mask(std::span<const double> logits,
                             IndexRange old_range, IndexRange new_range,
                             double tau, double epsilon);

/// Collective gate output per group for one token's normalized weights.
struct GateMass {
  double g_old = 0.0;
  double g_new = 0.0;
  double g_tilde_old = 0.0;  // largest single old-expert weight
};

GateMass gate_mass(std::span<const double> weights, IndexRange old_range,
                   IndexRange new_range);

/// Product of the collective gate outputs; zero iff routing is exclusive.
double exclusivity_loss(const GateMass& gm);

/// BCE between the collective new-group weight and the soft target
/// y = 1 - g_tilde_old (treated as a constant).
double specialization_loss(const GateMass& gm, double clamp_delta);

/// Switch-style load balance over the new group: N * sum_i f_i * P_i, where
/// f_i is the fraction of tokens whose top-1 new-group expert is i and P_i
/// the mean routing probability of expert i. Rows of `probs` are per-token
/// probabilities over the new group; `top1` holds each token's argmax index
/// within the group.
double load_balance_loss(const std::vector<std::vector<double>>& probs,
                         const std::vector<int>& top1);

/// Scalar components and combined objective of one optimization step.
struct LossBundle {
  double l_ntp = 0.0;
  double l_aux = 0.0;
  double l_exc = 0.0;
  double l_spe = 0.0;
  double lambda = 0.0;
  double alpha = 0.0;
  double total = 0.0;
};

LossBundle total_loss(double l_ntp, double l_aux, double l_exc, double l_spe,
                      double lambda, double alpha);

}  // namespace dymoe
