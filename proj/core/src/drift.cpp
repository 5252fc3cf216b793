// SPDX-License-Identifier: Apache-2.0
#include "dymoe/drift.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dymoe {

const char* token_type_name(TokenType t) {
  switch (t) {
    case TokenType::New: return "new";
    case TokenType::Old: return "old";
    case TokenType::Ambiguous: return "ambiguous";
    case TokenType::FirstTask: return "first_task";
  }
  return "?";
}

namespace {

double range_max(std::span<const double> v, IndexRange r) {
  double m = v[static_cast<size_t>(r.begin)];
  for (int i = r.begin + 1; i < r.end; ++i) {
    m = std::max(m, v[static_cast<size_t>(i)]);
  }
  return m;
}

}  // namespace

GroupConfidence group_confidence(std::span<const double> logits,
                                 IndexRange old_range, IndexRange new_range,
                                 double epsilon) {
  if (old_range.empty() || new_range.empty()) {
    throw std::invalid_argument("group_confidence: empty group range");
  }
  if (epsilon <= 0) {
    throw std::invalid_argument("group_confidence: epsilon must be > 0");
  }
  GroupConfidence gc;
  gc.c_old = range_max(logits, old_range);
  gc.c_new = range_max(logits, new_range);
  gc.d_rel = std::abs(gc.c_new - gc.c_old) /
             (std::max(std::abs(gc.c_new), std::abs(gc.c_old)) + epsilon);
  return gc;
}

TokenType classify_token(const GroupConfidence& gc, double tau) {
  if (gc.d_rel <= tau) return TokenType::Ambiguous;
  return gc.c_new > gc.c_old ? TokenType::New : TokenType::Old;
}

GroupAccess tag_access(TokenType type) {
  switch (type) {
    case TokenType::New: return GroupAccess::NewOnly;
    case TokenType::Old:
    case TokenType::Ambiguous: return GroupAccess::OldOnly;
    case TokenType::FirstTask: return GroupAccess::Both;
  }
  return GroupAccess::Both;
}

std::vector<double> tag_mask(std::span<const double> logits,
                             IndexRange old_range, IndexRange new_range,
                             double tau, double epsilon) {
  GroupConfidence gc = group_confidence(logits, old_range, new_range, epsilon);
  bool mask_new = classify_token(gc, tau) != TokenType::New;
  std::vector<double> masked(logits.begin(), logits.end());
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  IndexRange excluded = mask_new ? new_range : old_range;
  for (int i = excluded.begin; i < excluded.end; ++i) {
    masked[static_cast<size_t>(i)] = kNegInf;
  }
  return masked;
}

GateMass gate_mass(std::span<const double> weights, IndexRange old_range,
                   IndexRange new_range) {
  GateMass gm;
  for (int i = old_range.begin; i < old_range.end; ++i) {
    double w = weights[static_cast<size_t>(i)];
    gm.g_old += w;
    gm.g_tilde_old = std::max(gm.g_tilde_old, w);
  }
  for (int i = new_range.begin; i < new_range.end; ++i) {
    gm.g_new += weights[static_cast<size_t>(i)];
  }
  return gm;
}

double exclusivity_loss(const GateMass& gm) { return gm.g_old * gm.g_new; }

double specialization_loss(const GateMass& gm, double clamp_delta) {
  if (clamp_delta <= 0) {
    throw std::invalid_argument("specialization_loss: clamp_delta must be > 0");
  }
  double y = 1.0 - gm.g_tilde_old;
  double g = std::min(1.0 - clamp_delta, std::max(clamp_delta, gm.g_new));
  return -y * std::log(g) - (1.0 - y) * std::log(1.0 - g);
}

double load_balance_loss(const std::vector<std::vector<double>>& probs,
                         const std::vector<int>& top1) {
  if (probs.empty()) {
    throw std::invalid_argument("load_balance_loss: empty batch");
  }
  if (probs.size() != top1.size()) {
    throw std::invalid_argument("load_balance_loss: batch size mismatch");
  }
  size_t n_experts = probs.front().size();
  if (n_experts == 0) {
    throw std::invalid_argument("load_balance_loss: empty expert group");
  }
  std::vector<double> f(n_experts, 0.0), p(n_experts, 0.0);
  for (size_t t = 0; t < probs.size(); ++t) {
    f[static_cast<size_t>(top1[t])] += 1.0;
    for (size_t i = 0; i < n_experts; ++i) p[i] += probs[t][i];
  }
  double inv = 1.0 / static_cast<double>(probs.size());
  double acc = 0.0;
  for (size_t i = 0; i < n_experts; ++i) {
    acc += (f[i] * inv) * (p[i] * inv);
  }
  return static_cast<double>(n_experts) * acc;
}

LossBundle total_loss(double l_ntp, double l_aux, double l_exc, double l_spe,
                      double lambda, double alpha) {
  for (double v : {l_ntp, l_aux, l_exc, l_spe, lambda, alpha}) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument("total_loss: non-finite component");
    }
  }
  LossBundle lb;
  lb.l_ntp = l_ntp;
  lb.l_aux = l_aux;
  lb.l_exc = l_exc;
  lb.l_spe = l_spe;
  lb.lambda = lambda;
  lb.alpha = alpha;
  lb.total = l_ntp + lambda * l_aux + alpha * (l_exc + l_spe);
  return lb;
}

}  // namespace dymoe
