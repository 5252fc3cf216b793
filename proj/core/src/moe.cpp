// SPDX-License-Identifier: Apache-2.0
#include "dymoe/moe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace dymoe {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kRouterInitStd = 0.1;
}

IndexRange ExpertRegistry::old_range(int task) const {
  for (const TaskGroup& g : groups) {
    if (g.task == task) return {0, g.begin};
  }
  // Task not expanded yet: everything that exists is old.
  return {0, size()};
}

IndexRange ExpertRegistry::new_range(int task) const {
  for (const TaskGroup& g : groups) {
    if (g.task == task) return {g.begin, g.end};
  }
  return {size(), size()};
}

std::vector<double> ExpertRegistry::logits(std::span<const double> h) const {
  if (static_cast<int>(h.size()) != d_in) {
    throw std::invalid_argument("registry logits: token dimension mismatch");
  }
  std::vector<double> s;
  s.reserve(static_cast<size_t>(size()));
  for (const Tensor& block : router_blocks) {
    for (std::int64_t r = 0; r < block.dim(0); ++r) {
      double acc = 0.0;
      for (std::int64_t c = 0; c < block.dim(1); ++c) {
        acc += block.at(r, c) * h[static_cast<size_t>(c)];
      }
      s.push_back(acc);
    }
  }
  return s;
}

void validate(const MoeConfig& cfg) {
  if (cfg.top_k <= 0) throw std::invalid_argument("moe.top_k must be > 0");
  if (cfg.experts_per_task <= 0) {
    throw std::invalid_argument("moe.experts_per_task must be > 0");
  }
  if (cfg.rank <= 0) throw std::invalid_argument("moe.rank must be > 0");
  if (cfg.tau < 0.0 || cfg.tau > 1.0) {
    throw std::invalid_argument("moe.tau must be in [0, 1]");
  }
  if (cfg.epsilon <= 0.0) {
    throw std::invalid_argument("moe.epsilon must be > 0");
  }
}

GroupAccess RoutingPolicy::access(TokenType t) const {
  switch (kind) {
    case Kind::Free: return GroupAccess::Both;
    case Kind::Tag: return tag_access(t);
    case Kind::Custom:
      switch (t) {
        case TokenType::New: return access_new;
        case TokenType::Old: return access_old;
        case TokenType::Ambiguous: return access_ambiguous;
        case TokenType::FirstTask: return GroupAccess::Both;
      }
  }
  return GroupAccess::Both;
}

RoutingDecision decide_from_logits(std::vector<double> logits,
                                   IndexRange old_range, IndexRange new_range,
                                   const MoeConfig& cfg,
                                   const RoutingPolicy& policy,
                                   bool first_task) {
  int n = static_cast<int>(logits.size());
  if (n == 0) throw std::invalid_argument("route: empty registry");

  RoutingDecision d;
  d.logits = logits;
  d.masked_logits = logits;

  if (!first_task && !old_range.empty() && !new_range.empty()) {
    GroupConfidence gc =
        group_confidence(d.logits, old_range, new_range, cfg.epsilon);
    d.c_old = gc.c_old;
    d.c_new = gc.c_new;
    d.d_rel = gc.d_rel;
    d.token_type = classify_token(gc, cfg.tau);
    GroupAccess access = policy.access(d.token_type);
    if (access == GroupAccess::OldOnly) {
      for (int i = new_range.begin; i < new_range.end; ++i) {
        d.masked_logits[static_cast<size_t>(i)] = kNegInf;
      }
    } else if (access == GroupAccess::NewOnly) {
      for (int i = old_range.begin; i < old_range.end; ++i) {
        d.masked_logits[static_cast<size_t>(i)] = kNegInf;
      }
    }
  } else {
    d.token_type = TokenType::FirstTask;
  }

  std::vector<int> candidates;
  candidates.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    if (d.masked_logits[static_cast<size_t>(i)] != kNegInf) {
      candidates.push_back(i);
    }
  }
  if (candidates.empty()) {
    throw std::runtime_error("route: all logits masked");
  }
  int k = std::min<int>(cfg.top_k, static_cast<int>(candidates.size()));
  // Ties break to the lowest index: sort by (value desc, index asc).
  std::stable_sort(candidates.begin(), candidates.end(), [&](int a, int b) {
    double va = d.masked_logits[static_cast<size_t>(a)];
    double vb = d.masked_logits[static_cast<size_t>(b)];
    if (va != vb) return va > vb;
    return a < b;
  });
  candidates.resize(static_cast<size_t>(k));
  std::sort(candidates.begin(), candidates.end());
  d.selected = candidates;

  // Softmax over the selected logits with the running max subtracted first.
  double mx = kNegInf;
  for (int i : d.selected) {
    mx = std::max(mx, d.logits[static_cast<size_t>(i)]);
  }
  d.weights.assign(static_cast<size_t>(n), 0.0);
  double sum = 0.0;
  for (int i : d.selected) {
    double e = std::exp(d.logits[static_cast<size_t>(i)] - mx);
    d.weights[static_cast<size_t>(i)] = e;
    sum += e;
  }
  for (int i : d.selected) d.weights[static_cast<size_t>(i)] /= sum;
  return d;
}

RoutingDecision route(std::span<const double> h, const ExpertRegistry& reg,
                      const MoeConfig& cfg, bool tag_enabled,
                      int current_task) {
  if (reg.empty()) throw std::invalid_argument("route: empty registry");
  bool first = reg.old_range(current_task).empty();
  RoutingPolicy policy =
      tag_enabled ? RoutingPolicy::tag() : RoutingPolicy::free();
  return decide_from_logits(reg.logits(h), reg.old_range(current_task),
                            reg.new_range(current_task), cfg, policy, first);
}

std::vector<double> moe_forward(std::span<const double> h,
                                const RoutingDecision& decision,
                                const ExpertRegistry& reg, const Tensor& w0) {
  if (w0.dim(1) != static_cast<std::int64_t>(h.size())) {
    throw std::invalid_argument("moe_forward: dimension mismatch");
  }
  std::int64_t d_out = w0.dim(0);
  std::vector<double> out(static_cast<size_t>(d_out), 0.0);
  for (std::int64_t r = 0; r < d_out; ++r) {
    double acc = 0.0;
    for (std::int64_t c = 0; c < w0.dim(1); ++c) {
      acc += w0.at(r, c) * h[static_cast<size_t>(c)];
    }
    out[static_cast<size_t>(r)] = acc;
  }
  for (int i : decision.selected) {
    const LoraExpert& e = reg.experts[static_cast<size_t>(i)];
    double w = decision.weights[static_cast<size_t>(i)];
    std::vector<double> low(static_cast<size_t>(e.rank), 0.0);
    for (int r = 0; r < e.rank; ++r) {
      double acc = 0.0;
      for (std::int64_t c = 0; c < e.down.dim(1); ++c) {
        acc += e.down.at(r, c) * h[static_cast<size_t>(c)];
      }
      low[static_cast<size_t>(r)] = acc;
    }
    for (std::int64_t r = 0; r < d_out; ++r) {
      double acc = 0.0;
      for (int c = 0; c < e.rank; ++c) {
        acc += e.up.at(r, c) * low[static_cast<size_t>(c)];
      }
      out[static_cast<size_t>(r)] += w * acc;
    }
  }
  return out;
}

void expand_for_task(ExpertRegistry& reg, const MoeConfig& cfg, int t,
                     RngStream& rng) {
  if (t != reg.max_task() + 1) {
    throw std::invalid_argument("expand_for_task: task index not sequential");
  }
  if (reg.d_in <= 0 || reg.d_out <= 0) {
    throw std::invalid_argument("expand_for_task: registry dimensions unset");
  }
  for (LoraExpert& e : reg.experts) e.frozen = true;
  for (size_t i = 0; i < reg.router_block_frozen.size(); ++i) {
    reg.router_block_frozen[i] = true;
  }

  int begin = reg.size();
  double bound = 1.0 / std::sqrt(static_cast<double>(reg.d_in));
  for (int i = 0; i < cfg.experts_per_task; ++i) {
    LoraExpert e;
    e.rank = cfg.rank;
    e.owner_task = t;
    e.frozen = false;
    e.down = Tensor({cfg.rank, reg.d_in});
    for (std::int64_t j = 0; j < e.down.numel(); ++j) {
      e.down.at(j) = rng.uniform(-bound, bound);
    }
    e.up = Tensor({reg.d_out, cfg.rank});  // zero-init keeps expansion neutral
    reg.experts.push_back(std::move(e));
  }

  // Fresh rows start at a scale that keeps the new group's confidence
  // comparable to trained old-row logits on unseen tokens; far smaller and
  // every token classifies Old, starving the new experts.
  Tensor block({cfg.experts_per_task, reg.d_in});
  for (std::int64_t j = 0; j < block.numel(); ++j) {
    block.at(j) = rng.normal(0.0, kRouterInitStd);
  }
  reg.router_blocks.push_back(std::move(block));
  reg.router_block_frozen.push_back(false);
  reg.groups.push_back({t, begin, begin + cfg.experts_per_task});
}

void prune_experts(ExpertRegistry& reg, double fraction,
                   const std::vector<std::int64_t>& activation_counts) {
  if (fraction != 0.0 && fraction != 0.125 && fraction != 0.25) {
    throw std::invalid_argument("prune_experts: fraction must be 0, 1/8 or 1/4");
  }
  if (fraction == 0.0) return;
  if (reg.groups.empty()) {
    throw std::invalid_argument("prune_experts: empty registry");
  }
  if (activation_counts.size() != static_cast<size_t>(reg.size())) {
    throw std::invalid_argument("prune_experts: count vector size mismatch");
  }

  TaskGroup last = reg.groups.back();
  int group_size = last.end - last.begin;
  int n_remove = static_cast<int>(fraction * group_size);
  if (n_remove == 0) return;
  if (n_remove >= group_size) {
    throw std::runtime_error("prune_experts: pruning would empty the group");
  }

  // Lowest activation first; ties prune the lowest index.
  std::vector<int> order(static_cast<size_t>(group_size));
  std::iota(order.begin(), order.end(), last.begin);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    auto ca = activation_counts[static_cast<size_t>(a)];
    auto cb = activation_counts[static_cast<size_t>(b)];
    if (ca != cb) return ca < cb;
    return a < b;
  });
  std::vector<int> removed(order.begin(), order.begin() + n_remove);
  std::sort(removed.begin(), removed.end());

  std::vector<LoraExpert> kept;
  kept.reserve(reg.experts.size() - removed.size());
  for (int i = 0; i < reg.size(); ++i) {
    if (!std::binary_search(removed.begin(), removed.end(), i)) {
      kept.push_back(std::move(reg.experts[static_cast<size_t>(i)]));
    }
  }
  reg.experts = std::move(kept);

  // Rebuild the last router block without the pruned rows.
  Tensor& block = reg.router_blocks.back();
  Tensor pruned_block({group_size - n_remove, reg.d_in});
  int out_row = 0;
  for (int r = 0; r < group_size; ++r) {
    int global = last.begin + r;
    if (std::binary_search(removed.begin(), removed.end(), global)) continue;
    for (int c = 0; c < reg.d_in; ++c) {
      pruned_block.at(out_row, c) = block.at(r, c);
    }
    ++out_row;
  }
  block = std::move(pruned_block);
  reg.groups.back().end = last.end - n_remove;
}

}  // namespace dymoe
