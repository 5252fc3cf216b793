// SPDX-License-Identifier: Apache-2.0
#include "dymoe/metrics.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace dymoe {

namespace {
using nlohmann::json;

void check_full(const AccuracyMatrix& m) {
  if (m.a.empty()) throw std::invalid_argument("metrics: empty matrix");
  for (size_t j = 0; j < m.a.size(); ++j) {
    if (m.a[j].size() != j + 1) {
      throw std::invalid_argument("metrics: matrix is not lower-triangular");
    }
  }
}
}  // namespace

double mfn(const AccuracyMatrix& m) {
  check_full(m);
  int t = m.tasks();
  double acc = 0.0;
  for (int i = 0; i < t; ++i) acc += m.at(t - 1, i);
  return acc / t;
}

double maa(const AccuracyMatrix& m) {
  check_full(m);
  int t = m.tasks();
  double acc = 0.0;
  for (int j = 0; j < t; ++j) {
    double row = 0.0;
    for (int i = 0; i <= j; ++i) row += m.at(j, i);
    acc += row / (j + 1);
  }
  return acc / t;
}

double bwt(const AccuracyMatrix& m) {
  check_full(m);
  int t = m.tasks();
  double acc = 0.0;
  for (int i = 0; i < t; ++i) acc += m.at(t - 1, i) - m.at(i, i);
  return acc / t;
}

namespace {

/// Dominant group of one decision: argmax over groups of the in-group max
/// logit, ties to the lowest task index.
int dominant_group(const RoutingDecision& d, const std::vector<TaskGroup>& gs) {
  int best_task = gs.front().task;
  double best = -std::numeric_limits<double>::infinity();
  for (const TaskGroup& g : gs) {
    double mx = d.logits[static_cast<size_t>(g.begin)];
    for (int i = g.begin + 1; i < g.end; ++i) {
      mx = std::max(mx, d.logits[static_cast<size_t>(i)]);
    }
    if (mx > best) {
      best = mx;
      best_task = g.task;
    }
  }
  return best_task;
}

}  // namespace

RoutingStats routing_stats(const std::vector<SiteTrace>& traces) {
  RoutingStats st;
  double g_old_sum = 0.0, g_new_sum = 0.0;
  std::int64_t grouped_tokens = 0;
  for (const SiteTrace& tr : traces) {
    int n_experts = tr.groups.empty() ? 0 : tr.groups.back().end;
    st.sites.push_back(tr.site);
    std::vector<std::int64_t> counts(static_cast<size_t>(n_experts), 0);
    for (const RoutingDecision& d : tr.decisions) {
      if (static_cast<int>(d.logits.size()) != n_experts) {
        throw std::invalid_argument("routing_stats: trace/registry mismatch");
      }
      ++st.tokens;
      st.type_histogram[static_cast<size_t>(d.token_type)]++;
      for (int e : d.selected) counts[static_cast<size_t>(e)]++;
      if (tr.groups.size() >= 2) {
        IndexRange old_r{0, tr.groups.back().begin};
        IndexRange new_r{tr.groups.back().begin, tr.groups.back().end};
        GateMass gm = gate_mass(d.weights, old_r, new_r);
        g_old_sum += gm.g_old;
        g_new_sum += gm.g_new;
        ++grouped_tokens;
      }
    }
    st.activations.push_back(std::move(counts));
  }
  if (grouped_tokens > 0) {
    st.mean_g_old = g_old_sum / grouped_tokens;
    st.mean_g_new = g_new_sum / grouped_tokens;
  }
  return st;
}

double drift_rate(const std::vector<SiteTrace>& before,
                  const std::vector<SiteTrace>& after) {
  if (before.size() != after.size()) {
    throw std::invalid_argument("drift_rate: trace count mismatch");
  }
  std::int64_t total = 0, flipped = 0;
  for (size_t s = 0; s < before.size(); ++s) {
    const SiteTrace& a = before[s];
    const SiteTrace& b = after[s];
    if (a.decisions.size() != b.decisions.size()) {
      throw std::invalid_argument("drift_rate: token count mismatch");
    }
    for (size_t t = 0; t < a.decisions.size(); ++t) {
      int ga = dominant_group(a.decisions[t], a.groups);
      int gb = dominant_group(b.decisions[t], b.groups);
      ++total;
      if (ga != gb) ++flipped;
    }
  }
  if (total == 0) return 0.0;
  return static_cast<double>(flipped) / static_cast<double>(total);
}

void write_metrics_csv(const std::string& path, const std::string& run_id,
                       const std::vector<std::pair<std::string, double>>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  out << "run_id,metric,value\n";
  char buf[64];
  for (const auto& [metric, value] : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    out << run_id << "," << metric << "," << buf << "\n";
  }
}

void write_matrix_json(const std::string& path, const AccuracyMatrix& m,
                       const std::string& config_hash) {
  json j;
  j["config_hash"] = config_hash;
  j["tasks"] = m.tasks();
  j["matrix"] = m.a;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_matrix_json: cannot open " + path);
  out << j.dump(2) << "\n";
}

AccuracyMatrix read_matrix_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_matrix_json: cannot open " + path);
  json j = json::parse(in);
  AccuracyMatrix m;
  m.a = j.at("matrix").get<std::vector<std::vector<double>>>();
  return m;
}

}  // namespace dymoe
