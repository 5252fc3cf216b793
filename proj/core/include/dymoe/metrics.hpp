// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dymoe/backbone.hpp"

namespace dymoe {

/// Lower-triangular accuracy matrix: a[j][i] is the accuracy on task i+1
/// after training task j+1 (0-based storage, 1-based protocol).
struct AccuracyMatrix {
  std::vector<std::vector<double>> a;

  int tasks() const { return static_cast<int>(a.size()); }
  double at(int j, int i) const { return a.at(static_cast<size_t>(j)).at(static_cast<size_t>(i)); }
};

/// Mean final accuracy: (1/T) * sum_i A[T][i].
double mfn(const AccuracyMatrix& m);
/// Mean average accuracy: (1/T) * sum_j (1/j) * sum_{i<=j} A[j][i].
double maa(const AccuracyMatrix& m);
/// Backward transfer: (1/T) * sum_i (A[T][i] - A[i][i]); 0 for T = 1.
double bwt(const AccuracyMatrix& m);

struct RoutingStats {
  std::vector<std::string> sites;
  std::vector<std::vector<std::int64_t>> activations;  // [site][expert]
  std::array<std::int64_t, 4> type_histogram{};        // indexed by TokenType
  double mean_g_old = 0.0;  // over tokens that had two groups
  double mean_g_new = 0.0;
  std::int64_t tokens = 0;  // total recorded decisions
};

/// Aggregates activation counts (a token counts for every expert with
/// nonzero weight), the token-type histogram and the mean gate mass per
/// group from collected traces.
RoutingStats routing_stats(const std::vector<SiteTrace>& traces);

/// Fraction of tokens whose dominant expert group (argmax over groups of the
/// group-max logit, ties to the lowest task) differs between two trace sets
/// collected on the same data.
double drift_rate(const std::vector<SiteTrace>& before,
                  const std::vector<SiteTrace>& after);

/// metrics.csv: one row per metric with columns run_id,metric,value.
void write_metrics_csv(const std::string& path, const std::string& run_id,
                       const std::vector<std::pair<std::string, double>>& rows);

/// matrix.json: {"config_hash": ..., "tasks": T, "matrix": [[...], ...]}.
void write_matrix_json(const std::string& path, const AccuracyMatrix& m,
                       const std::string& config_hash);
AccuracyMatrix read_matrix_json(const std::string& path);

}  // namespace dymoe
