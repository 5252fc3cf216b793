// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dymoe/rng.hpp"

namespace dymoe {

/// One synthetic token-classification task. task_id 0 is the held-out base
/// task used for pretraining: it draws from the full vocabulary. Stream
/// tasks draw an `overlap` fraction of tokens from a shared base pool so
/// that genuinely old-looking and ambiguous tokens exist in new-task data.
struct TaskSpec {
  int task_id = 1;
  int n_classes = 4;
  int n_train = 2000;
  int n_test = 500;
  int token_shift = 0;  // rotates the task-specific token pool
  double overlap = 0.3;
};

void validate(const TaskSpec& spec);

struct Sample {
  std::vector<int> tokens;
  std::vector<int> labels;
  int task = 0;
};

struct TaskDataset {
  TaskSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Pure function of (seed, spec, vocab_size, seq_len); train/test splits are
/// disjoint by index partition.
TaskDataset generate_task(std::uint64_t seed, const TaskSpec& spec,
                          int vocab_size, int seq_len);

std::vector<TaskDataset> generate_stream(std::uint64_t seed,
                                         const std::vector<TaskSpec>& specs,
                                         int vocab_size, int seq_len);

/// Bounded reservoir of past-task samples; every sample ever pushed has the
/// same retention probability.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(int capacity) : capacity_(capacity) {}

  void push(const Sample& s, RngStream& rng);
  /// Uniform draw without replacement, up to batch_size items. An empty
  /// buffer yields an empty batch.
  std::vector<Sample> sample(int batch_size, RngStream& rng) const;

  int capacity() const { return capacity_; }
  int size() const { return static_cast<int>(items_.size()); }
  std::int64_t seen() const { return seen_; }
  const std::vector<Sample>& items() const { return items_; }

 private:
  int capacity_ = 0;
  std::int64_t seen_ = 0;
  std::vector<Sample> items_;
};

/// JSON-lines dataset exchange: {"tokens": [...], "labels": [...], "task": t}
void write_jsonl(const std::string& path, const std::vector<Sample>& samples);
std::vector<Sample> read_jsonl(const std::string& path);

}  // namespace dymoe
