// SPDX-License-Identifier: Apache-2.0
#include "dymoe/taskgen.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace dymoe {

namespace {
using nlohmann::json;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

/// Pair label: XOR of the two class lookups when n_classes is a power of
/// two (maximally non-additive), modular sum otherwise.
int mix_classes(int c, int d, int n_classes) {
  if (is_pow2(n_classes)) return (c ^ d) & (n_classes - 1);
  return (c + d) % n_classes;
}
}  // namespace

void validate(const TaskSpec& spec) {
  if (spec.task_id < 0) throw std::invalid_argument("task.task_id must be >= 0");
  if (spec.n_classes < 2) throw std::invalid_argument("task.n_classes must be >= 2");
  if (spec.n_train < 0 || spec.n_test < 0) {
    throw std::invalid_argument("task sample counts must be >= 0");
  }
  if (spec.overlap < 0.0 || spec.overlap > 1.0) {
    throw std::invalid_argument("task.overlap must be in [0, 1]");
  }
}

TaskDataset generate_task(std::uint64_t seed, const TaskSpec& spec,
                          int vocab_size, int seq_len) {
  validate(spec);
  if (vocab_size < 8) throw std::invalid_argument("vocab_size too small");

  int shared = vocab_size / 4;           // shared base pool: [0, shared)
  int region = vocab_size - shared;      // per-task pools live here
  int pool_size = std::max(4, region / 4);

  auto rng = RngStream::seeded(seed, "task" + std::to_string(spec.task_id) + ".data");
  auto label_rng =
      RngStream::seeded(seed, "task" + std::to_string(spec.task_id) + ".labels");
  auto shared_rng = RngStream::seeded(seed, "shared.labels");

  // Class lookups for the token itself and for its predecessor. The
  // predecessor map is task-independent so per-task novelty enters only
  // through the current token: shared-pool tokens keep stable semantics
  // (the stream's genuinely old patterns) while pool tokens are relabeled
  // per task.
  std::vector<int> cmap(static_cast<size_t>(vocab_size));
  std::vector<int> dmap(static_cast<size_t>(vocab_size));
  for (int v = 0; v < vocab_size; ++v) {
    int c_shared = static_cast<int>(shared_rng.below(spec.n_classes));
    int d_shared = static_cast<int>(shared_rng.below(spec.n_classes));
    int c_task = static_cast<int>(label_rng.below(spec.n_classes));
    bool stable = spec.task_id != 0 && v < shared;
    cmap[static_cast<size_t>(v)] = stable ? c_shared : c_task;
    dmap[static_cast<size_t>(v)] = d_shared;
  }

  auto draw_token = [&]() -> int {
    if (spec.task_id == 0) {
      return static_cast<int>(rng.below(vocab_size));  // base task: full vocab
    }
    if (rng.uniform() < spec.overlap) {
      return static_cast<int>(rng.below(shared));
    }
    int base = (spec.task_id - 1) * pool_size + spec.token_shift;
    int off = static_cast<int>(rng.below(pool_size));
    return shared + (base + off) % region;
  };

  TaskDataset ds;
  ds.spec = spec;
  int total = spec.n_train + spec.n_test;
  for (int s = 0; s < total; ++s) {
    Sample sample;
    sample.task = spec.task_id;
    sample.tokens.resize(static_cast<size_t>(seq_len));
    sample.labels.resize(static_cast<size_t>(seq_len));
    for (int i = 0; i < seq_len; ++i) {
      sample.tokens[static_cast<size_t>(i)] = draw_token();
    }
    for (int i = 0; i < seq_len; ++i) {
      int v = sample.tokens[static_cast<size_t>(i)];
      int prev = sample.tokens[static_cast<size_t>(i > 0 ? i - 1 : 0)];
      sample.labels[static_cast<size_t>(i)] = mix_classes(
          cmap[static_cast<size_t>(v)], dmap[static_cast<size_t>(prev)],
          spec.n_classes);
    }
    if (s < spec.n_train) {
      ds.train.push_back(std::move(sample));
    } else {
      ds.test.push_back(std::move(sample));
    }
  }
  return ds;
}

std::vector<TaskDataset> generate_stream(std::uint64_t seed,
                                         const std::vector<TaskSpec>& specs,
                                         int vocab_size, int seq_len) {
  if (specs.empty()) throw std::invalid_argument("generate_stream: no tasks");
  std::vector<TaskDataset> out;
  out.reserve(specs.size());
  for (const TaskSpec& spec : specs) {
    out.push_back(generate_task(seed, spec, vocab_size, seq_len));
  }
  return out;
}

void ReplayBuffer::push(const Sample& s, RngStream& rng) {
  ++seen_;
  if (static_cast<int>(items_.size()) < capacity_) {
    items_.push_back(s);
    return;
  }
  // Reservoir: keep the new sample with probability capacity / seen.
  std::int64_t j = rng.below(seen_);
  if (j < capacity_) {
    items_[static_cast<size_t>(j)] = s;
  }
}

std::vector<Sample> ReplayBuffer::sample(int batch_size, RngStream& rng) const {
  std::vector<Sample> out;
  if (items_.empty() || batch_size <= 0) return out;
  int take = std::min<int>(batch_size, static_cast<int>(items_.size()));
  std::vector<int> idx(items_.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  rng.shuffle(idx);
  out.reserve(static_cast<size_t>(take));
  for (int i = 0; i < take; ++i) {
    out.push_back(items_[static_cast<size_t>(idx[static_cast<size_t>(i)])]);
  }
  return out;
}

void write_jsonl(const std::string& path, const std::vector<Sample>& samples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_jsonl: cannot open " + path);
  for (const Sample& s : samples) {
    json j;
    j["tokens"] = s.tokens;
    j["labels"] = s.labels;
    j["task"] = s.task;
    out << j.dump() << "\n";
  }
}

std::vector<Sample> read_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_jsonl: cannot open " + path);
  std::vector<Sample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Sample s;
    s.tokens = j.at("tokens").get<std::vector<int>>();
    s.labels = j.at("labels").get<std::vector<int>>();
    s.task = j.at("task").get<int>();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace dymoe
