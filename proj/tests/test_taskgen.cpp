// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <set>

#include "dymoe/taskgen.hpp"
#include "test_util.hpp"

using namespace dymoe;

namespace {
std::set<int> token_support(const TaskDataset& ds) {
  std::set<int> support;
  for (const Sample& s : ds.train) {
    support.insert(s.tokens.begin(), s.tokens.end());
  }
  for (const Sample& s : ds.test) {
    support.insert(s.tokens.begin(), s.tokens.end());
  }
  return support;
}
}  // namespace

TEST_CASE("zero overlap keeps task supports disjoint") {
  TaskSpec a;
  a.task_id = 1;
  a.overlap = 0.0;
  a.n_train = 200;
  a.n_test = 50;
  TaskSpec b = a;
  b.task_id = 2;
  TaskDataset da = generate_task(9, a, 64, 16);
  TaskDataset db = generate_task(9, b, 64, 16);
  std::set<int> sa = token_support(da), sb = token_support(db);
  for (int v : sa) CHECK(sb.count(v) == 0);
  // And nothing from the shared pool (ids below vocab/4).
  for (int v : sa) CHECK(v >= 16);
}

TEST_CASE("full overlap collapses every task onto the shared pool") {
  TaskSpec a;
  a.task_id = 1;
  a.overlap = 1.0;
  a.n_train = 100;
  a.n_test = 20;
  TaskDataset ds = generate_task(9, a, 64, 16);
  for (int v : token_support(ds)) CHECK(v < 16);
}

TEST_CASE("generation is a pure function of seed and spec") {
  TaskSpec spec;
  spec.task_id = 3;
  spec.n_train = 64;
  spec.n_test = 16;
  TaskDataset x = generate_task(123, spec, 64, 16);
  TaskDataset y = generate_task(123, spec, 64, 16);
  REQUIRE(x.train.size() == y.train.size());
  for (size_t i = 0; i < x.train.size(); ++i) {
    CHECK(x.train[i].tokens == y.train[i].tokens);
    CHECK(x.train[i].labels == y.train[i].labels);
  }
  TaskDataset z = generate_task(124, spec, 64, 16);
  bool all_equal = true;
  for (size_t i = 0; i < x.train.size(); ++i) {
    if (x.train[i].tokens != z.train[i].tokens) all_equal = false;
  }
  CHECK(!all_equal);
}

TEST_CASE("train and test splits partition the sample budget") {
  TaskSpec spec;
  spec.task_id = 1;
  spec.n_train = 37;
  spec.n_test = 13;
  TaskDataset ds = generate_task(5, spec, 64, 8);
  CHECK(ds.train.size() == 37);
  CHECK(ds.test.size() == 13);
  for (const Sample& s : ds.train) {
    CHECK(s.task == 1);
    CHECK(s.tokens.size() == 8);
    for (int v : s.tokens) CHECK(v < 64);
    for (int l : s.labels) CHECK(l < spec.n_classes);
  }
}

TEST_CASE("base task draws from the full vocabulary") {
  TaskSpec spec;
  spec.task_id = 0;
  spec.n_train = 600;
  spec.n_test = 0;
  TaskDataset ds = generate_task(5, spec, 64, 16);
  std::set<int> support = token_support(ds);
  CHECK(support.size() > 60);  // effectively all 64 ids
}

TEST_CASE("stream generation validates input") {
  CHECK_THROWS(generate_stream(1, {}, 64, 16));
  TaskSpec bad;
  bad.overlap = 1.5;
  CHECK_THROWS(generate_task(1, bad, 64, 16));
}

TEST_CASE("replay buffer keeps everything under capacity") {
  ReplayBuffer buf(2);
  auto rng = RngStream::seeded(1, "replay");
  Sample s;
  s.tokens = {1};
  s.labels = {0};
  buf.push(s, rng);
  s.tokens = {2};
  buf.push(s, rng);
  CHECK(buf.size() == 2);
  std::set<int> kept;
  for (const Sample& item : buf.items()) kept.insert(item.tokens[0]);
  CHECK(kept == std::set<int>({1, 2}));
}

TEST_CASE("sampling an empty buffer yields an empty batch") {
  ReplayBuffer buf(8);
  auto rng = RngStream::seeded(2, "replay");
  CHECK(buf.sample(4, rng).empty());
}

TEST_CASE("reservoir retention matches the uniform property") {
  // Push 1000 into capacity 100: the retained count from the first 500 is
  // hypergeometric with mean 50 and std ~4.7; [37, 63] is a ~99% interval.
  ReplayBuffer buf(100);
  auto rng = RngStream::seeded(3, "replay");
  for (int i = 0; i < 1000; ++i) {
    Sample s;
    s.tokens = {i};
    s.labels = {0};
    buf.push(s, rng);
  }
  CHECK(buf.size() == 100);
  CHECK(buf.seen() == 1000);
  int from_first_half = 0;
  for (const Sample& s : buf.items()) {
    if (s.tokens[0] < 500) ++from_first_half;
  }
  CHECK(from_first_half >= 37);
  CHECK(from_first_half <= 63);
}

TEST_CASE("replay sampling draws without replacement") {
  ReplayBuffer buf(16);
  auto rng = RngStream::seeded(4, "replay");
  for (int i = 0; i < 16; ++i) {
    Sample s;
    s.tokens = {i};
    s.labels = {0};
    buf.push(s, rng);
  }
  std::vector<Sample> batch = buf.sample(10, rng);
  CHECK(batch.size() == 10);
  std::set<int> seen;
  for (const Sample& s : batch) seen.insert(s.tokens[0]);
  CHECK(seen.size() == 10);

  // Asking for more than the buffer holds returns everything once.
  batch = buf.sample(50, rng);
  CHECK(batch.size() == 16);
}

TEST_CASE("jsonl round trip") {
  TaskSpec spec;
  spec.task_id = 2;
  spec.n_train = 8;
  spec.n_test = 4;
  TaskDataset ds = generate_task(11, spec, 64, 16);
  std::string path = "taskgen_roundtrip.jsonl";
  write_jsonl(path, ds.test);
  std::vector<Sample> back = read_jsonl(path);
  REQUIRE(back.size() == ds.test.size());
  for (size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].tokens == ds.test[i].tokens);
    CHECK(back[i].labels == ds.test[i].labels);
    CHECK(back[i].task == ds.test[i].task);
  }
  std::filesystem::remove(path);
}
