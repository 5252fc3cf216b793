// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <set>

#include "dymoe/moe.hpp"
#include "dymoe/rng.hpp"
#include "test_util.hpp"

using namespace dymoe;
using dymoe::testing::f32_fingerprint;
using dymoe::testing::random_tensor;

namespace {

ExpertRegistry make_registry(int d, int tasks, const MoeConfig& cfg,
                             std::uint64_t seed = 42) {
  ExpertRegistry reg;
  reg.d_in = d;
  reg.d_out = d;
  auto rng = RngStream::seeded(seed, "registry");
  for (int t = 1; t <= tasks; ++t) {
    expand_for_task(reg, cfg, t, rng);
  }
  return reg;
}

}  // namespace

TEST_CASE("single expert routes with weight one") {
  MoeConfig cfg;
  cfg.experts_per_task = 1;
  cfg.top_k = 4;
  ExpertRegistry reg = make_registry(8, 1, cfg);
  auto rng = RngStream::seeded(1, "h");
  std::vector<double> h(8);
  for (double& v : h) v = rng.uniform(-1, 1);
  RoutingDecision d = route(h, reg, cfg, /*tag_enabled=*/false, 1);
  REQUIRE(d.weights.size() == 1);
  CHECK(d.weights[0] == 1.0);
  CHECK(d.token_type == TokenType::FirstTask);
}

TEST_CASE("symmetric logits split the weight") {
  MoeConfig cfg;
  cfg.top_k = 2;
  RoutingDecision d = decide_from_logits({0.0, 0.0}, {0, 0}, {0, 2}, cfg,
                                         RoutingPolicy::free(), true);
  CHECK(d.weights[0] == 0.5);
  CHECK(d.weights[1] == 0.5);
}

TEST_CASE("top-K tie selects the lowest index") {
  // s = [ln 2, 0, 0], K = 2: the tie at indices 1 and 2 resolves to 1 and
  // the softmax of {ln 2, 0} gives [2/3, 1/3].
  MoeConfig cfg;
  cfg.top_k = 2;
  RoutingDecision d = decide_from_logits({std::log(2.0), 0.0, 0.0}, {0, 0},
                                         {0, 3}, cfg, RoutingPolicy::free(),
                                         true);
  REQUIRE(d.selected == std::vector<int>({0, 1}));
  CHECK(d.weights[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(d.weights[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(d.weights[2] == 0.0);
}

TEST_CASE("routing error paths") {
  MoeConfig cfg;
  ExpertRegistry reg;
  reg.d_in = 4;
  reg.d_out = 4;
  std::vector<double> h(4, 0.0);
  CHECK_THROWS(route(h, reg, cfg, false, 1));  // empty registry
}

TEST_CASE("expansion appends contiguous groups and freezes the past") {
  MoeConfig cfg;
  cfg.experts_per_task = 4;
  ExpertRegistry reg;
  reg.d_in = 8;
  reg.d_out = 8;
  auto rng = RngStream::seeded(5, "exp");

  expand_for_task(reg, cfg, 1, rng);
  CHECK(reg.size() == 4);
  CHECK(reg.groups.size() == 1);
  CHECK(reg.groups[0].begin == 0);
  CHECK(reg.groups[0].end == 4);
  for (const LoraExpert& e : reg.experts) CHECK(!e.frozen);

  // Old rows must be byte-stable across the expansion.
  std::uint64_t round0 = f32_fingerprint(reg.router_blocks[0]);
  std::vector<std::uint64_t> expert_prints;
  for (const LoraExpert& e : reg.experts) {
    expert_prints.push_back(f32_fingerprint(e.down));
    expert_prints.push_back(f32_fingerprint(e.up));
  }

  expand_for_task(reg, cfg, 2, rng);
  CHECK(reg.size() == 8);
  CHECK(reg.groups[1].begin == 4);
  CHECK(reg.groups[1].end == 8);
  CHECK(reg.old_range(2).begin == 0);
  CHECK(reg.old_range(2).end == 4);
  CHECK(reg.new_range(2).begin == 4);
  for (int i = 0; i < 4; ++i) CHECK(reg.experts[static_cast<size_t>(i)].frozen);
  for (int i = 4; i < 8; ++i) CHECK(!reg.experts[static_cast<size_t>(i)].frozen);
  CHECK(reg.router_block_frozen[0]);
  CHECK(!reg.router_block_frozen[1]);

  CHECK(f32_fingerprint(reg.router_blocks[0]) == round0);
  size_t k = 0;
  for (int i = 0; i < 4; ++i) {
    CHECK(f32_fingerprint(reg.experts[static_cast<size_t>(i)].down) ==
          expert_prints[k++]);
    CHECK(f32_fingerprint(reg.experts[static_cast<size_t>(i)].up) ==
          expert_prints[k++]);
  }

  CHECK_THROWS(expand_for_task(reg, cfg, 4, rng));  // not sequential
}

TEST_CASE("expert initialization convention") {
  MoeConfig cfg;
  cfg.rank = 2;
  ExpertRegistry reg = make_registry(16, 1, cfg);
  double bound = 1.0 / std::sqrt(16.0);
  for (const LoraExpert& e : reg.experts) {
    CHECK(e.rank == 2);
    for (std::int64_t i = 0; i < e.down.numel(); ++i) {
      CHECK(std::abs(e.down.at(i)) <= bound);
    }
    for (std::int64_t i = 0; i < e.up.numel(); ++i) {
      CHECK(e.up.at(i) == 0.0);  // neutrality at expansion
    }
  }
}

TEST_CASE("forward with zero-initialized adapters is the base map") {
  MoeConfig cfg;
  ExpertRegistry reg = make_registry(6, 1, cfg);
  auto rng = RngStream::seeded(6, "fw");
  Tensor w0 = random_tensor({6, 6}, rng);
  std::vector<double> h(6);
  for (double& v : h) v = rng.uniform(-1, 1);

  RoutingDecision d = route(h, reg, cfg, false, 1);
  std::vector<double> out = moe_forward(h, d, reg, w0);
  for (int r = 0; r < 6; ++r) {
    double expect = 0.0;
    for (int c = 0; c < 6; ++c) expect += w0.at(r, c) * h[static_cast<size_t>(c)];
    CHECK(out[static_cast<size_t>(r)] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("forward with a scaled-identity adapter") {
  MoeConfig cfg;
  cfg.experts_per_task = 1;
  cfg.rank = 2;
  cfg.top_k = 1;
  ExpertRegistry reg = make_registry(2, 1, cfg);
  // up * down = delta * I.
  double delta = 0.25;
  LoraExpert& e = reg.experts[0];
  e.down = Tensor({2, 2}, {1, 0, 0, 1});
  e.up = Tensor({2, 2}, {delta, 0, 0, delta});
  Tensor w0({2, 2}, {1, 0, 0, 1});

  std::vector<double> h = {3.0, -2.0};
  RoutingDecision d = route(h, reg, cfg, false, 1);
  REQUIRE(d.weights[0] == 1.0);
  std::vector<double> out = moe_forward(h, d, reg, w0);
  CHECK(out[0] == doctest::Approx((1 + delta) * 3.0).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx((1 + delta) * -2.0).epsilon(1e-12));
}

TEST_CASE("forward mixes expert outputs linearly") {
  MoeConfig cfg;
  cfg.experts_per_task = 2;
  cfg.rank = 1;
  cfg.top_k = 2;
  ExpertRegistry reg = make_registry(2, 1, cfg);
  // Equal logits -> w = [0.5, 0.5]; adapters produce u and v.
  reg.router_blocks[0] = Tensor({2, 2}, {0, 0, 0, 0});
  reg.experts[0].down = Tensor({1, 2}, {1, 0});
  reg.experts[0].up = Tensor({2, 1}, {2, 0});   // u = [2*h0, 0]
  reg.experts[1].down = Tensor({1, 2}, {0, 1});
  reg.experts[1].up = Tensor({2, 1}, {0, 4});   // v = [0, 4*h1]
  Tensor w0 = Tensor::zeros({2, 2});

  std::vector<double> h = {1.0, 1.0};
  RoutingDecision d = route(h, reg, cfg, false, 1);
  CHECK(d.weights[0] == 0.5);
  CHECK(d.weights[1] == 0.5);
  std::vector<double> out = moe_forward(h, d, reg, w0);
  CHECK(out[0] == doctest::Approx(0.5 * 2.0).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx(0.5 * 4.0).epsilon(1e-12));
}

TEST_CASE("pruning removes the lowest-activation experts of the last task") {
  MoeConfig cfg;
  cfg.experts_per_task = 8;
  ExpertRegistry reg = make_registry(4, 1, cfg);

  SUBCASE("fraction zero is a no-op") {
    auto before = reg.size();
    prune_experts(reg, 0.0, std::vector<std::int64_t>(8, 1));
    CHECK(reg.size() == before);
  }

  SUBCASE("quarter pruning removes the two lowest frequencies") {
    // Mark experts so survivors are identifiable.
    for (int i = 0; i < 8; ++i) {
      reg.experts[static_cast<size_t>(i)].down.at(0) = 100.0 + i;
    }
    prune_experts(reg, 0.25, {9, 1, 8, 2, 7, 3, 6, 4});
    REQUIRE(reg.size() == 6);
    std::vector<double> markers;
    for (const LoraExpert& e : reg.experts) markers.push_back(e.down.at(0));
    // Experts 1 (freq 1) and 3 (freq 2) are gone.
    CHECK(markers == std::vector<double>({100, 102, 104, 105, 106, 107}));
    CHECK(reg.groups[0].begin == 0);
    CHECK(reg.groups[0].end == 6);
    CHECK(reg.router_blocks[0].dim(0) == 6);
  }

  SUBCASE("equal frequencies prune the lowest index") {
    prune_experts(reg, 0.125, std::vector<std::int64_t>(8, 5));
    REQUIRE(reg.size() == 7);
    // Router row 0 must now hold what was previously row 1.
    CHECK(reg.groups[0].end == 7);
  }

  SUBCASE("invalid fraction") {
    CHECK_THROWS(prune_experts(reg, 0.5, std::vector<std::int64_t>(8, 1)));
  }
}

TEST_CASE("second-task pruning only touches the new group") {
  MoeConfig cfg;
  cfg.experts_per_task = 4;
  ExpertRegistry reg = make_registry(4, 2, cfg);
  std::uint64_t old_print = f32_fingerprint(reg.router_blocks[0]);
  std::vector<std::int64_t> counts = {0, 0, 0, 0, 5, 1, 4, 2};
  prune_experts(reg, 0.25, counts);
  CHECK(reg.size() == 7);
  CHECK(reg.groups[0].end == 4);  // old group untouched
  CHECK(reg.groups[1].begin == 4);
  CHECK(reg.groups[1].end == 7);
  CHECK(f32_fingerprint(reg.router_blocks[0]) == old_print);
}

TEST_CASE("routing invariants hold over random cases") {
  auto rng = RngStream::seeded(77, "massprop");
  for (int trial = 0; trial < 1000; ++trial) {
    MoeConfig cfg;
    cfg.top_k = 1 + static_cast<int>(rng.below(6));
    cfg.tau = rng.uniform();
    int n_old = static_cast<int>(rng.below(5));  // may be zero (first task)
    int n_new = 1 + static_cast<int>(rng.below(5));
    int n = n_old + n_new;
    std::vector<double> s(static_cast<size_t>(n));
    for (double& v : s) v = rng.uniform(-4.0, 4.0);
    bool first = n_old == 0;
    bool tag = rng.uniform() < 0.5;
    RoutingPolicy policy = tag ? RoutingPolicy::tag() : RoutingPolicy::free();

    RoutingDecision d = decide_from_logits(s, {0, n_old}, {n_old, n}, cfg,
                                           policy, first);
    double sum = 0.0;
    int nnz = 0;
    for (double w : d.weights) {
      sum += w;
      if (w > 0.0) ++nnz;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);

    int unmasked = 0;
    for (double v : d.masked_logits) {
      if (v != -std::numeric_limits<double>::infinity()) ++unmasked;
    }
    CHECK(nnz == std::min(cfg.top_k, unmasked));
    CHECK(static_cast<int>(d.selected.size()) == nnz);
    for (int i = 0; i < n; ++i) {
      if (d.masked_logits[static_cast<size_t>(i)] ==
          -std::numeric_limits<double>::infinity()) {
        CHECK(d.weights[static_cast<size_t>(i)] == 0.0);
      }
    }
  }
}

TEST_CASE("TAG routing equals the brute-force subset softmax") {
  auto rng = RngStream::seeded(78, "subset");
  for (int trial = 0; trial < 1000; ++trial) {
    MoeConfig cfg;
    cfg.top_k = 1 + static_cast<int>(rng.below(8));
    cfg.tau = rng.uniform();
    int n_old = 1 + static_cast<int>(rng.below(4));
    int n_new = 1 + static_cast<int>(rng.below(4));
    int n = std::min(8, n_old + n_new);
    n_new = n - n_old;
    if (n_new < 1) continue;
    std::vector<double> s(static_cast<size_t>(n));
    for (double& v : s) v = rng.uniform(-4.0, 4.0);

    RoutingDecision d = decide_from_logits(s, {0, n_old}, {n_old, n}, cfg,
                                           RoutingPolicy::tag(), false);

    // Brute force: restrict to the unmasked subset, take its top-K by value
    // (ties to lowest index), softmax over exactly those entries.
    std::vector<int> unmasked;
    for (int i = 0; i < n; ++i) {
      if (d.masked_logits[static_cast<size_t>(i)] !=
          -std::numeric_limits<double>::infinity()) {
        unmasked.push_back(i);
      }
    }
    std::stable_sort(unmasked.begin(), unmasked.end(), [&](int a, int b) {
      if (s[static_cast<size_t>(a)] != s[static_cast<size_t>(b)]) {
        return s[static_cast<size_t>(a)] > s[static_cast<size_t>(b)];
      }
      return a < b;
    });
    unmasked.resize(std::min<size_t>(unmasked.size(),
                                     static_cast<size_t>(cfg.top_k)));
    double mx = -std::numeric_limits<double>::infinity();
    for (int i : unmasked) mx = std::max(mx, s[static_cast<size_t>(i)]);
    double denom = 0.0;
    for (int i : unmasked) denom += std::exp(s[static_cast<size_t>(i)] - mx);
    std::vector<double> expect(static_cast<size_t>(n), 0.0);
    for (int i : unmasked) {
      expect[static_cast<size_t>(i)] = std::exp(s[static_cast<size_t>(i)] - mx) / denom;
    }
    for (int i = 0; i < n; ++i) {
      CHECK(d.weights[static_cast<size_t>(i)] ==
            doctest::Approx(expect[static_cast<size_t>(i)]).epsilon(1e-12));
    }
  }
}

TEST_CASE("registry logits agree with per-block matrix products") {
  MoeConfig cfg;
  ExpertRegistry reg = make_registry(8, 3, cfg);
  auto rng = RngStream::seeded(79, "logits");
  std::vector<double> h(8);
  for (double& v : h) v = rng.uniform(-1, 1);
  std::vector<double> s = reg.logits(h);
  REQUIRE(static_cast<int>(s.size()) == reg.size());
  int idx = 0;
  for (const Tensor& block : reg.router_blocks) {
    for (std::int64_t r = 0; r < block.dim(0); ++r) {
      double acc = 0.0;
      for (std::int64_t c = 0; c < block.dim(1); ++c) {
        acc += block.at(r, c) * h[static_cast<size_t>(c)];
      }
      CHECK(s[static_cast<size_t>(idx++)] == doctest::Approx(acc).epsilon(1e-14));
    }
  }
}
