// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures and helpers for the unit and acceptance suites.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dymoe/backbone.hpp"
#include "dymoe/checkpoint.hpp"
#include "dymoe/config.hpp"
#include "dymoe/rng.hpp"
#include "dymoe/tensor.hpp"
#include "dymoe/trainer.hpp"

namespace dymoe::testing {

inline Tensor random_tensor(std::vector<std::int64_t> shape, RngStream& rng,
                            double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(lo, hi);
  return t;
}

/// Fingerprint of the f32 serialization of a tensor, as the checkpoint
/// stores it; used for freeze-invariance checks.
inline std::uint64_t f32_fingerprint(const Tensor& t) {
  std::vector<float> buf(static_cast<size_t>(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    buf[static_cast<size_t>(i)] = static_cast<float>(t.at(i));
  }
  return fnv1a64(buf.data(), buf.size() * sizeof(float));
}

inline std::uint64_t params_fingerprint(Model& m, int owner_task) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const ParamRef& pr : model_parameters(m)) {
    if (pr.owner_task != owner_task) continue;
    std::uint64_t f = f32_fingerprint(*pr.tensor);
    h = fnv1a64(&f, sizeof(f), h);
    h = fnv1a64(pr.name, h);
  }
  return h;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::string s((std::istreambuf_iterator<char>(in)),
                std::istreambuf_iterator<char>());
  return s;
}

inline TaskSpec base_spec(const RunConfig& cfg) {
  TaskSpec spec;
  spec.task_id = 0;
  spec.n_classes = cfg.tasks.front().n_classes;
  spec.n_train = cfg.pretrain.n_train;
  spec.n_test = cfg.pretrain.n_test;
  spec.overlap = 0.0;
  return spec;
}

/// The desk-scale default backbone, pretrained once per build tree and
/// cached on disk; every suite that needs a frozen base reuses it.
inline const Model& shared_base_model() {
  static Model cached = [] {
    RunConfig cfg = default_run_config();
    std::string cache = "dymoe_test_base.ckpt";
    if (std::filesystem::exists(cache)) {
      try {
        LoadedCheckpoint ckpt = load_checkpoint(cache);
        if (ckpt.cfg_hash == config_hash(cfg) &&
            ckpt.model.current_task == 0) {
          return std::move(ckpt.model);
        }
      } catch (const CheckpointError&) {
        // stale cache; fall through to a fresh pretrain
      }
    }
    TaskDataset base = generate_task(cfg.pretrain.seed, base_spec(cfg),
                                     cfg.backbone.vocab_size,
                                     cfg.backbone.seq_len);
    PretrainOptions popts;
    popts.steps = cfg.pretrain.steps;
    popts.lr = cfg.pretrain.lr;
    popts.batch_size = cfg.pretrain.batch_size;
    popts.seed = cfg.pretrain.seed;
    Model m = pretrain_base(cfg.backbone, cfg.moe, base, popts);
    snap_params_to_f32(m, 0);
    std::string tmp = cache + ".tmp";
    save_checkpoint(tmp, m, cfg, 0, {}, 0);
    std::filesystem::rename(tmp, cache);
    return m;
  }();
  return cached;
}

/// Small configuration for fast integration tests: same architecture, tiny
/// data and step budget.
inline RunConfig tiny_run_config(int n_tasks = 2) {
  RunConfig cfg = default_run_config();
  cfg.tasks.clear();
  for (int t = 1; t <= n_tasks; ++t) {
    TaskSpec spec;
    spec.task_id = t;
    spec.n_train = 192;
    spec.n_test = 96;
    cfg.tasks.push_back(spec);
  }
  cfg.train.steps_per_task = 40;
  cfg.train.batch_size = 16;
  cfg.pretrain.steps = 60;
  cfg.pretrain.n_train = 256;
  cfg.pretrain.n_test = 128;
  return cfg;
}

}  // namespace dymoe::testing
