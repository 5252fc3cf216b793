// SPDX-License-Identifier: Apache-2.0
#include "dymoe/config.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace dymoe {

namespace {
using nlohmann::json;

template <typename T>
void read_field(const json& j, const std::string& scope, const char* key,
                T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(scope + "." + key, "invalid value");
  }
}

json to_json(const RunConfig& c) {
  json j;
  j["backbone"] = {{"vocab_size", c.backbone.vocab_size},
                   {"d_model", c.backbone.d_model},
                   {"n_heads", c.backbone.n_heads},
                   {"n_layers", c.backbone.n_layers},
                   {"seq_len", c.backbone.seq_len},
                   {"moe_fc1", c.backbone.moe_fc1},
                   {"moe_fc2", c.backbone.moe_fc2},
                   {"moe_attn_out", c.backbone.moe_attn_out}};
  j["moe"] = {{"top_k", c.moe.top_k},
              {"experts_per_task", c.moe.experts_per_task},
              {"rank", c.moe.rank},
              {"tau", c.moe.tau},
              {"epsilon", c.moe.epsilon}};
  j["train"] = {{"lr", c.train.lr},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"weight_decay", c.train.weight_decay},
                {"router_weight_decay", c.train.router_weight_decay},
                {"warmup_ratio", c.train.warmup_ratio},
                {"batch_size", c.train.batch_size},
                {"steps_per_task", c.train.steps_per_task},
                {"lambda", c.train.lambda},
                {"alpha", c.train.alpha},
                {"tag_enabled", c.train.tag_enabled},
                {"rsr_enabled", c.train.rsr_enabled},
                {"aux_enabled", c.train.aux_enabled},
                {"replay_capacity", c.train.replay_capacity},
                {"prune_fraction", c.train.prune_fraction},
                {"grad_clip", c.train.grad_clip},
                {"seed", c.train.seed}};
  j["pretrain"] = {{"steps", c.pretrain.steps},
                   {"lr", c.pretrain.lr},
                   {"batch_size", c.pretrain.batch_size},
                   {"seed", c.pretrain.seed},
                   {"n_train", c.pretrain.n_train},
                   {"n_test", c.pretrain.n_test},
                   {"base_checkpoint", c.pretrain.base_checkpoint}};
  j["analysis"] = {{"eval_every", c.analysis.eval_every}};
  j["tasks"] = json::array();
  for (const TaskSpec& t : c.tasks) {
    j["tasks"].push_back({{"task_id", t.task_id},
                          {"n_classes", t.n_classes},
                          {"n_train", t.n_train},
                          {"n_test", t.n_test},
                          {"token_shift", t.token_shift},
                          {"overlap", t.overlap}});
  }
  return j;
}

RunConfig from_json(const json& j) {
  RunConfig c = default_run_config();
  if (j.contains("backbone")) {
    const json& b = j.at("backbone");
    read_field(b, "backbone", "vocab_size", c.backbone.vocab_size);
    read_field(b, "backbone", "d_model", c.backbone.d_model);
    read_field(b, "backbone", "n_heads", c.backbone.n_heads);
    read_field(b, "backbone", "n_layers", c.backbone.n_layers);
    read_field(b, "backbone", "seq_len", c.backbone.seq_len);
    read_field(b, "backbone", "moe_fc1", c.backbone.moe_fc1);
    read_field(b, "backbone", "moe_fc2", c.backbone.moe_fc2);
    read_field(b, "backbone", "moe_attn_out", c.backbone.moe_attn_out);
  }
  if (j.contains("moe")) {
    const json& m = j.at("moe");
    read_field(m, "moe", "top_k", c.moe.top_k);
    read_field(m, "moe", "experts_per_task", c.moe.experts_per_task);
    read_field(m, "moe", "rank", c.moe.rank);
    read_field(m, "moe", "tau", c.moe.tau);
    read_field(m, "moe", "epsilon", c.moe.epsilon);
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    read_field(t, "train", "lr", c.train.lr);
    read_field(t, "train", "beta1", c.train.beta1);
    read_field(t, "train", "beta2", c.train.beta2);
    read_field(t, "train", "weight_decay", c.train.weight_decay);
    read_field(t, "train", "router_weight_decay", c.train.router_weight_decay);
    read_field(t, "train", "warmup_ratio", c.train.warmup_ratio);
    read_field(t, "train", "batch_size", c.train.batch_size);
    read_field(t, "train", "steps_per_task", c.train.steps_per_task);
    read_field(t, "train", "lambda", c.train.lambda);
    read_field(t, "train", "alpha", c.train.alpha);
    read_field(t, "train", "tag_enabled", c.train.tag_enabled);
    read_field(t, "train", "rsr_enabled", c.train.rsr_enabled);
    read_field(t, "train", "aux_enabled", c.train.aux_enabled);
    read_field(t, "train", "replay_capacity", c.train.replay_capacity);
    read_field(t, "train", "prune_fraction", c.train.prune_fraction);
    read_field(t, "train", "grad_clip", c.train.grad_clip);
    read_field(t, "train", "seed", c.train.seed);
  }
  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    read_field(p, "pretrain", "steps", c.pretrain.steps);
    read_field(p, "pretrain", "lr", c.pretrain.lr);
    read_field(p, "pretrain", "batch_size", c.pretrain.batch_size);
    read_field(p, "pretrain", "seed", c.pretrain.seed);
    read_field(p, "pretrain", "n_train", c.pretrain.n_train);
    read_field(p, "pretrain", "n_test", c.pretrain.n_test);
    read_field(p, "pretrain", "base_checkpoint", c.pretrain.base_checkpoint);
  }
  if (j.contains("analysis")) {
    read_field(j.at("analysis"), "analysis", "eval_every",
               c.analysis.eval_every);
  }
  if (j.contains("tasks")) {
    c.tasks.clear();
    int idx = 0;
    for (const json& tj : j.at("tasks")) {
      TaskSpec t;
      std::string scope = "tasks[" + std::to_string(idx) + "]";
      read_field(tj, scope, "task_id", t.task_id);
      if (!tj.contains("task_id")) t.task_id = idx + 1;
      read_field(tj, scope, "n_classes", t.n_classes);
      read_field(tj, scope, "n_train", t.n_train);
      read_field(tj, scope, "n_test", t.n_test);
      read_field(tj, scope, "token_shift", t.token_shift);
      read_field(tj, scope, "overlap", t.overlap);
      c.tasks.push_back(t);
      ++idx;
    }
  }
  return c;
}

void check(bool ok, const char* field, const char* msg) {
  if (!ok) throw ConfigError(field, msg);
}

}  // namespace

RunConfig default_run_config() {
  RunConfig c;
  c.tasks.clear();
  for (int t = 1; t <= 4; ++t) {
    TaskSpec spec;
    spec.task_id = t;
    c.tasks.push_back(spec);
  }
  return c;
}

void validate(const RunConfig& cfg) {
  try {
    validate(cfg.backbone);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("backbone", e.what());
  }
  check(cfg.moe.top_k > 0, "moe.top_k", "must be > 0");
  check(cfg.moe.experts_per_task > 0, "moe.experts_per_task", "must be > 0");
  check(cfg.moe.rank > 0, "moe.rank", "must be > 0");
  check(cfg.moe.tau >= 0.0 && cfg.moe.tau <= 1.0, "moe.tau",
        "must be in [0, 1]");
  check(cfg.moe.epsilon > 0.0, "moe.epsilon", "must be > 0");
  try {
    validate(cfg.train);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("train", e.what());
  }
  check(cfg.pretrain.steps >= 0, "pretrain.steps", "must be >= 0");
  check(cfg.pretrain.lr > 0, "pretrain.lr", "must be > 0");
  check(cfg.pretrain.batch_size > 0, "pretrain.batch_size", "must be > 0");
  check(cfg.pretrain.n_train > 0, "pretrain.n_train", "must be > 0");
  check(cfg.analysis.eval_every > 0, "analysis.eval_every", "must be > 0");
  check(!cfg.tasks.empty(), "tasks", "at least one task required");
  for (size_t i = 0; i < cfg.tasks.size(); ++i) {
    const TaskSpec& t = cfg.tasks[i];
    std::string scope = "tasks[" + std::to_string(i) + "]";
    try {
      dymoe::validate(t);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(scope, e.what());
    }
    check(t.task_id == static_cast<int>(i) + 1, "tasks",
          "task_id values must be sequential starting at 1");
  }
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError("(document)", e.what());
  }
  RunConfig c = from_json(j);
  validate(c);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("(file)", "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string canonical_json(const RunConfig& cfg) {
  // nlohmann::json keeps object keys sorted, so dump() is canonical given
  // the fixed field set.
  return to_json(cfg).dump();
}

std::string run_config_json(const RunConfig& cfg) {
  return to_json(cfg).dump(2);
}

std::string config_hash(const RunConfig& cfg) {
  std::uint64_t h = fnv1a64(canonical_json(cfg));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace dymoe
