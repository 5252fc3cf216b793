// SPDX-License-Identifier: Apache-2.0
//
// Command line front end: train / analyze / inspect / eval.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "dymoe/analysis.hpp"
#include "dymoe/checkpoint.hpp"
#include "dymoe/config.hpp"
#include "dymoe/log.hpp"
#include "dymoe/metrics.hpp"
#include "dymoe/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitDivergence = 2;
constexpr int kExitCheckpoint = 3;

struct TrainFlags {
  std::string config_path;
  std::string out_dir;
  std::string base_ckpt;
  bool no_tag = false;
  bool no_rsr = false;
  bool no_aux = false;
  int replay = -1;
  std::string prune;
  std::int64_t seed = -1;
};

std::optional<double> parse_prune(const std::string& s) {
  if (s.empty() || s == "0") return 0.0;
  if (s == "1/8") return 0.125;
  if (s == "1/4") return 0.25;
  return std::nullopt;
}

dymoe::TaskSpec base_task_spec(const dymoe::RunConfig& cfg) {
  dymoe::TaskSpec spec;
  spec.task_id = 0;
  spec.n_classes = cfg.tasks.front().n_classes;
  spec.n_train = cfg.pretrain.n_train;
  spec.n_test = cfg.pretrain.n_test;
  spec.overlap = 0.0;  // base task draws from the full vocabulary
  return spec;
}

/// Pretrains the frozen backbone or loads it from a base checkpoint.
dymoe::Model prepare_base_model(const dymoe::RunConfig& cfg,
                                const std::string& base_ckpt) {
  if (!base_ckpt.empty()) {
    dymoe::LoadedCheckpoint loaded = dymoe::load_checkpoint(base_ckpt);
    if (loaded.model.current_task != 0) {
      throw dymoe::ConfigError("pretrain.base_checkpoint",
                               "checkpoint already contains task experts");
    }
    dymoe::dlog::info("loaded base backbone from %s", base_ckpt.c_str());
    return std::move(loaded.model);
  }
  dymoe::TaskDataset base = dymoe::generate_task(
      cfg.pretrain.seed, base_task_spec(cfg), cfg.backbone.vocab_size,
      cfg.backbone.seq_len);
  dymoe::PretrainOptions popts;
  popts.steps = cfg.pretrain.steps;
  popts.lr = cfg.pretrain.lr;
  popts.batch_size = cfg.pretrain.batch_size;
  popts.seed = cfg.pretrain.seed;
  dymoe::dlog::info("pretraining base backbone (%d steps)", popts.steps);
  dymoe::Model model =
      dymoe::pretrain_base(cfg.backbone, cfg.moe, base, popts);
  dymoe::snap_params_to_f32(model, 0);
  double acc = dymoe::evaluate(model, base.test, 0);
  dymoe::dlog::info("base task accuracy after pretraining: %.2f%%",
                    100.0 * acc);
  return model;
}

void write_task_log(const std::string& path, const dymoe::TaskLog& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path);
  for (const dymoe::StepLog& s : log.steps) {
    json j;
    j["step"] = s.step;
    j["l_ntp"] = s.loss.l_ntp;
    j["l_aux"] = s.loss.l_aux;
    j["l_exc"] = s.loss.l_exc;
    j["l_spe"] = s.loss.l_spe;
    j["total"] = s.loss.total;
    j["type_counts"] = {{"new", s.n_new},
                        {"old", s.n_old},
                        {"ambiguous", s.n_ambiguous}};
    if (s.replay) j["replay"] = true;
    out << j.dump() << "\n";
  }
}

int cmd_train(const TrainFlags& flags) {
  dymoe::RunConfig cfg;
  try {
    cfg = dymoe::load_run_config(flags.config_path);
    if (flags.no_tag) cfg.train.tag_enabled = false;
    if (flags.no_rsr) cfg.train.rsr_enabled = false;
    if (flags.no_aux) cfg.train.aux_enabled = false;
    if (flags.replay >= 0) cfg.train.replay_capacity = flags.replay;
    if (!flags.prune.empty()) {
      auto frac = parse_prune(flags.prune);
      if (!frac) throw dymoe::ConfigError("--prune", "must be 0, 1/8 or 1/4");
      cfg.train.prune_fraction = *frac;
    }
    if (flags.seed >= 0) {
      cfg.train.seed = static_cast<std::uint64_t>(flags.seed);
    }
    if (!flags.base_ckpt.empty()) cfg.pretrain.base_checkpoint = flags.base_ckpt;
    dymoe::validate(cfg);
  } catch (const dymoe::ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return kExitConfig;
  }

  std::string hash = dymoe::config_hash(cfg);
  fs::create_directories(fs::path(flags.out_dir) / "checkpoints");
  fs::create_directories(fs::path(flags.out_dir) / "logs");
  fs::create_directories(fs::path(flags.out_dir) / "data");

  try {
    dymoe::Model model = prepare_base_model(cfg, cfg.pretrain.base_checkpoint);
    if (cfg.pretrain.base_checkpoint.empty()) {
      dymoe::save_checkpoint(
          (fs::path(flags.out_dir) / "checkpoints" / "base.ckpt").string(),
          model, cfg, 0, {}, 0);
    }

    std::vector<dymoe::TaskDataset> stream = dymoe::generate_stream(
        cfg.train.seed, cfg.tasks, cfg.backbone.vocab_size,
        cfg.backbone.seq_len);
    for (const dymoe::TaskDataset& ds : stream) {
      dymoe::write_jsonl((fs::path(flags.out_dir) / "data" /
                          ("task" + std::to_string(ds.spec.task_id) +
                           ".test.jsonl"))
                             .string(),
                         ds.test);
    }

    dymoe::SequenceHooks hooks;
    hooks.after_task = [&](int t, dymoe::Model& m, dymoe::AdamW& opt) {
      dymoe::save_checkpoint(
          (fs::path(flags.out_dir) / "checkpoints" /
           ("task" + std::to_string(t) + ".ckpt"))
              .string(),
          m, cfg, t, opt);
    };
    dymoe::SequenceResult result =
        dymoe::run_sequence(model, stream, cfg.train, &hooks);

    for (const dymoe::TaskLog& log : result.logs) {
      write_task_log((fs::path(flags.out_dir) / "logs" /
                      ("task" + std::to_string(log.task) + ".jsonl"))
                         .string(),
                     log);
    }
    dymoe::write_matrix_json(
        (fs::path(flags.out_dir) / "matrix.json").string(), result.matrix,
        hash);
    dymoe::write_metrics_csv(
        (fs::path(flags.out_dir) / "metrics.csv").string(), hash,
        {{"mfn", dymoe::mfn(result.matrix)},
         {"maa", dymoe::maa(result.matrix)},
         {"bwt", dymoe::bwt(result.matrix)}});

    std::printf("run %s finished: MFN %.2f%%  MAA %.2f%%  BWT %+.2f%%\n",
                hash.c_str(), 100.0 * dymoe::mfn(result.matrix),
                100.0 * dymoe::maa(result.matrix),
                100.0 * dymoe::bwt(result.matrix));
    return kExitOk;
  } catch (const dymoe::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const dymoe::CheckpointVersionError& e) {
    std::cerr << e.what() << "\n";
    return kExitCheckpoint;
  } catch (const dymoe::CheckpointError& e) {
    std::cerr << e.what() << "\n";
    return kExitCheckpoint;
  }
}

int cmd_analyze(const std::string& config_path, const std::string& strategy_name,
                const std::string& out_dir, std::int64_t seed,
                const std::string& base_ckpt) {
  auto strategy = dymoe::strategy_from_name(strategy_name);
  if (!strategy) {
    std::cerr << "unknown strategy: " << strategy_name
              << " (expected baseline | only-new | mask-old | only-ambiguous)\n";
    return kExitConfig;
  }
  dymoe::RunConfig cfg;
  try {
    cfg = dymoe::load_run_config(config_path);
    if (seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(seed);
    if (!base_ckpt.empty()) cfg.pretrain.base_checkpoint = base_ckpt;
    dymoe::validate(cfg);
    if (cfg.tasks.size() < 2) {
      throw dymoe::ConfigError("tasks", "analysis needs at least two tasks");
    }
  } catch (const dymoe::ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return kExitConfig;
  }

  fs::create_directories(out_dir);
  try {
    dymoe::Model model = prepare_base_model(cfg, cfg.pretrain.base_checkpoint);
    std::vector<dymoe::TaskDataset> stream = dymoe::generate_stream(
        cfg.train.seed, {cfg.tasks[0], cfg.tasks[1]}, cfg.backbone.vocab_size,
        cfg.backbone.seq_len);

    // Shared task-1 state; strategies only differ in task-2 routing.
    auto expand_rng = dymoe::RngStream::seeded(cfg.train.seed, "expand.task1");
    dymoe::expand_model_for_task(model, 1, stream[0].spec.n_classes,
                                 expand_rng);
    dymoe::AdamConfig ac;
    ac.lr = cfg.train.lr;
    ac.beta1 = cfg.train.beta1;
    ac.beta2 = cfg.train.beta2;
    ac.weight_decay = cfg.train.weight_decay;
    ac.grad_clip = cfg.train.grad_clip;
    dymoe::AdamW opt(ac);
    dymoe::train_task(model, opt, stream[0], 1, cfg.train);
    dymoe::snap_params_to_f32(model, 1);

    std::vector<dymoe::CurvePoint> curve = dymoe::two_task_experiment(
        model, stream[0], stream[1], cfg.train, *strategy,
        cfg.analysis.eval_every);
    std::string path =
        (fs::path(out_dir) /
         ("curve_" + std::string(dymoe::strategy_name(*strategy)) + ".csv"))
            .string();
    dymoe::write_curve_csv(path, curve, *strategy, cfg.train.seed);
    std::printf("strategy %s: final task1 %.2f%%  task2 %.2f%% (%s)\n",
                dymoe::strategy_name(*strategy), 100.0 * curve.back().acc_task1,
                100.0 * curve.back().acc_task2, path.c_str());
    return kExitOk;
  } catch (const dymoe::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const dymoe::CheckpointError& e) {
    std::cerr << e.what() << "\n";
    return kExitCheckpoint;
  }
}

int cmd_inspect(const std::string& ckpt_path, const std::string& data_path,
                const std::string& out_dir) {
  try {
    dymoe::LoadedCheckpoint ckpt = dymoe::load_checkpoint(ckpt_path);
    std::vector<dymoe::Sample> samples = dymoe::read_jsonl(data_path);
    if (samples.empty()) {
      std::cerr << "no samples in " << data_path << "\n";
      return kExitConfig;
    }
    std::vector<dymoe::SiteTrace> traces = dymoe::collect_traces(
        ckpt.model, samples, ckpt.model.current_task);
    dymoe::RoutingStats stats = dymoe::routing_stats(traces);

    std::printf("checkpoint %s (config %s, task %d)\n", ckpt_path.c_str(),
                ckpt.cfg_hash.c_str(), ckpt.task_reached);
    std::printf("\nexpert activation (tokens routed, per site):\n");
    std::printf("%-20s %8s %8s %12s\n", "site", "expert", "task", "count");
    auto sites = dymoe::moe_sites(ckpt.model);
    for (size_t s = 0; s < stats.sites.size(); ++s) {
      const dymoe::ExpertRegistry& reg = sites[s].second->registry;
      for (size_t e = 0; e < stats.activations[s].size(); ++e) {
        std::printf("%-20s %8zu %8d %12lld\n", stats.sites[s].c_str(), e,
                    reg.experts[e].owner_task,
                    static_cast<long long>(stats.activations[s][e]));
      }
    }
    std::printf("\ntoken types: new %lld  old %lld  ambiguous %lld  first-task %lld\n",
                static_cast<long long>(stats.type_histogram[0]),
                static_cast<long long>(stats.type_histogram[1]),
                static_cast<long long>(stats.type_histogram[2]),
                static_cast<long long>(stats.type_histogram[3]));
    std::printf("gate mass: old group %.4f  new group %.4f\n",
                stats.mean_g_old, stats.mean_g_new);

    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      json j;
      j["config_hash"] = ckpt.cfg_hash;
      j["sites"] = json::array();
      for (size_t s = 0; s < stats.sites.size(); ++s) {
        j["sites"].push_back(
            {{"site", stats.sites[s]}, {"activations", stats.activations[s]}});
      }
      j["type_histogram"] = {{"new", stats.type_histogram[0]},
                             {"old", stats.type_histogram[1]},
                             {"ambiguous", stats.type_histogram[2]},
                             {"first_task", stats.type_histogram[3]}};
      j["mean_g_old"] = stats.mean_g_old;
      j["mean_g_new"] = stats.mean_g_new;
      std::ofstream out(fs::path(out_dir) / "routing_stats.json");
      out << j.dump(2) << "\n";
    }
    return kExitOk;
  } catch (const dymoe::CheckpointError& e) {
    std::cerr << e.what() << "\n";
    return kExitCheckpoint;
  }
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path) {
  try {
    dymoe::LoadedCheckpoint ckpt = dymoe::load_checkpoint(ckpt_path);
    std::vector<dymoe::Sample> samples = dymoe::read_jsonl(data_path);
    if (samples.empty()) {
      std::cerr << "no samples in " << data_path << "\n";
      return kExitConfig;
    }
    int task = samples.front().task;
    for (const dymoe::Sample& s : samples) {
      if (s.task != task) {
        std::cerr << "eval data mixes tasks\n";
        return kExitConfig;
      }
    }
    double acc = dymoe::evaluate(ckpt.model, samples, task);
    std::printf("task %d accuracy: %.2f%% (%.17g)\n", task, 100.0 * acc, acc);
    return kExitOk;
  } catch (const dymoe::CheckpointError& e) {
    std::cerr << e.what() << "\n";
    return kExitCheckpoint;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic mixture-of-experts continual learning engine"};
  app.require_subcommand(1);

  TrainFlags tf;
  CLI::App* train = app.add_subcommand("train", "run the continual sequence");
  train->add_option("--config", tf.config_path, "run config JSON")->required();
  train->add_option("--out", tf.out_dir, "output directory")->required();
  train->add_flag("--no-tag", tf.no_tag, "disable token assignment guidance");
  train->add_flag("--no-rsr", tf.no_rsr, "disable routing score regularization");
  train->add_flag("--no-aux", tf.no_aux, "disable the load balance loss");
  train->add_option("--replay", tf.replay, "replay buffer capacity");
  train->add_option("--prune", tf.prune, "expert pruning fraction (0, 1/8, 1/4)");
  train->add_option("--seed", tf.seed, "training seed override");
  train->add_option("--base-ckpt", tf.base_ckpt, "reuse a pretrained backbone");

  std::string an_config, an_strategy, an_out, an_base;
  std::int64_t an_seed = -1;
  CLI::App* analyze = app.add_subcommand("analyze", "two-task masking analysis");
  analyze->add_option("--config", an_config, "run config JSON")->required();
  analyze->add_option("--strategy", an_strategy,
                      "baseline | only-new | mask-old | only-ambiguous")
      ->required();
  analyze->add_option("--out", an_out, "output directory")->required();
  analyze->add_option("--seed", an_seed, "training seed override");
  analyze->add_option("--base-ckpt", an_base, "reuse a pretrained backbone");

  std::string in_ckpt, in_data, in_out;
  CLI::App* inspect = app.add_subcommand("inspect", "routing statistics");
  inspect->add_option("--ckpt", in_ckpt, "checkpoint path")->required();
  inspect->add_option("--data", in_data, "JSONL dataset")->required();
  inspect->add_option("--out", in_out, "optional JSON export directory");

  std::string ev_ckpt, ev_data;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--data", ev_data, "JSONL dataset")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(tf);
    if (analyze->parsed()) {
      return cmd_analyze(an_config, an_strategy, an_out, an_seed, an_base);
    }
    if (inspect->parsed()) return cmd_inspect(in_ckpt, in_data, in_out);
    if (eval_cmd->parsed()) return cmd_eval(ev_ckpt, ev_data);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }
  return kExitConfig;
}
