// SPDX-License-Identifier: Apache-2.0
#include "dymoe/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "dymoe/log.hpp"

namespace dymoe {

namespace {

constexpr int kEvalChunkSamples = 64;
constexpr int kReplayPeriod = 5;  // 1 replay batch per 4 new-task batches

struct FlatBatch {
  std::vector<int> tokens;
  std::vector<int> labels;
  std::vector<int> sample_tasks;  // per sample
};

FlatBatch flatten(const std::vector<const Sample*>& samples) {
  FlatBatch fb;
  for (const Sample* s : samples) {
    fb.tokens.insert(fb.tokens.end(), s->tokens.begin(), s->tokens.end());
    fb.labels.insert(fb.labels.end(), s->labels.begin(), s->labels.end());
    fb.sample_tasks.push_back(s->task);
  }
  return fb;
}

/// Cycles deterministically over shuffled sample indices.
class BatchCursor {
 public:
  BatchCursor(size_t n, RngStream rng) : order_(n), rng_(std::move(rng)) {
    for (size_t i = 0; i < n; ++i) order_[i] = static_cast<int>(i);
    rng_.shuffle(order_);
  }

  int next() {
    if (cursor_ >= order_.size()) {
      rng_.shuffle(order_);
      cursor_ = 0;
    }
    return order_[cursor_++];
  }

 private:
  std::vector<int> order_;
  size_t cursor_ = 0;
  RngStream rng_;
};

std::vector<AdamW::Update> trainable_updates(Model& model, BatchGraph& bg,
                                             int task, double router_decay) {
  std::vector<AdamW::Update> updates;
  for (ParamRef& pr : model_parameters(model)) {
    if (pr.owner_task != task) continue;
    auto it = bg.params.find(pr.name);
    if (it == bg.params.end()) continue;
    if (!bg.graph.has_grad(it->second)) continue;
    bool is_router = pr.name.find(".router.") != std::string::npos;
    updates.push_back({pr.name, pr.tensor, &bg.graph.grad(it->second),
                       is_router ? router_decay : -1.0});
  }
  return updates;
}

}  // namespace

void validate(const TrainConfig& cfg) {
  if (cfg.lr <= 0) throw std::invalid_argument("train.lr must be > 0");
  if (cfg.beta1 <= 0 || cfg.beta1 >= 1 || cfg.beta2 <= 0 || cfg.beta2 >= 1) {
    throw std::invalid_argument("train.betas must be in (0, 1)");
  }
  if (cfg.weight_decay < 0 || cfg.router_weight_decay < 0) {
    throw std::invalid_argument("train.weight_decay must be >= 0");
  }
  if (cfg.warmup_ratio < 0 || cfg.warmup_ratio >= 1) {
    throw std::invalid_argument("train.warmup_ratio must be in [0, 1)");
  }
  if (cfg.batch_size <= 0) {
    throw std::invalid_argument("train.batch_size must be > 0");
  }
  if (cfg.steps_per_task < 0) {
    throw std::invalid_argument("train.steps_per_task must be >= 0");
  }
  if (cfg.lambda < 0 || cfg.alpha < 0) {
    throw std::invalid_argument("train loss weights must be >= 0");
  }
  if (cfg.replay_capacity < 0) {
    throw std::invalid_argument("train.replay_capacity must be >= 0");
  }
  if (cfg.prune_fraction != 0.0 && cfg.prune_fraction != 0.125 &&
      cfg.prune_fraction != 0.25) {
    throw std::invalid_argument("train.prune_fraction must be 0, 1/8 or 1/4");
  }
  if (cfg.grad_clip < 0) {
    throw std::invalid_argument("train.grad_clip must be >= 0");
  }
}

TaskLog train_task(Model& model, AdamW& opt, const TaskDataset& data, int t,
                   const TrainConfig& cfg, ReplayBuffer* replay,
                   const RoutingPolicy* policy_override,
                   const TrainHooks* hooks) {
  if (model.current_task < t) {
    throw std::invalid_argument("train_task: expand_model_for_task not applied");
  }
  if (model.heads.find(t) == model.heads.end()) {
    throw std::invalid_argument("train_task: task head missing");
  }

  TaskLog log;
  log.task = t;
  if (cfg.steps_per_task == 0 || data.train.empty()) return log;

  RoutingPolicy policy;
  if (policy_override != nullptr) {
    policy = *policy_override;
  } else if (cfg.tag_enabled && t > 1) {
    policy = RoutingPolicy::tag();
  } else {
    policy = RoutingPolicy::free();
  }

  BatchCursor cursor(data.train.size(),
                     RngStream::seeded(cfg.seed, "task" + std::to_string(t) + ".batches"));
  auto replay_rng = RngStream::seeded(cfg.seed, "task" + std::to_string(t) + ".replaydraw");

  for (int step = 0; step < cfg.steps_per_task; ++step) {
    bool replay_step = replay != nullptr && t > 1 && replay->size() > 0 &&
                       (step % kReplayPeriod) == kReplayPeriod - 1;

    std::vector<const Sample*> batch;
    std::vector<Sample> replay_batch;
    if (replay_step) {
      replay_batch = replay->sample(cfg.batch_size, replay_rng);
      for (const Sample& s : replay_batch) batch.push_back(&s);
    } else {
      for (int i = 0; i < cfg.batch_size; ++i) {
        batch.push_back(&data.train[static_cast<size_t>(cursor.next())]);
      }
    }
    FlatBatch fb = flatten(batch);

    ForwardOptions fo;
    fo.task = t;
    fo.policy = policy;
    fo.grad = true;
    fo.train_task = t;
    fo.rsr_exc = cfg.rsr_enabled && cfg.rsr_exc_enabled && t > 1;
    fo.rsr_spe = cfg.rsr_enabled && cfg.rsr_spe_enabled && t > 1;
    fo.aux = cfg.aux_enabled;

    StepLog sl;
    sl.step = step + 1;
    sl.replay = replay_step;
    try {
      Graph* graph = nullptr;
      BatchGraph bg;
      NodeId l_ntp = kNoNode;
      if (!replay_step) {
        fo.labels = &fb.labels;
        fo.head_task = t;
        bg = forward_with_moe(model, fb.tokens, fo);
        graph = &bg.graph;
        l_ntp = bg.l_ntp;
      } else {
        // Mixed-task replay batch: shared backbone forward, one
        // cross-entropy per task head over its own sample rows.
        bg = forward_with_moe(model, fb.tokens, fo);
        graph = &bg.graph;
        int seq = model.cfg.seq_len;
        std::map<int, std::vector<int>> rows_by_task;
        for (size_t si = 0; si < fb.sample_tasks.size(); ++si) {
          auto& rows = rows_by_task[fb.sample_tasks[si]];
          for (int i = 0; i < seq; ++i) {
            rows.push_back(static_cast<int>(si) * seq + i);
          }
        }
        NodeId acc = kNoNode;
        int total_tokens = static_cast<int>(fb.labels.size());
        for (auto& [task_id, rows] : rows_by_task) {
          auto head_it = model.heads.find(task_id);
          if (head_it == model.heads.end()) {
            throw std::invalid_argument("train_task: replay head missing");
          }
          NodeId repr = graph->gather_rows(bg.final_repr, rows);
          NodeId head_leaf = graph->leaf(head_it->second, false);
          NodeId logits = graph->matmul(repr, graph->transpose(head_leaf));
          std::vector<int> labels;
          labels.reserve(rows.size());
          for (int r : rows) labels.push_back(fb.labels[static_cast<size_t>(r)]);
          double weight =
              static_cast<double>(rows.size()) / static_cast<double>(total_tokens);
          NodeId ce = graph->scale(graph->cross_entropy_mean(logits, std::move(labels)),
                                   weight);
          acc = acc == kNoNode ? ce : graph->add(acc, ce);
        }
        l_ntp = acc;
      }

      // Assemble the combined objective; absent components contribute
      // nothing and are logged as zero.
      NodeId total = l_ntp;
      double v_aux = 0.0, v_exc = 0.0, v_spe = 0.0;
      if (bg.l_aux != kNoNode) {
        total = graph->add(total, graph->scale(bg.l_aux, cfg.lambda));
        v_aux = graph->value(bg.l_aux).at(0);
      }
      if (bg.l_exc != kNoNode || bg.l_spe != kNoNode) {
        NodeId rsr = bg.l_exc != kNoNode && bg.l_spe != kNoNode
                         ? graph->add(bg.l_exc, bg.l_spe)
                         : (bg.l_exc != kNoNode ? bg.l_exc : bg.l_spe);
        total = graph->add(total, graph->scale(rsr, cfg.alpha));
        if (bg.l_exc != kNoNode) v_exc = graph->value(bg.l_exc).at(0);
        if (bg.l_spe != kNoNode) v_spe = graph->value(bg.l_spe).at(0);
      }

      sl.loss = total_loss(graph->value(l_ntp).at(0), v_aux, v_exc, v_spe,
                           cfg.lambda, cfg.alpha);
      graph->backward(total);

      auto updates = trainable_updates(model, bg, t, cfg.router_weight_decay);
      int warmup = std::max(1, static_cast<int>(cfg.warmup_ratio * cfg.steps_per_task));
      double lr_scale =
          step < warmup ? static_cast<double>(step + 1) / warmup : 1.0;
      opt.step(updates, lr_scale);

      sl.n_new = bg.type_counts[static_cast<size_t>(TokenType::New)];
      sl.n_old = bg.type_counts[static_cast<size_t>(TokenType::Old)];
      sl.n_ambiguous = bg.type_counts[static_cast<size_t>(TokenType::Ambiguous)];
      sl.n_first = bg.type_counts[static_cast<size_t>(TokenType::FirstTask)];
    } catch (const TensorError& e) {
      // Non-finite loss: abort with a diagnostic dump of the offending batch.
      std::string dump = "task " + std::to_string(t) + " step " +
                         std::to_string(step + 1) + ": " + e.what() +
                         "; batch tokens:";
      for (size_t i = 0; i < std::min<size_t>(fb.tokens.size(), 64); ++i) {
        dump += " " + std::to_string(fb.tokens[i]);
      }
      dlog::error("%s", dump.c_str());
      throw DivergenceError(dump, t, step + 1);
    }

    log.steps.push_back(sl);
    if (hooks != nullptr && hooks->after_step) hooks->after_step(step + 1);
  }
  return log;
}

double evaluate(Model& model, const std::vector<Sample>& samples, int t) {
  if (model.heads.find(t) == model.heads.end()) {
    throw std::invalid_argument("evaluate: task head missing");
  }
  std::int64_t correct = 0, total = 0;
  for (size_t start = 0; start < samples.size(); start += kEvalChunkSamples) {
    size_t end = std::min(samples.size(), start + kEvalChunkSamples);
    std::vector<const Sample*> chunk;
    for (size_t i = start; i < end; ++i) chunk.push_back(&samples[i]);
    FlatBatch fb = flatten(chunk);

    ForwardOptions fo;
    fo.task = model.current_task;
    fo.policy = RoutingPolicy::free();  // no constraints at inference
    fo.labels = &fb.labels;
    fo.head_task = t;
    BatchGraph bg = forward_with_moe(model, fb.tokens, fo);
    const Tensor& logits = bg.graph.value(bg.logits);
    std::int64_t n = logits.dim(0), c = logits.dim(1);
    for (std::int64_t r = 0; r < n; ++r) {
      int best = 0;
      for (int j = 1; j < c; ++j) {
        if (logits.at(r, j) > logits.at(r, best)) best = j;
      }
      if (best == fb.labels[static_cast<size_t>(r)]) ++correct;
      ++total;
    }
  }
  if (total == 0) return 0.0;
  return static_cast<double>(correct) / static_cast<double>(total);
}

std::vector<SiteTrace> collect_traces(Model& model,
                                      const std::vector<Sample>& samples,
                                      int t) {
  std::vector<SiteTrace> merged;
  for (size_t start = 0; start < samples.size(); start += kEvalChunkSamples) {
    size_t end = std::min(samples.size(), start + kEvalChunkSamples);
    std::vector<const Sample*> chunk;
    for (size_t i = start; i < end; ++i) chunk.push_back(&samples[i]);
    FlatBatch fb = flatten(chunk);

    ForwardOptions fo;
    fo.task = t;
    fo.policy = RoutingPolicy::free();
    fo.collect = true;
    BatchGraph bg = forward_with_moe(model, fb.tokens, fo);
    if (merged.empty()) {
      merged = std::move(bg.traces);
    } else {
      if (merged.size() != bg.traces.size()) {
        throw std::runtime_error("collect_traces: site count changed");
      }
      for (size_t s = 0; s < merged.size(); ++s) {
        auto& dst = merged[s].decisions;
        auto& src = bg.traces[s].decisions;
        dst.insert(dst.end(), std::make_move_iterator(src.begin()),
                   std::make_move_iterator(src.end()));
      }
    }
  }
  return merged;
}

std::vector<std::vector<std::int64_t>> activation_counts(
    Model& model, const std::vector<Sample>& samples, int t) {
  std::vector<SiteTrace> traces = collect_traces(model, samples, t);
  std::vector<std::vector<std::int64_t>> counts;
  for (const SiteTrace& tr : traces) {
    int n_experts = tr.groups.empty() ? 0 : tr.groups.back().end;
    std::vector<std::int64_t> c(static_cast<size_t>(n_experts), 0);
    for (const RoutingDecision& d : tr.decisions) {
      for (int e : d.selected) c[static_cast<size_t>(e)]++;
    }
    counts.push_back(std::move(c));
  }
  return counts;
}

void snap_params_to_f32(Model& model, int owner_task) {
  for (ParamRef& pr : model_parameters(model)) {
    if (pr.owner_task != owner_task) continue;
    for (std::int64_t i = 0; i < pr.tensor->numel(); ++i) {
      pr.tensor->at(i) = static_cast<double>(static_cast<float>(pr.tensor->at(i)));
    }
  }
}

SequenceResult run_sequence(Model& model,
                            const std::vector<TaskDataset>& stream,
                            const TrainConfig& cfg,
                            const SequenceHooks* hooks) {
  validate(cfg);
  if (stream.empty()) throw std::invalid_argument("run_sequence: empty stream");

  SequenceResult result;
  ReplayBuffer replay(cfg.replay_capacity);
  auto replay_rng = RngStream::seeded(cfg.seed, "replay.reservoir");

  for (size_t idx = 0; idx < stream.size(); ++idx) {
    int t = static_cast<int>(idx) + 1;
    const TaskDataset& ds = stream[idx];
    auto expand_rng =
        RngStream::seeded(cfg.seed, "expand.task" + std::to_string(t));
    expand_model_for_task(model, t, ds.spec.n_classes, expand_rng);

    AdamConfig ac;
    ac.lr = cfg.lr;
    ac.beta1 = cfg.beta1;
    ac.beta2 = cfg.beta2;
    ac.weight_decay = cfg.weight_decay;
    ac.grad_clip = cfg.grad_clip;
    AdamW opt(ac);

    TaskLog log = train_task(model, opt, ds, t, cfg,
                             cfg.replay_capacity > 0 ? &replay : nullptr);
    result.logs.push_back(std::move(log));
    snap_params_to_f32(model, t);

    if (cfg.prune_fraction > 0.0) {
      auto counts = activation_counts(model, ds.test, t);
      auto sites = moe_sites(model);
      for (size_t s = 0; s < sites.size(); ++s) {
        prune_experts(sites[s].second->registry, cfg.prune_fraction, counts[s]);
      }
    }

    std::vector<double> row;
    for (int i = 1; i <= t; ++i) {
      row.push_back(evaluate(model, stream[static_cast<size_t>(i - 1)].test, i));
    }
    dlog::info("task %d trained; accuracy row filled (last %.4f)", t,
               row.back());
    result.matrix.a.push_back(std::move(row));

    if (cfg.replay_capacity > 0) {
      for (const Sample& s : ds.train) replay.push(s, replay_rng);
    }
    if (hooks != nullptr && hooks->after_task) hooks->after_task(t, model, opt);
  }
  return result;
}

}  // namespace dymoe
