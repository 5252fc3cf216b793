// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "dymoe/graph.hpp"
#include "dymoe/moe.hpp"
#include "dymoe/taskgen.hpp"

namespace dymoe {

struct BackboneConfig {
  int vocab_size = 64;
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int seq_len = 16;
  // Which linear sublayers carry a MoE site. Attention stays dense by
  // default to keep expert counts small.
  bool moe_fc1 = true;
  bool moe_fc2 = true;
  bool moe_attn_out = false;
};

void validate(const BackboneConfig& cfg);

/// A linear sublayer: frozen base weight plus an (initially empty) expert
/// registry. A site whose registry is empty behaves as a plain linear map.
struct MoeSite {
  Tensor w0;  // [d_out x d_in]
  ExpertRegistry registry;
  bool moe_enabled = false;  // whether expand_for_task touches this site
};

struct Block {
  Tensor wq, wk, wv;  // [d x d]
  MoeSite attn_out;
  MoeSite fc1;
  MoeSite fc2;
};

struct Model {
  BackboneConfig cfg;
  MoeConfig moe;
  Tensor tok_embed;  // [vocab x d]
  Tensor pos_embed;  // [seq_len x d]
  std::vector<Block> blocks;
  std::map<int, Tensor> heads;  // task -> [n_classes x d]; task 0 = pretrain
  bool base_frozen = false;
  int current_task = 0;  // highest task the registries were expanded for
};

/// Named reference into the model's parameter set. Owner task 0 is the
/// backbone (frozen after pretraining); task t > 0 owns its experts, router
/// block and classifier head.
struct ParamRef {
  std::string name;
  Tensor* tensor;
  int owner_task;
};

Model init_model(const BackboneConfig& cfg, const MoeConfig& moe,
                 RngStream& rng);
/// Structure without random initialization; used by the checkpoint loader.
Model make_model_skeleton(const BackboneConfig& cfg, const MoeConfig& moe);

/// Deterministically ordered parameter list (same order every call).
std::vector<ParamRef> model_parameters(Model& m);
std::vector<ParamRef> model_parameters(const Model& m);

/// Enumerates the MoE-enabled sites in deterministic order.
std::vector<std::pair<std::string, MoeSite*>> moe_sites(Model& m);

/// Expands every MoE site for task t and creates the task's classifier head.
void expand_model_for_task(Model& m, int t, int n_classes, RngStream& rng);

/// Routing trace of one site over a token batch, with the group structure
/// captured at collection time.
struct SiteTrace {
  std::string site;
  std::vector<TaskGroup> groups;
  std::vector<RoutingDecision> decisions;  // one per token, batch order
};

struct ForwardOptions {
  int task = 0;           // active task: defines the old/new group split
  RoutingPolicy policy;   // routing constraint applied during training
  bool grad = false;      // mark parameters of train_task as differentiable
  int train_task = -1;
  bool collect = false;   // record routing decisions per site
  bool rsr_exc = false;   // exclusivity loss on the raw routing
  bool rsr_spe = false;   // specialization loss on the raw routing
  bool aux = false;       // load balance over the new group
  const std::vector<int>* labels = nullptr;  // per-token labels for the loss
  int head_task = 0;
};

struct BatchGraph {
  Graph graph;
  NodeId final_repr = kNoNode;  // [n_tokens x d] representation
  NodeId logits = kNoNode;      // head output when labels/head requested
  NodeId l_ntp = kNoNode;
  NodeId l_aux = kNoNode;       // per-token values averaged over sites
  NodeId l_exc = kNoNode;
  NodeId l_spe = kNoNode;
  std::map<std::string, NodeId> params;  // parameter name -> leaf node
  std::vector<SiteTrace> traces;
  std::array<std::int64_t, 4> type_counts{};  // indexed by TokenType
};

/// Runs the backbone with MoE routing at every site over a flat token batch
/// (token_ids.size() must be a multiple of seq_len).
BatchGraph forward_with_moe(Model& m, const std::vector<int>& token_ids,
                            const ForwardOptions& opts);

struct PretrainOptions {
  int steps = 1500;
  double lr = 3e-3;
  int batch_size = 32;
  std::uint64_t seed = 7;
  double grad_clip = 1.0;
  double warmup_ratio = 0.03;
};

/// Trains all base weights on the held-out base task, then freezes them.
/// No experts exist afterwards; registries are empty.
Model pretrain_base(const BackboneConfig& cfg, const MoeConfig& moe,
                    const TaskDataset& base_task, const PretrainOptions& opts);

}  // namespace dymoe
