// SPDX-License-Identifier: Apache-2.0
#include "dymoe/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "dymoe/optimizer.hpp"

namespace dymoe {

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kBceClamp = 1e-7;
constexpr double kInf = std::numeric_limits<double>::infinity();

void uniform_init(Tensor& t, double bound, RngStream& rng) {
  for (std::int64_t i = 0; i < t.numel(); ++i) t.at(i) = rng.uniform(-bound, bound);
}

}  // namespace

void validate(const BackboneConfig& cfg) {
  if (cfg.vocab_size < 2) throw std::invalid_argument("backbone.vocab_size must be >= 2");
  if (cfg.d_model <= 0) throw std::invalid_argument("backbone.d_model must be > 0");
  if (cfg.n_heads <= 0 || cfg.d_model % cfg.n_heads != 0) {
    throw std::invalid_argument("backbone.d_model must be divisible by n_heads");
  }
  if (cfg.n_layers <= 0) throw std::invalid_argument("backbone.n_layers must be > 0");
  if (cfg.seq_len <= 0) throw std::invalid_argument("backbone.seq_len must be > 0");
  if (!cfg.moe_fc1 && !cfg.moe_fc2 && !cfg.moe_attn_out) {
    throw std::invalid_argument("backbone: at least one MoE site required");
  }
}

Model make_model_skeleton(const BackboneConfig& cfg, const MoeConfig& moe) {
  validate(cfg);
  validate(moe);
  Model m;
  m.cfg = cfg;
  m.moe = moe;
  int d = cfg.d_model;
  m.tok_embed = Tensor({cfg.vocab_size, d});
  m.pos_embed = Tensor({cfg.seq_len, d});
  m.blocks.resize(static_cast<size_t>(cfg.n_layers));
  for (Block& b : m.blocks) {
    b.wq = Tensor({d, d});
    b.wk = Tensor({d, d});
    b.wv = Tensor({d, d});
    for (MoeSite* site : {&b.attn_out, &b.fc1, &b.fc2}) {
      site->w0 = Tensor({d, d});
      site->registry.d_in = d;
      site->registry.d_out = d;
    }
    b.attn_out.moe_enabled = cfg.moe_attn_out;
    b.fc1.moe_enabled = cfg.moe_fc1;
    b.fc2.moe_enabled = cfg.moe_fc2;
  }
  return m;
}

Model init_model(const BackboneConfig& cfg, const MoeConfig& moe,
                 RngStream& rng) {
  Model m = make_model_skeleton(cfg, moe);
  int d = cfg.d_model;
  double bound = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::int64_t i = 0; i < m.tok_embed.numel(); ++i) {
    m.tok_embed.at(i) = rng.normal(0.0, 1.0);
  }
  for (std::int64_t i = 0; i < m.pos_embed.numel(); ++i) {
    m.pos_embed.at(i) = rng.normal(0.0, 0.1);
  }
  for (Block& b : m.blocks) {
    uniform_init(b.wq, bound, rng);
    uniform_init(b.wk, bound, rng);
    uniform_init(b.wv, bound, rng);
    uniform_init(b.attn_out.w0, bound, rng);
    uniform_init(b.fc1.w0, bound, rng);
    uniform_init(b.fc2.w0, bound, rng);
  }
  return m;
}

std::vector<ParamRef> model_parameters(Model& m) {
  std::vector<ParamRef> out;
  out.push_back({"embed.tok", &m.tok_embed, 0});
  out.push_back({"embed.pos", &m.pos_embed, 0});
  for (size_t l = 0; l < m.blocks.size(); ++l) {
    Block& b = m.blocks[l];
    std::string p = "block" + std::to_string(l) + ".";
    out.push_back({p + "attn.wq", &b.wq, 0});
    out.push_back({p + "attn.wk", &b.wk, 0});
    out.push_back({p + "attn.wv", &b.wv, 0});
    auto add_site = [&](MoeSite& site, const std::string& sp) {
      out.push_back({sp + ".w0", &site.w0, 0});
      ExpertRegistry& reg = site.registry;
      for (size_t e = 0; e < reg.experts.size(); ++e) {
        LoraExpert& ex = reg.experts[e];
        std::string ep = sp + ".expert" + std::to_string(e);
        out.push_back({ep + ".down", &ex.down, ex.owner_task});
        out.push_back({ep + ".up", &ex.up, ex.owner_task});
      }
      for (size_t g = 0; g < reg.router_blocks.size(); ++g) {
        out.push_back({sp + ".router.task" + std::to_string(reg.groups[g].task),
                       &reg.router_blocks[g], reg.groups[g].task});
      }
    };
    add_site(b.attn_out, p + "attn.out");
    add_site(b.fc1, p + "mlp.fc1");
    add_site(b.fc2, p + "mlp.fc2");
  }
  for (auto& [task, head] : m.heads) {
    out.push_back({"head.task" + std::to_string(task), &head, task});
  }
  return out;
}

std::vector<ParamRef> model_parameters(const Model& m) {
  return model_parameters(const_cast<Model&>(m));
}

std::vector<std::pair<std::string, MoeSite*>> moe_sites(Model& m) {
  std::vector<std::pair<std::string, MoeSite*>> out;
  for (size_t l = 0; l < m.blocks.size(); ++l) {
    Block& b = m.blocks[l];
    std::string p = "block" + std::to_string(l) + ".";
    if (b.attn_out.moe_enabled) out.emplace_back(p + "attn.out", &b.attn_out);
    if (b.fc1.moe_enabled) out.emplace_back(p + "mlp.fc1", &b.fc1);
    if (b.fc2.moe_enabled) out.emplace_back(p + "mlp.fc2", &b.fc2);
  }
  return out;
}

void expand_model_for_task(Model& m, int t, int n_classes, RngStream& rng) {
  if (t != m.current_task + 1) {
    throw std::invalid_argument("expand_model_for_task: task not sequential");
  }
  for (auto& [name, site] : moe_sites(m)) {
    expand_for_task(site->registry, m.moe, t, rng);
  }
  Tensor head({n_classes, m.cfg.d_model});
  uniform_init(head, 1.0 / std::sqrt(static_cast<double>(m.cfg.d_model)), rng);
  m.heads[t] = std::move(head);
  m.current_task = t;
}

namespace {

/// State shared by the per-site subgraphs of one forward pass.
struct SiteLosses {
  std::vector<NodeId> exc;
  std::vector<NodeId> spe;
  std::vector<NodeId> aux;
};

struct Builder {
  Model& m;
  const ForwardOptions& opts;
  BatchGraph& bg;
  SiteLosses losses;

  NodeId param(const std::string& name, Tensor& t, int owner) {
    auto it = bg.params.find(name);
    if (it != bg.params.end()) return it->second;
    bool rg = opts.grad && owner == opts.train_task;
    NodeId id = bg.graph.leaf(t, rg);
    bg.params.emplace(name, id);
    return id;
  }

  NodeId linear(NodeId x, const std::string& name, Tensor& w, int owner) {
    Graph& g = bg.graph;
    return g.matmul(x, g.transpose(param(name, w, owner)));
  }

  NodeId site_forward(const std::string& name, MoeSite& site, NodeId h);
};

NodeId Builder::site_forward(const std::string& name, MoeSite& site, NodeId h) {
  Graph& g = bg.graph;
  NodeId base = linear(h, name + ".w0", site.w0, 0);
  ExpertRegistry& reg = site.registry;
  if (reg.empty()) return base;

  std::int64_t n = g.value(h).dim(0);
  int n_experts = reg.size();

  // Router logits per task block, concatenated into [n x E].
  std::vector<NodeId> block_logits;
  for (size_t bidx = 0; bidx < reg.router_blocks.size(); ++bidx) {
    block_logits.push_back(
        linear(h, name + ".router.task" + std::to_string(reg.groups[bidx].task),
               reg.router_blocks[bidx], reg.groups[bidx].task));
  }
  NodeId s = block_logits.size() == 1 ? block_logits[0]
                                      : g.concat_cols(block_logits);
  const Tensor& sval = g.value(s);

  IndexRange old_r = reg.old_range(opts.task);
  IndexRange new_r = reg.new_range(opts.task);
  bool first = old_r.empty();

  // Per-token routing decisions on the computed logits. The selection and
  // TAG masks are piecewise-constant and enter the graph as constants.
  Tensor select_mask({n, n_experts});
  Tensor raw_mask({n, n_experts});
  bool want_raw = (opts.rsr_exc || opts.rsr_spe) && !first;
  bool want_aux = opts.aux && !new_r.empty();
  std::vector<double> y_target(static_cast<size_t>(n), 0.0);
  std::vector<bool> spe_active(static_cast<size_t>(n), false);
  std::vector<std::vector<int>> routed_rows(static_cast<size_t>(n_experts));
  std::vector<int> aux_top1(static_cast<size_t>(n), 0);

  SiteTrace trace;
  if (opts.collect) {
    trace.site = name;
    trace.groups = reg.groups;
    trace.decisions.reserve(static_cast<size_t>(n));
  }

  std::vector<double> row(static_cast<size_t>(n_experts));
  RoutingPolicy free_policy = RoutingPolicy::free();
  for (std::int64_t r = 0; r < n; ++r) {
    for (int e = 0; e < n_experts; ++e) {
      row[static_cast<size_t>(e)] = sval.at(r, e);
    }
    RoutingDecision d =
        decide_from_logits(row, old_r, new_r, m.moe, opts.policy, first);
    bg.type_counts[static_cast<size_t>(d.token_type)]++;
    for (int e : d.selected) {
      select_mask.at(r, e) = 1.0;
      routed_rows[static_cast<size_t>(e)].push_back(static_cast<int>(r));
    }
    if (want_raw) {
      RoutingDecision raw =
          decide_from_logits(row, old_r, new_r, m.moe, free_policy, first);
      for (int e : raw.selected) raw_mask.at(r, e) = 1.0;
      GateMass gm = gate_mass(raw.weights, old_r, new_r);
      y_target[static_cast<size_t>(r)] = 1.0 - gm.g_tilde_old;
      // Specialization targets genuinely new-task tokens; pushing the
      // collective new-group weight up on old or ambiguous tokens would
      // re-create the routing drift the rest of the machinery suppresses.
      spe_active[static_cast<size_t>(r)] = d.token_type == TokenType::New;
    }
    if (want_aux) {
      int best = new_r.begin;
      for (int e = new_r.begin + 1; e < new_r.end; ++e) {
        if (row[static_cast<size_t>(e)] > row[static_cast<size_t>(best)]) best = e;
      }
      aux_top1[static_cast<size_t>(r)] = best - new_r.begin;
    }
    if (opts.collect) trace.decisions.push_back(std::move(d));
  }
  if (opts.collect) bg.traces.push_back(std::move(trace));

  NodeId w = g.masked_softmax_rows(s, std::move(select_mask));

  // Sparse expert mixing: each expert only sees the tokens routed to it.
  NodeId acc = kNoNode;
  for (int e = 0; e < n_experts; ++e) {
    const std::vector<int>& rows = routed_rows[static_cast<size_t>(e)];
    if (rows.empty()) continue;
    LoraExpert& ex = reg.experts[static_cast<size_t>(e)];
    std::string ep = name + ".expert" + std::to_string(e);
    NodeId he = g.gather_rows(h, rows);
    NodeId low = g.matmul(he, g.transpose(param(ep + ".down", ex.down, ex.owner_task)));
    NodeId up = g.matmul(low, g.transpose(param(ep + ".up", ex.up, ex.owner_task)));
    NodeId we = g.gather_rows(g.slice_cols(w, e, 1), rows);
    NodeId scaled = g.scale_rows(up, we);
    NodeId contrib = g.scatter_rows(scaled, rows, static_cast<int>(n));
    acc = acc == kNoNode ? contrib : g.add(acc, contrib);
  }
  NodeId out = acc == kNoNode ? base : g.add(base, acc);

  double inv_n = 1.0 / static_cast<double>(n);

  if (want_raw) {
    // RSR sees the raw (pre-TAG) routing distribution; the masked path
    // would make the exclusivity loss identically zero.
    NodeId w_raw = g.masked_softmax_rows(s, std::move(raw_mask));
    Tensor ind_old({n_experts, 1});
    Tensor ind_new({n_experts, 1});
    for (int e = old_r.begin; e < old_r.end; ++e) ind_old.at(e, 0) = 1.0;
    for (int e = new_r.begin; e < new_r.end; ++e) ind_new.at(e, 0) = 1.0;
    NodeId g_old = g.matmul(w_raw, g.constant(std::move(ind_old)));
    NodeId g_new = g.matmul(w_raw, g.constant(std::move(ind_new)));
    if (opts.rsr_exc) {
      losses.exc.push_back(
          g.scale(g.reduce_sum_all(g.mul(g_old, g_new)), inv_n));
    }

    if (opts.rsr_spe) {
      Tensor neg_y({n, 1});
      Tensor y_minus_one({n, 1});
      for (std::int64_t r = 0; r < n; ++r) {
        if (!spe_active[static_cast<size_t>(r)]) continue;  // rows stay zero
        neg_y.at(r, 0) = -y_target[static_cast<size_t>(r)];
        y_minus_one.at(r, 0) = y_target[static_cast<size_t>(r)] - 1.0;
      }
      NodeId g_hat = g.clamp(g_new, kBceClamp, 1.0 - kBceClamp);
      NodeId term1 = g.mul(g.constant(std::move(neg_y)), g.log(g_hat));
      NodeId term2 = g.mul(g.constant(std::move(y_minus_one)),
                           g.log(g.affine(g_hat, -1.0, 1.0)));
      losses.spe.push_back(
          g.scale(g.reduce_sum_all(g.add(term1, term2)), inv_n));
    }
  }

  if (want_aux) {
    int n_new = new_r.size();
    NodeId s_new = g.slice_cols(s, new_r.begin, n_new);
    NodeId p = g.softmax_rows(s_new);
    NodeId ones = g.constant(Tensor::full({n, 1}, 1.0));
    NodeId p_mean = g.scale(g.matmul(g.transpose(p), ones), inv_n);
    Tensor f({1, n_new});
    for (std::int64_t r = 0; r < n; ++r) {
      f.at(0, aux_top1[static_cast<size_t>(r)]) += inv_n;
    }
    NodeId laux = g.scale(g.reduce_sum_all(g.matmul(g.constant(std::move(f)), p_mean)),
                          static_cast<double>(n_new));
    losses.aux.push_back(laux);
  }
  return out;
}

NodeId mean_of(Graph& g, const std::vector<NodeId>& parts) {
  if (parts.empty()) return kNoNode;
  NodeId acc = parts[0];
  for (size_t i = 1; i < parts.size(); ++i) acc = g.add(acc, parts[i]);
  return g.scale(acc, 1.0 / static_cast<double>(parts.size()));
}

}  // namespace

BatchGraph forward_with_moe(Model& m, const std::vector<int>& token_ids,
                            const ForwardOptions& opts) {
  int seq = m.cfg.seq_len;
  if (token_ids.empty() || token_ids.size() % static_cast<size_t>(seq) != 0) {
    throw std::invalid_argument("forward_with_moe: batch not a multiple of seq_len");
  }
  int batch = static_cast<int>(token_ids.size()) / seq;

  BatchGraph bg;
  Builder builder{m, opts, bg, {}};
  Graph& g = bg.graph;

  NodeId x = g.embed(builder.param("embed.tok", m.tok_embed, 0), token_ids);
  x = g.add_tiled_rows(x, builder.param("embed.pos", m.pos_embed, 0));

  for (size_t l = 0; l < m.blocks.size(); ++l) {
    Block& b = m.blocks[l];
    std::string p = "block" + std::to_string(l) + ".";
    NodeId y = g.rmsnorm_rows(x, kNormEps);
    NodeId q = builder.linear(y, p + "attn.wq", b.wq, 0);
    NodeId k = builder.linear(y, p + "attn.wk", b.wk, 0);
    NodeId v = builder.linear(y, p + "attn.wv", b.wv, 0);
    NodeId att = g.causal_attention(q, k, v, batch, seq, m.cfg.n_heads);
    NodeId o = builder.site_forward(p + "attn.out", b.attn_out, att);
    x = g.add(x, o);

    NodeId y2 = g.rmsnorm_rows(x, kNormEps);
    NodeId h1 = builder.site_forward(p + "mlp.fc1", b.fc1, y2);
    NodeId h1r = g.clamp(h1, 0.0, kInf);
    NodeId h2 = builder.site_forward(p + "mlp.fc2", b.fc2, h1r);
    x = g.add(x, h2);
  }
  bg.final_repr = g.rmsnorm_rows(x, kNormEps);

  if (opts.labels != nullptr) {
    auto it = m.heads.find(opts.head_task);
    if (it == m.heads.end()) {
      throw std::invalid_argument("forward_with_moe: task head missing");
    }
    bg.logits = builder.linear(bg.final_repr,
                               "head.task" + std::to_string(opts.head_task),
                               it->second, opts.head_task);
    bg.l_ntp = g.cross_entropy_mean(bg.logits, *opts.labels);
  }

  bg.l_exc = mean_of(g, builder.losses.exc);
  bg.l_spe = mean_of(g, builder.losses.spe);
  bg.l_aux = mean_of(g, builder.losses.aux);
  return bg;
}

Model pretrain_base(const BackboneConfig& cfg, const MoeConfig& moe,
                    const TaskDataset& base_task, const PretrainOptions& opts) {
  if (base_task.spec.task_id != 0) {
    throw std::invalid_argument("pretrain_base: base task must have task_id 0");
  }
  auto rng = RngStream::seeded(opts.seed, "pretrain.init");
  Model m = init_model(cfg, moe, rng);
  Tensor head({base_task.spec.n_classes, cfg.d_model});
  uniform_init(head, 1.0 / std::sqrt(static_cast<double>(cfg.d_model)), rng);
  m.heads[0] = std::move(head);

  if (opts.steps > 0 && !base_task.train.empty()) {
    AdamConfig ac;
    ac.lr = opts.lr;
    ac.grad_clip = opts.grad_clip;
    AdamW opt(ac);
    auto batch_rng = RngStream::seeded(opts.seed, "pretrain.batches");
    std::vector<int> order(base_task.train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    batch_rng.shuffle(order);
    size_t cursor = 0;
    int warmup = std::max(1, static_cast<int>(opts.warmup_ratio * opts.steps));

    for (int step = 0; step < opts.steps; ++step) {
      std::vector<int> tokens;
      std::vector<int> labels;
      tokens.reserve(static_cast<size_t>(opts.batch_size) * cfg.seq_len);
      for (int i = 0; i < opts.batch_size; ++i) {
        if (cursor >= order.size()) {
          batch_rng.shuffle(order);
          cursor = 0;
        }
        const Sample& s = base_task.train[static_cast<size_t>(order[cursor++])];
        tokens.insert(tokens.end(), s.tokens.begin(), s.tokens.end());
        labels.insert(labels.end(), s.labels.begin(), s.labels.end());
      }

      ForwardOptions fo;
      fo.task = 0;
      fo.grad = true;
      fo.train_task = 0;
      fo.labels = &labels;
      fo.head_task = 0;
      BatchGraph bg = forward_with_moe(m, tokens, fo);
      bg.graph.backward(bg.l_ntp);

      std::vector<AdamW::Update> updates;
      for (ParamRef& pr : model_parameters(m)) {
        if (pr.owner_task != 0) continue;
        // Embeddings stay at their random near-orthogonal init: token
        // identity must survive pretraining so the routers can tell the
        // task pools apart later.
        if (pr.name == "embed.tok" || pr.name == "embed.pos") continue;
        NodeId leaf = bg.params.at(pr.name);
        if (!bg.graph.has_grad(leaf)) continue;
        updates.push_back({pr.name, pr.tensor, &bg.graph.grad(leaf), -1.0});
      }
      double lr_scale =
          step < warmup ? static_cast<double>(step + 1) / warmup : 1.0;
      opt.step(updates, lr_scale);
    }
  }
  m.base_frozen = true;
  return m;
}

}  // namespace dymoe
