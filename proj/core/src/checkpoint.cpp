// SPDX-License-Identifier: Apache-2.0
#include "dymoe/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace dymoe {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload assumes a little-endian host");

namespace {
using nlohmann::json;

constexpr char kMagic[8] = {'D', 'Y', 'M', 'O', 'E', 'C', 'K', 'P'};

json structure_json(const Model& m) {
  json model_j;
  model_j["current_task"] = m.current_task;
  model_j["base_frozen"] = m.base_frozen;
  json heads = json::array();
  for (const auto& [task, head] : m.heads) {
    heads.push_back({{"task", task},
                     {"n_classes", static_cast<int>(head.dim(0))}});
  }
  model_j["heads"] = heads;
  json sites = json::array();
  auto& mm = const_cast<Model&>(m);
  for (auto& [name, site] : moe_sites(mm)) {
    json sj;
    sj["name"] = name;
    json groups = json::array();
    for (const TaskGroup& g : site->registry.groups) {
      groups.push_back({{"task", g.task}, {"begin", g.begin}, {"end", g.end}});
    }
    sj["groups"] = groups;
    json experts = json::array();
    for (const LoraExpert& e : site->registry.experts) {
      experts.push_back({{"rank", e.rank},
                         {"owner_task", e.owner_task},
                         {"frozen", e.frozen}});
    }
    sj["experts"] = experts;
    sites.push_back(sj);
  }
  model_j["sites"] = sites;
  return model_j;
}

void write_f32(std::ofstream& out, const Tensor& t) {
  std::vector<float> buf(static_cast<size_t>(t.numel()));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    buf[static_cast<size_t>(i)] = static_cast<float>(t.at(i));
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

}  // namespace

void save_checkpoint(
    const std::string& path, const Model& model, const RunConfig& config,
    int task_reached,
    const std::vector<std::pair<std::string, const Tensor*>>& opt_tensors,
    int opt_step) {
  std::vector<std::pair<std::string, const Tensor*>> entries;
  for (const ParamRef& pr : model_parameters(model)) {
    entries.emplace_back(pr.name, pr.tensor);
  }
  for (const auto& [name, t] : opt_tensors) {
    entries.emplace_back(name, t);
  }

  json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["config_hash"] = config_hash(config);
  manifest["task_reached"] = task_reached;
  manifest["config"] = json::parse(canonical_json(config));
  manifest["opt_step"] = opt_step;
  manifest["model"] = structure_json(model);

  json dir = json::array();
  std::int64_t offset = 0;
  for (const auto& [name, t] : entries) {
    dir.push_back({{"name", name},
                   {"shape", t->shape()},
                   {"dtype", "f32"},
                   {"offset", offset}});
    offset += t->numel() * static_cast<std::int64_t>(sizeof(float));
  }
  manifest["tensors"] = dir;

  std::string mstr = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("save_checkpoint: cannot open " + path);
  out.write(kMagic, sizeof(kMagic));
  std::uint64_t mlen = mstr.size();
  out.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
  out.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
  for (const auto& [name, t] : entries) write_f32(out, *t);
  if (!out) throw CheckpointError("save_checkpoint: write failed: " + path);
}

void save_checkpoint(const std::string& path, const Model& model,
                     const RunConfig& config, int task_reached,
                     const AdamW& opt) {
  save_checkpoint(path, model, config, task_reached, opt.state_tensors(),
                  opt.step_count());
}

void save_checkpoint(const std::string& path, const LoadedCheckpoint& ckpt) {
  std::vector<std::pair<std::string, const Tensor*>> opt_view;
  for (const auto& [name, t] : ckpt.opt.tensors) {
    opt_view.emplace_back(name, &t);
  }
  save_checkpoint(path, ckpt.model, ckpt.config, ckpt.task_reached, opt_view,
                  ckpt.opt.step_count);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw CheckpointError("load_checkpoint: cannot open " + path);
  std::int64_t file_size = static_cast<std::int64_t>(in.tellg());
  in.seekg(0);

  char magic[8];
  std::uint64_t mlen = 0;
  if (file_size < static_cast<std::int64_t>(sizeof(magic) + sizeof(mlen))) {
    throw CheckpointError("load_checkpoint: truncated header");
  }
  in.read(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw CheckpointError("load_checkpoint: bad magic");
  }
  in.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  if (static_cast<std::int64_t>(sizeof(magic) + sizeof(mlen) + mlen) >
      file_size) {
    throw CheckpointError("load_checkpoint: truncated manifest");
  }
  std::string mstr(mlen, '\0');
  in.read(mstr.data(), static_cast<std::streamsize>(mlen));

  json manifest;
  try {
    manifest = json::parse(mstr);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("load_checkpoint: corrupt manifest: ") +
                          e.what());
  }

  int version = manifest.value("format_version", -1);
  if (version != kCheckpointFormatVersion) {
    throw CheckpointVersionError(
        "load_checkpoint: unsupported format_version " +
        std::to_string(version));
  }

  LoadedCheckpoint ckpt;
  try {
    ckpt.cfg_hash = manifest.at("config_hash").get<std::string>();
    ckpt.task_reached = manifest.at("task_reached").get<int>();
    ckpt.opt.step_count = manifest.at("opt_step").get<int>();
    ckpt.config = parse_run_config(manifest.at("config").dump());

    const json& model_j = manifest.at("model");
    Model m = make_model_skeleton(ckpt.config.backbone, ckpt.config.moe);
    m.current_task = model_j.at("current_task").get<int>();
    m.base_frozen = model_j.at("base_frozen").get<bool>();
    for (const json& hj : model_j.at("heads")) {
      int task = hj.at("task").get<int>();
      int n_classes = hj.at("n_classes").get<int>();
      m.heads[task] = Tensor({n_classes, m.cfg.d_model});
    }
    auto sites = moe_sites(m);
    const json& sites_j = model_j.at("sites");
    if (sites_j.size() != sites.size()) {
      throw CheckpointError("load_checkpoint: site count mismatch");
    }
    for (size_t s = 0; s < sites.size(); ++s) {
      const json& sj = sites_j[s];
      if (sj.at("name").get<std::string>() != sites[s].first) {
        throw CheckpointError("load_checkpoint: site name mismatch");
      }
      ExpertRegistry& reg = sites[s].second->registry;
      for (const json& gj : sj.at("groups")) {
        TaskGroup g;
        g.task = gj.at("task").get<int>();
        g.begin = gj.at("begin").get<int>();
        g.end = gj.at("end").get<int>();
        reg.router_blocks.push_back(Tensor({g.end - g.begin, reg.d_in}));
        reg.router_block_frozen.push_back(g.task < m.current_task);
        reg.groups.push_back(g);
      }
      for (const json& ej : sj.at("experts")) {
        LoraExpert e;
        e.rank = ej.at("rank").get<int>();
        e.owner_task = ej.at("owner_task").get<int>();
        e.frozen = ej.at("frozen").get<bool>();
        e.down = Tensor({e.rank, reg.d_in});
        e.up = Tensor({reg.d_out, e.rank});
        reg.experts.push_back(std::move(e));
      }
    }
    ckpt.model = std::move(m);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("load_checkpoint: corrupt manifest: ") +
                          e.what());
  }

  // Tensor directory: model parameters first (matched by name against the
  // reconstructed structure), then raw optimizer state.
  std::map<std::string, std::pair<std::vector<std::int64_t>, std::int64_t>> dir;
  std::vector<std::pair<std::string, std::pair<std::vector<std::int64_t>,
                                               std::int64_t>>> dir_order;
  try {
    for (const json& tj : manifest.at("tensors")) {
      std::string name = tj.at("name").get<std::string>();
      auto shape = tj.at("shape").get<std::vector<std::int64_t>>();
      auto offset = tj.at("offset").get<std::int64_t>();
      if (tj.at("dtype").get<std::string>() != "f32") {
        throw CheckpointError("load_checkpoint: unsupported dtype");
      }
      dir[name] = {shape, offset};
      dir_order.emplace_back(name, std::make_pair(shape, offset));
    }
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("load_checkpoint: corrupt manifest: ") +
                          e.what());
  }

  std::int64_t payload_base =
      static_cast<std::int64_t>(sizeof(magic) + sizeof(mlen) + mlen);
  auto read_tensor = [&](const std::string& name, Tensor& t) {
    auto it = dir.find(name);
    if (it == dir.end()) {
      throw CheckpointError("load_checkpoint: missing tensor " + name);
    }
    if (it->second.first != t.shape()) {
      throw CheckpointError("load_checkpoint: shape mismatch for " + name);
    }
    std::int64_t nbytes = t.numel() * static_cast<std::int64_t>(sizeof(float));
    if (payload_base + it->second.second + nbytes > file_size) {
      throw CheckpointError("load_checkpoint: truncated payload for " + name);
    }
    in.seekg(payload_base + it->second.second);
    std::vector<float> buf(static_cast<size_t>(t.numel()));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw CheckpointError("load_checkpoint: read failed for " + name);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      t.at(i) = static_cast<double>(buf[static_cast<size_t>(i)]);
    }
  };

  std::map<std::string, bool> consumed;
  for (ParamRef& pr : model_parameters(ckpt.model)) {
    read_tensor(pr.name, *pr.tensor);
    consumed[pr.name] = true;
  }
  for (const auto& [name, meta] : dir_order) {
    if (consumed.count(name)) continue;
    Tensor t(meta.first);
    read_tensor(name, t);
    ckpt.opt.tensors.emplace_back(name, std::move(t));
  }
  return ckpt;
}

}  // namespace dymoe
