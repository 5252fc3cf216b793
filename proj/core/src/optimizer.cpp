// SPDX-License-Identifier: Apache-2.0
#include "dymoe/optimizer.hpp"

#include <cmath>

namespace dymoe {

void AdamW::step(const std::vector<Update>& updates, double lr_scale) {
  ++t_;
  double clip_scale = 1.0;
  if (cfg_.grad_clip > 0) {
    double sq = 0.0;
    for (const Update& u : updates) {
      for (std::int64_t i = 0; i < u.grad->numel(); ++i) {
        sq += u.grad->at(i) * u.grad->at(i);
      }
    }
    double norm = std::sqrt(sq);
    if (norm > cfg_.grad_clip) clip_scale = cfg_.grad_clip / norm;
  }

  double lr = cfg_.lr * lr_scale;
  double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
  double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
  for (const Update& u : updates) {
    auto it = slots_.find(u.name);
    if (it == slots_.end()) {
      it = slots_
               .emplace(u.name, Slot{Tensor::zeros(u.param->shape()),
                                     Tensor::zeros(u.param->shape())})
               .first;
    }
    Slot& s = it->second;
    double decay = u.decay >= 0.0 ? u.decay : cfg_.weight_decay;
    for (std::int64_t i = 0; i < u.grad->numel(); ++i) {
      double g = u.grad->at(i) * clip_scale;
      s.m.at(i) = cfg_.beta1 * s.m.at(i) + (1.0 - cfg_.beta1) * g;
      s.v.at(i) = cfg_.beta2 * s.v.at(i) + (1.0 - cfg_.beta2) * g * g;
      double mhat = s.m.at(i) / bc1;
      double vhat = s.v.at(i) / bc2;
      double x = u.param->at(i);
      x -= lr * decay * x;  // decoupled decay
      x -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      u.param->at(i) = x;
    }
  }
}

std::vector<std::pair<std::string, const Tensor*>> AdamW::state_tensors()
    const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (const auto& [name, slot] : slots_) {
    out.emplace_back("opt." + name + ".m", &slot.m);
    out.emplace_back("opt." + name + ".v", &slot.v);
  }
  return out;
}

}  // namespace dymoe
