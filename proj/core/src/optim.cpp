// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/optim.hpp"

#include <cmath>

namespace d2etr::optim {

void AdamWConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("train.lr must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta1/beta2 must lie in [0,1)");
  if (!(eps > 0)) throw ConfigError("train.eps must be positive");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be nonnegative");
}

AdamW::AdamW(ad::ParameterStore& params, AdamWConfig cfg) : params_(params), cfg_(cfg) {
  cfg_.validate();
  for (const ad::Parameter& p : params_) {
    m_.emplace_back(p.value.shape(), 0.0);
    v_.emplace_back(p.value.shape(), 0.0);
  }
}

bool AdamW::step() {
  for (const ad::Parameter& p : params_) {
    if (p.grad.numel() != p.value.numel() || !p.grad.all_finite()) return false;
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::size_t k = 0;
  for (ad::Parameter& p : params_) {
    double* m = m_[k].ptr();
    double* v = v_[k].ptr();
    double* theta = p.value.ptr();
    const double* g = p.grad.ptr();
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      theta[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * theta[i]);
    }
    ++k;
  }
  return true;
}

double clip_grad_norm(ad::ParameterStore& params, double max_norm) {
  double sq = 0.0;
  for (const ad::Parameter& p : params)
    for (double g : p.grad.data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm && std::isfinite(norm)) {
    const double s = max_norm / norm;
    for (ad::Parameter& p : params)
      for (double& g : p.grad.data()) g *= s;
  }
  return norm;
}

}  // namespace d2etr::optim
