// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "d2etr/tape.hpp"

namespace d2etr::optim {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  void validate() const;
};

/// Decoupled weight decay Adam:
/// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
class AdamW {
 public:
  AdamW(ad::ParameterStore& params, AdamWConfig cfg);

  /// Applies one update from Parameter::grad. Returns false and leaves
  /// everything untouched when any gradient is non-finite.
  bool step();
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  long steps() const { return t_; }

 private:
  ad::ParameterStore& params_;
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping. max_norm <= 0 disables clipping.
double clip_grad_norm(ad::ParameterStore& params, double max_norm);

}  // namespace d2etr::optim
