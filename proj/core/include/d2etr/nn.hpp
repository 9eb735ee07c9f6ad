// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>

#include "d2etr/ops.hpp"
#include "d2etr/tape.hpp"

namespace d2etr::nn {

/// Seeded parameter initializer. Weights are orthogonal with gain 1, biases
/// zero and norm gains one.
class Init {
 public:
  explicit Init(std::uint64_t seed) : rng_(seed) {}

  /// Orthogonal matrix over the flattened [shape[0], rest] view.
  Tensor orthogonal(const Shape& shape, double gain = 1.0);
  Tensor normal(const Shape& shape, double stddev);
  Tensor uniform(const Shape& shape, double lo, double hi);

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

struct Linear {
  ad::Parameter* weight = nullptr;  // [in, out]
  ad::Parameter* bias = nullptr;    // [out] or null

  static Linear create(ad::ParameterStore& store, const std::string& name, int in, int out,
                       Init& init, bool with_bias = true);
  int in() const { return weight->value.dim(0); }
  int out() const { return weight->value.dim(1); }
  ad::Var operator()(ad::Var x) const;
};

struct LayerNorm {
  ad::Parameter* gamma = nullptr;
  ad::Parameter* beta = nullptr;
  double eps = 1e-6;

  static LayerNorm create(ad::ParameterStore& store, const std::string& name, int channels,
                          double eps);
  ad::Var operator()(ad::Var x) const;
};

/// Binds an optional parameter on `tape`; null yields an invalid Var.
inline ad::Var bind(ad::Tape& tape, ad::Parameter* p) {
  return p ? tape.param(*p) : ad::Var{};
}

}  // namespace d2etr::nn
