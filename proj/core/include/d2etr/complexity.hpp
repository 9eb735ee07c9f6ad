// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Closed-form attention cost formulas (dominant terms, no constants) and
// counted-versus-formula scaling reports for the fusing stages.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "d2etr/flops.hpp"

namespace d2etr::complexity {

enum class Formula {
  kEncoderSelfAttention,  ///< H^2 W^2 C + H W C^2
  kDecoderCrossAttention, ///< N H W C + N C^2
  kDenseFusion,           ///< (sum_{k<S} 4^k) h w S P^2 C
  kCeca,                  ///< S h w P^2 C
};

using Bindings = std::map<std::string, double>;

/// Evaluates a formula; throws ConfigError naming any missing or non-positive binding.
double eval_formula(Formula f, const Bindings& b);
Formula parse_formula(const std::string& name);
std::string formula_name(Formula f);

/// Runs `fn` with a fresh counter active and returns it.
flops::FlopCounter count_forward(const std::function<void()>& fn);

struct FusionShape {
  int h = 2;         ///< side of the query (coarsest) map
  int w = 2;
  int pool = 7;
  int channels = 32;
  int heads = 1;
  /// Side multiplier of predecessor k steps finer than the query: h * base^k.
  int predecessor_growth = 2;
};

/// Counted cost of the pooled-key attention of one fusing layer with S key
/// scales (S - 1 predecessors plus the query scale): the "attn" subtree
/// excluding pooling.
std::uint64_t counted_ceca(int scales, const FusionShape& shape);

struct ScalingReportRow {
  int S = 0;
  std::uint64_t counted_ceca = 0;
  double formula_ceca = 0;
  double formula_dense = 0;
  double ratio = 0;  ///< formula_dense / formula_ceca
};

/// One row per S in [s_min, s_max] (each within 1..6).
std::vector<ScalingReportRow> scaling_report(const FusionShape& shape, int s_min, int s_max);
void write_scaling_csv(std::ostream& os, const std::vector<ScalingReportRow>& rows);

/// Coefficient of determination of the least-squares line through (x, y).
double linear_r2(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace d2etr::complexity
