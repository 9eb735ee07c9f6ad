// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <utility>
#include <vector>

#include "d2etr/tensor.hpp"

namespace d2etr {

/// One (query, target) pair per target; every other query is background.
struct MatchAssignment {
  std::vector<std::pair<int, int>> pairs;  ///< sorted by target index
  int num_queries = 0;

  /// Target index per query, -1 for background.
  std::vector<int> target_of_query() const;
};

/// Minimum-cost injective assignment of the B targets (columns) of an
/// [N, B] cost matrix to queries (rows). Deterministic: among equal-cost
/// candidates the shortest augmenting path scan prefers lower query indices.
/// Throws ConfigError when N < B and NumericError on non-finite costs.
MatchAssignment hungarian_match(const Tensor& cost);

/// Total cost of an assignment.
double assignment_cost(const Tensor& cost, const MatchAssignment& m);

}  // namespace d2etr
