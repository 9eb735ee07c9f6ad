// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/hungarian.hpp"

#include <cmath>
#include <limits>

namespace d2etr {

std::vector<int> MatchAssignment::target_of_query() const {
  std::vector<int> out(num_queries, -1);
  for (const auto& [q, t] : pairs) out[q] = t;
  return out;
}

MatchAssignment hungarian_match(const Tensor& cost) {
  if (cost.rank() != 2) throw ShapeError("hungarian_match: cost must be [N, B], got " + to_string(cost.shape()));
  const int n = cost.dim(0);
  const int b = cost.dim(1);
  if (n < b) {
    throw ConfigError("hungarian_match: " + std::to_string(b) + " targets but only " + std::to_string(n) +
                      " queries");
  }
  if (!cost.all_finite()) throw NumericError("hungarian_match: non-finite cost");
  MatchAssignment m;
  m.num_queries = n;
  if (b == 0) return m;

  // Shortest augmenting paths with potentials; rows are targets, columns queries.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  auto c = [&](int target, int query) { return cost.at(query, target); };
  std::vector<double> u(b + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> owner(n + 1, 0), way(n + 1, 0);  // owner[col] = 1-based row
  for (int row = 1; row <= b; ++row) {
    owner[0] = row;
    int col0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[col0] = 1;
      const int r0 = owner[col0];
      double delta = kInf;
      int col1 = 0;
      for (int col = 1; col <= n; ++col) {
        if (used[col]) continue;
        const double cur = c(r0 - 1, col - 1) - u[r0] - v[col];
        if (cur < minv[col]) {
          minv[col] = cur;
          way[col] = col0;
        }
        if (minv[col] < delta) {
          delta = minv[col];
          col1 = col;
        }
      }
      for (int col = 0; col <= n; ++col) {
        if (used[col]) {
          u[owner[col]] += delta;
          v[col] -= delta;
        } else {
          minv[col] -= delta;
        }
      }
      col0 = col1;
    } while (owner[col0] != 0);
    do {
      const int col1 = way[col0];
      owner[col0] = owner[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  m.pairs.resize(b);
  for (int col = 1; col <= n; ++col) {
    if (owner[col] != 0) m.pairs[owner[col] - 1] = {col - 1, owner[col] - 1};
  }
  return m;
}

double assignment_cost(const Tensor& cost, const MatchAssignment& m) {
  double s = 0.0;
  for (const auto& [q, t] : m.pairs) s += cost.at(q, t);
  return s;
}

}  // namespace d2etr
