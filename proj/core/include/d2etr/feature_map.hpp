// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "d2etr/tape.hpp"

namespace d2etr {

/// One scale of a feature pyramid, held in token form [H*W, C].
struct FeatureMap {
  ad::Var tokens;
  int h = 0;
  int w = 0;
  int stride = 0;
  int scale = 0;  ///< 1-based stage index

  int channels() const { return tokens.dim(1); }
  int size() const { return h * w; }
  FeatureMap with_tokens(ad::Var t) const {
    FeatureMap m = *this;
    m.tokens = t;
    return m;
  }
};

/// Fused outputs x_1*..x_S*, strictly stride-ascending, all at one width.
using FeaturePyramid = std::vector<FeatureMap>;

}  // namespace d2etr
