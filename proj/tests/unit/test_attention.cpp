// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "d2etr/attention.hpp"
#include "d2etr/grad_check.hpp"
#include "d2etr/ops.hpp"
#include "test_util.hpp"

namespace d2etr {
namespace {

using ad::Var;
using testing::random_tensor;

Tensor identity(int n) {
  Tensor t({n, n}, 0.0);
  for (int i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

attn::AttentionWeights identity_weights(ad::Tape& t, int c) {
  attn::AttentionWeights w;
  w.wq = t.constant(identity(c));
  w.wk = t.constant(identity(c));
  w.wv = t.constant(identity(c));
  w.wo = t.constant(identity(c));
  return w;
}

TEST(Attention, SingleKeyReturnsProjectedValue) {
  ad::Tape t;
  const Tensor v = random_tensor({1, 4}, 1);
  attn::AttentionWeights w = identity_weights(t, 4);
  w.wv = t.constant(random_tensor({4, 4}, 2));
  Var q = t.constant(random_tensor({3, 4}, 3));
  Var out = attn::multi_head_attention(q, t.constant(random_tensor({1, 4}, 4)), t.constant(v), w, {4, 2});
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 4; ++c) {
      double e = 0;
      for (int k = 0; k < 4; ++k) e += v[k] * w.wv.value().at(k, c);
      EXPECT_NEAR(out.value().at(i, c), e, 1e-12);
    }
}

TEST(Attention, ZeroQueryAttendsUniformly) {
  ad::Tape t;
  const Tensor v = random_tensor({5, 2}, 5);
  attn::AttentionTrace trace;
  Var out = attn::multi_head_attention(t.constant(Tensor({1, 2}, 0.0)), t.constant(random_tensor({5, 2}, 6)),
                                       t.constant(v), identity_weights(t, 2), {2, 1}, &trace);
  for (int c = 0; c < 2; ++c) {
    double mean = 0;
    for (int k = 0; k < 5; ++k) mean += v.at(k, c) / 5;
    EXPECT_NEAR(out.value().at(0, c), mean, 1e-12);
  }
  ASSERT_EQ(trace.heads.size(), 1u);
  for (double a : trace.heads[0].data()) EXPECT_NEAR(a, 0.2, 1e-15);
}

TEST(Attention, ScaledDotProductOracle) {
  // One head, two keys: weights softmax(q.k / sqrt(2)).
  ad::Tape t;
  const Tensor q({1, 2}, {1.0, 2.0}), k({2, 2}, {1.0, 0.0, 0.0, 1.0}), v({2, 2}, {10.0, 0.0, 0.0, 10.0});
  attn::AttentionTrace trace;
  Var out = attn::multi_head_attention(t.constant(q), t.constant(k), t.constant(v), identity_weights(t, 2), {2, 1},
                                       &trace);
  const double s1 = 1.0 / std::sqrt(2.0), s2 = 2.0 / std::sqrt(2.0);
  const double a1 = std::exp(s1) / (std::exp(s1) + std::exp(s2));
  EXPECT_NEAR(trace.heads[0].at(0, 0), a1, 1e-14);
  EXPECT_NEAR(out.value().at(0, 0), 10 * a1, 1e-12);
  EXPECT_NEAR(out.value().at(0, 1), 10 * (1 - a1), 1e-12);
}

TEST(Attention, RowsOfEveryHeadSumToOne) {
  ad::Tape t;
  attn::AttentionWeights w;
  w.wq = t.constant(random_tensor({8, 8}, 7));
  w.wk = t.constant(random_tensor({8, 8}, 8));
  w.wv = t.constant(random_tensor({8, 8}, 9));
  w.wo = t.constant(random_tensor({8, 8}, 10));
  attn::AttentionTrace trace;
  attn::multi_head_attention(t.constant(random_tensor({6, 8}, 11)), t.constant(random_tensor({9, 8}, 12)),
                             t.constant(random_tensor({9, 8}, 13)), w, {8, 4}, &trace);
  ASSERT_EQ(trace.heads.size(), 4u);
  for (const Tensor& h : trace.heads)
    for (int i = 0; i < 6; ++i) {
      double s = 0;
      for (int j = 0; j < 9; ++j) s += h.at(i, j);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  const Tensor m = trace.mean_over_heads();
  EXPECT_EQ(m.shape(), (Shape{6, 9}));
}

TEST(Attention, InvariantToJointKeyValuePermutation) {
  const Tensor q = random_tensor({3, 4}, 20), k = random_tensor({5, 4}, 21), v = random_tensor({5, 4}, 22);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  ad::Tape t;
  attn::AttentionWeights w;
  w.wq = t.constant(random_tensor({4, 4}, 23));
  w.wk = t.constant(random_tensor({4, 4}, 24));
  w.wv = t.constant(random_tensor({4, 4}, 25));
  w.wo = t.constant(random_tensor({4, 4}, 26));
  Var a = attn::multi_head_attention(t.constant(q), t.constant(k), t.constant(v), w, {4, 2});
  Var b = attn::multi_head_attention(t.constant(q), ad::gather_rows(t.constant(k), perm),
                                     ad::gather_rows(t.constant(v), perm), w, {4, 2});
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.value()[i], b.value()[i], 1e-12);
}

TEST(Attention, RejectsEmptyKeysAndBadHeads) {
  EXPECT_THROW((attn::AttentionConfig{6, 4}.validate()), ConfigError);
  EXPECT_THROW((attn::AttentionConfig{0, 1}.validate()), ConfigError);
  ad::Tape t;
  EXPECT_THROW(attn::multi_head_attention(t.constant(Tensor({1, 2})), t.constant(Tensor({2, 3})),
                                          t.constant(Tensor({2, 3})), identity_weights(t, 2), {2, 1}),
               ShapeError);
}

TEST(Attention, ConvolutionalFfnRequiresGrid) {
  ad::Tape t;
  attn::FfnWeights w;
  w.w1 = t.constant(random_tensor({2, 4}, 1));
  w.w2 = t.constant(random_tensor({4, 2}, 2));
  w.dw_kernel = t.constant(random_tensor({4, 3, 3}, 3));
  EXPECT_THROW(attn::feed_forward(t.constant(random_tensor({4, 2}, 4)), w, nullptr), ConfigError);
  const attn::Grid g{2, 2};
  EXPECT_EQ(attn::feed_forward(t.constant(random_tensor({4, 2}, 4)), w, &g).shape(), (Shape{4, 2}));
}

FeatureMap random_map(ad::Tape& t, int h, int w, int c, int stride, std::uint64_t seed) {
  FeatureMap m;
  m.tokens = t.constant(random_tensor({h * w, c}, seed));
  m.h = h;
  m.w = w;
  m.stride = stride;
  return m;
}

TEST(Attention, SpatialReductionStacksPooledScales) {
  ad::ParameterStore store;
  nn::Init init(1);
  attn::TransformerBlock block(store, "b", 8, 2, 2, 3, 2, 1e-6, init);
  ad::Tape t;
  const attn::BlockWeights w = block.bind(t);
  std::vector<FeatureMap> keys{random_map(t, 8, 8, 8, 4, 1), random_map(t, 4, 4, 8, 8, 2), random_map(t, 1, 1, 8, 16, 3)};
  Var r = attn::spatial_reduce(keys, w.sr, 2, 1e-6);
  EXPECT_EQ(r.shape(), (Shape{3 * 4, 8}));
  keys.pop_back();
  EXPECT_THROW(attn::spatial_reduce(keys, w.sr, 2, 1e-6), ConfigError);
}

TEST(Attention, FusingLayerKeepsQueryGeometry) {
  ad::ParameterStore store;
  nn::Init init(2);
  attn::TransformerBlock block(store, "f", 8, 1, 2, 3, 3, 1e-6, init);
  ad::Tape t;
  const FeatureMap x = random_map(t, 2, 2, 8, 16, 4);
  const std::vector<FeatureMap> prev{random_map(t, 8, 8, 8, 4, 5), random_map(t, 4, 4, 8, 8, 6)};
  attn::AttentionTrace trace;
  const FeatureMap y = block.forward(x, prev, &trace);
  EXPECT_EQ(y.tokens.shape(), (Shape{4, 8}));
  EXPECT_EQ(y.h, 2);
  EXPECT_EQ(y.stride, 16);
  // Keys: pooled predecessors then own scale, 3 x 9 tokens.
  EXPECT_EQ(trace.heads.at(0).shape(), (Shape{4, 27}));
}

TEST(Attention, FusingLayerReadsEveryPredecessor) {
  ad::ParameterStore store;
  nn::Init init(3);
  attn::TransformerBlock block(store, "f", 4, 1, 2, 3, 2, 1e-6, init);
  ad::Tape t;
  const FeatureMap x = random_map(t, 2, 2, 4, 16, 7);
  FeatureMap p1 = random_map(t, 4, 4, 4, 4, 8), p2 = random_map(t, 3, 3, 4, 8, 9);
  Var g1 = t.variable(Tensor({16, 4}, 0.0)), g2 = t.variable(Tensor({9, 4}, 0.0));
  // Route predecessor tokens through additive zero leaves that receive gradients.
  p1.tokens = ad::add(p1.tokens, g1);
  p2.tokens = ad::add(p2.tokens, g2);
  const FeatureMap y = block.forward(x, {p1, p2});
  t.backward(ad::sum(ad::square(y.tokens)));
  double n1 = 0, n2 = 0;
  for (double v : t.grad(g1).data()) n1 += std::abs(v);
  for (double v : t.grad(g2).data()) n2 += std::abs(v);
  EXPECT_GT(n1, 0.0);
  EXPECT_GT(n2, 0.0);
}

TEST(Attention, BlockParameterGradients) {
  ad::ParameterStore store;
  nn::Init init(4);
  attn::TransformerBlock block(store, "f", 4, 2, 2, 2, 2, 1e-6, init);
  for (auto& p : store) {
    // Non-trivial norms and biases so every path carries signal.
    for (std::size_t i = 0; i < p.value.numel(); ++i) p.value[i] += 0.1 * std::sin(static_cast<double>(i) + 1.0);
  }
  const Tensor xv = random_tensor({6, 4}, 30), pv = random_tensor({16, 4}, 31), wv = random_tensor({6, 4}, 32);
  auto f = [&](bool with_grad) {
    ad::Tape t;
    FeatureMap x{t.constant(xv), 2, 3, 8, 2};
    FeatureMap p{t.constant(pv), 4, 4, 4, 1};
    Var loss = ad::sum(ad::mul(block.forward(x, {p}).tokens, t.constant(wv)));
    if (with_grad) {
      t.backward(loss);
      t.accumulate_param_grads();
    }
    return loss.value()[0];
  };
  for (const auto& c : ad::check_parameters(store, f, 1e-6, 4, 7)) EXPECT_LT(c.max_rel_error, 1e-6) << c.name;
}

}  // namespace
}  // namespace d2etr
