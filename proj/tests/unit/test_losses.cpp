// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include "d2etr/grad_check.hpp"
#include "d2etr/losses.hpp"
#include "d2etr/ops.hpp"
#include "test_util.hpp"

namespace d2etr {
namespace {

using ad::Var;
using testing::random_tensor;

double brute_force_min(const Tensor& cost) {
  const int n = cost.dim(0), b = cost.dim(1);
  std::vector<int> q(n);
  std::iota(q.begin(), q.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  // Every ordered choice of b distinct queries appears as a prefix of some permutation.
  do {
    double s = 0;
    for (int t = 0; t < b; ++t) s += cost.at(q[t], t);
    best = std::min(best, s);
  } while (std::next_permutation(q.begin(), q.end()));
  return best;
}

TEST(Box, IouAndGiouOracles) {
  const Corners a{0, 0, 2, 2}, b{1, 1, 3, 3};
  EXPECT_NEAR(iou(a, b), 1.0 / 7.0, 1e-15);
  EXPECT_NEAR(giou(a, b), 1.0 / 7.0 - 2.0 / 9.0, 1e-15);
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(giou(a, a), 1.0);
  const Corners far{100, 100, 101, 101};
  EXPECT_DOUBLE_EQ(iou(a, far), 0.0);
  EXPECT_LT(giou(a, far), -0.99);
  EXPECT_GE(giou(a, far), -1.0);
  const BBox c{0.5, 0.5, 0.2, 0.4};
  EXPECT_NEAR(BBox::from_corners(c.corners()).w, 0.2, 1e-15);
}

TEST(Hungarian, MatchesBruteForceOnRandomCosts) {
  std::mt19937_64 rng(17);
  for (int seed = 0; seed < 100; ++seed) {
    const int n = 1 + static_cast<int>(rng() % 6);
    const int b = 1 + static_cast<int>(rng() % n);
    Tensor cost = random_tensor({n, b}, 1000 + seed, -2.0, 3.0);
    if (seed % 5 == 0)
      for (double& v : cost.data()) v = std::round(v);  // ties
    const MatchAssignment m = hungarian_match(cost);
    ASSERT_EQ(m.pairs.size(), static_cast<std::size_t>(b));
    std::vector<int> used;
    for (int t = 0; t < b; ++t) {
      EXPECT_EQ(m.pairs[t].second, t);
      used.push_back(m.pairs[t].first);
    }
    std::sort(used.begin(), used.end());
    EXPECT_EQ(std::adjacent_find(used.begin(), used.end()), used.end());
    EXPECT_NEAR(assignment_cost(cost, m), brute_force_min(cost), 1e-12) << "seed " << seed;
  }
}

TEST(Hungarian, InvariantToPerTargetConstants) {
  const Tensor cost = random_tensor({6, 4}, 5);
  Tensor shifted = cost;
  for (int q = 0; q < 6; ++q)
    for (int t = 0; t < 4; ++t) shifted.at(q, t) += 10.0 * (t + 1);
  EXPECT_EQ(hungarian_match(cost).pairs, hungarian_match(shifted).pairs);
}

TEST(Hungarian, QueryViewAndErrors) {
  const MatchAssignment m = hungarian_match(Tensor({3, 1}, {5.0, 1.0, 3.0}));
  EXPECT_EQ(m.target_of_query(), (std::vector<int>{-1, 0, -1}));
  EXPECT_THROW(hungarian_match(Tensor({1, 2}, {0.0, 0.0})), ConfigError);
  EXPECT_THROW(hungarian_match(Tensor({2, 1}, {0.0, std::numeric_limits<double>::quiet_NaN()})), NumericError);
}

TEST(Losses, FocalScalarOracle) {
  EXPECT_NEAR(focal_loss(0.6, 1.0), 0.25 * 0.16 * -std::log(0.6), 1e-15);
  EXPECT_NEAR(focal_loss(0.3, 0.0), 0.25 * 0.09 * -std::log(0.7), 1e-15);
  EXPECT_DOUBLE_EQ(focal_loss(0.5, 0.5), 0.0);
  EXPECT_GT(focal_loss(0.0, 1.0), 0.0);
  EXPECT_TRUE(std::isfinite(focal_loss(0.0, 1.0)));
}

double logit(double p) { return std::log(p / (1 - p)); }

// Two queries, two classes, built directly from constants.
LayerPrediction manual_prediction(ad::Tape& t, const Tensor& probs, const Tensor& boxes, double iou_logit) {
  Tensor logits = probs;
  for (double& v : logits.data()) v = logit(v);
  LayerPrediction p;
  p.class_logits = t.variable(logits);
  p.boxes = t.variable(boxes);
  p.iou_logits = t.variable(Tensor({probs.dim(0), 1}, iou_logit));
  p.ctr_logits = t.variable(Tensor({probs.dim(0), 1}, iou_logit));
  p.hidden = p.class_logits;
  return p;
}

TEST(Losses, MatchingCostOracle) {
  const Tensor probs({2, 2}, {0.2, 0.7, 0.6, 0.1});
  const Tensor boxes({2, 4}, {0.5, 0.5, 0.2, 0.2, 0.3, 0.3, 0.1, 0.1});
  ImageTargets tg;
  tg.boxes = {{0.5, 0.5, 0.2, 0.2}};
  tg.labels = {1};
  const Tensor c = matching_cost(probs, boxes, tg, {});
  EXPECT_NEAR(c.at(0, 0), -2.0 * 0.7, 1e-15);
  const BBox p1{0.3, 0.3, 0.1, 0.1};
  EXPECT_NEAR(c.at(1, 0), -2.0 * 0.1 + 5.0 * 0.6 + 2.0 * (1 - giou(p1, tg.boxes[0])), 1e-14);
  EXPECT_EQ(matching_cost(probs, boxes, ImageTargets{}, {}).rank(), 0);
}

TEST(Losses, ClassAndBoxOracle) {
  ad::Tape t;
  const Tensor probs({2, 2}, {0.2, 0.7, 0.6, 0.1});
  const Tensor boxes({2, 4}, {0.5, 0.5, 0.2, 0.2, 0.3, 0.3, 0.1, 0.1});
  const LayerPrediction p = manual_prediction(t, probs, boxes, 0.0);
  ImageTargets tg;
  tg.boxes = {{0.5, 0.5, 0.2, 0.2}, {0.3, 0.35, 0.1, 0.1}};
  tg.labels = {1, 0};
  MatchAssignment m;
  m.pairs = {{0, 0}, {1, 1}};
  m.num_queries = 2;
  const ClsBoxLoss l = loss_cls_bbox(p, tg, m, {});
  const double focal = focal_loss(0.2, 0) + focal_loss(0.7, 1) + focal_loss(0.6, 1) + focal_loss(0.1, 0);
  EXPECT_NEAR(l.cls.value()[0], focal / 2, 1e-12);
  const BBox p1{0.3, 0.3, 0.1, 0.1};
  const double bbox = (5.0 * 0.05 + 2.0 * (1 - giou(p1, tg.boxes[1]))) / 2;
  EXPECT_NEAR(l.bbox.value()[0], bbox, 1e-12);
}

TEST(Losses, EmptyTargetsGiveBackgroundOnlyLoss) {
  ad::Tape t;
  const Tensor probs({2, 2}, {0.2, 0.7, 0.6, 0.1});
  const LayerPrediction p = manual_prediction(t, probs, Tensor({2, 4}, 0.3), 0.0);
  MatchAssignment m;
  m.num_queries = 2;
  const ClsBoxLoss l = loss_cls_bbox(p, ImageTargets{}, m, {});
  const double focal = focal_loss(0.2, 0) + focal_loss(0.7, 0) + focal_loss(0.6, 0) + focal_loss(0.1, 0);
  EXPECT_NEAR(l.cls.value()[0], focal, 1e-12);
  EXPECT_DOUBLE_EQ(l.bbox.value()[0], 0.0);
  LayerTargets lt;
  lt.match = m;
  EXPECT_DOUBLE_EQ(loss_aware(p, lt, true).value()[0], 0.0);
}

TEST(Losses, AwarenessAtZeroLogitIsLn2PerBranch) {
  ad::Tape t;
  const LayerPrediction p = manual_prediction(t, Tensor({3, 2}, 0.5), Tensor({3, 4}, 0.3), 0.0);
  LayerTargets lt;
  lt.match.pairs = {{2, 0}, {0, 1}};
  lt.match.num_queries = 3;
  lt.iou = {0.3, 0.9};
  lt.ctr = {0.1, 0.0};
  EXPECT_NEAR(loss_aware(p, lt, false).value()[0], std::numbers::ln2, 1e-15);
  EXPECT_NEAR(loss_aware(p, lt, true).value()[0], 2 * std::numbers::ln2, 1e-15);
}

TEST(Losses, TokenLabelsResizeMasks) {
  Tensor masks({2, 4, 4}, 0.0);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) masks.at(0, i, j) = 1.0;
  masks.at(1, 0, 0) = masks.at(1, 0, 1) = masks.at(1, 1, 0) = masks.at(1, 1, 1) = 1.0;
  const Tensor l = token_labels(masks, 2, 2);
  ASSERT_EQ(l.shape(), (Shape{4, 2}));
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(l.at(i, 0), 1.0);
  EXPECT_DOUBLE_EQ(l.at(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(l.at(3, 1), 0.0);
}

TEST(Losses, TokenLossSumsFocalOverScales) {
  ad::Tape t;
  Tensor masks({2, 4, 4}, 0.0);
  masks.at(1, 2, 3) = 1.0;
  ImageTargets tg;
  tg.boxes = {{0.8, 0.6, 0.2, 0.2}, {0.2, 0.2, 0.1, 0.1}};
  tg.labels = {1, 1};
  tg.masks = masks;
  const Tensor z0 = random_tensor({16, 2}, 1), z1 = random_tensor({4, 2}, 2);
  const Var loss = loss_token({t.constant(z0), t.constant(z1)}, {{4, 4}, {2, 2}}, tg);
  double expect = 0;
  const Tensor l0 = token_labels(masks, 4, 4), l1 = token_labels(masks, 2, 2);
  for (std::size_t i = 0; i < z0.numel(); ++i) expect += focal_loss(ad::sigmoid_value(z0[i]), l0[i]);
  for (std::size_t i = 0; i < z1.numel(); ++i) expect += focal_loss(ad::sigmoid_value(z1[i]), l1[i]);
  EXPECT_NEAR(loss.value()[0], expect / 2, 1e-12);
  EXPECT_THROW(loss_token({t.constant(z0)}, {{2, 2}}, tg), ShapeError);
  EXPECT_THROW(loss_token({t.constant(z0)}, {}, tg), ShapeError);
  ImageTargets no_masks = tg;
  no_masks.masks = Tensor();
  EXPECT_DOUBLE_EQ(loss_token({t.constant(z0)}, {{4, 4}}, no_masks).value()[0], 0.0);
}

struct Fixture {
  ad::ParameterStore store;
  nn::Init init{3};
  DecoderConfig cfg;
  std::unique_ptr<Decoder> dec;
  Tensor mem = random_tensor({4, 8}, 40);
  Tensor token = random_tensor({4, 2}, 41);
  ImageTargets targets;

  Fixture() {
    cfg.layers = 2;
    cfg.queries = 4;
    cfg.channels = 8;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    dec = std::make_unique<Decoder>(store, cfg, 1, init);
    targets.boxes = {{0.3, 0.4, 0.2, 0.3}, {0.7, 0.6, 0.3, 0.2}};
    targets.labels = {0, 1};
    targets.masks = Tensor({2, 4, 4}, 0.0);
    targets.masks.at(0, 1, 1) = targets.masks.at(1, 2, 2) = 1.0;
  }

  LossTerms run(ad::Tape& t, FrozenTargets& frozen, const LossOptions& opt, DecoderOutput* keep = nullptr) {
    const DecoderOutput out = dec->forward({{t.constant(mem), 2, 2, 8, 2}}, t);
    if (frozen.layers.empty()) frozen = freeze_targets(out, targets, opt.match);
    if (keep) *keep = out;
    return total_loss(out, {t.constant(token)}, {{2, 2}}, targets, frozen, opt);
  }
};

TEST(Losses, TermsAreAdditiveAndWeighted) {
  Fixture fx;
  ad::Tape t;
  FrozenTargets frozen;
  LossOptions opt;
  opt.centerness = true;
  DecoderOutput out;
  const LossTerms l = fx.run(t, frozen, opt, &out);
  const double sum = l.cls.value()[0] + l.bbox.value()[0] + l.awr.value()[0] + l.token.value()[0];
  EXPECT_NEAR(l.total.value()[0], sum, 1e-12);
  // Per-layer pieces recomputed from the public helpers.
  double cls = 0, awr = 0;
  for (int i = 0; i < 2; ++i) {
    cls += loss_cls_bbox(out.layers[i], fx.targets, frozen.layers[i].match, opt.weights).cls.value()[0];
    awr += loss_aware(out.layers[i], frozen.layers[i], true).value()[0];
  }
  EXPECT_NEAR(l.cls.value()[0], 2.0 * cls, 1e-12);
  EXPECT_NEAR(l.awr.value()[0], awr, 1e-12);
  ad::Tape t2;
  EXPECT_NEAR(l.token.value()[0], loss_token({t2.constant(fx.token)}, {{2, 2}}, fx.targets).value()[0], 1e-12);
}

TEST(Losses, ZeroTokenWeightRemovesOnlyTokenTerm) {
  Fixture fx;
  FrozenTargets frozen;
  LossOptions opt;
  ad::Tape t1, t2;
  const LossTerms a = fx.run(t1, frozen, opt);
  opt.weights.token = 0.0;
  const LossTerms b = fx.run(t2, frozen, opt);
  EXPECT_GT(a.token.value()[0], 0.0);
  EXPECT_DOUBLE_EQ(b.token.value()[0], 0.0);
  EXPECT_NEAR(a.total.value()[0] - b.total.value()[0], a.token.value()[0], 1e-12);
  opt.weights.token = -1.0;
  ad::Tape t3;
  EXPECT_THROW(fx.run(t3, frozen, opt), ConfigError);
}

TEST(Losses, FrozenTargetsAreOnePerLayer) {
  Fixture fx;
  FrozenTargets frozen;
  ad::Tape t;
  fx.run(t, frozen, {});
  ASSERT_EQ(frozen.layers.size(), 2u);
  for (const LayerTargets& lt : frozen.layers) {
    EXPECT_EQ(lt.match.pairs.size(), 2u);
    EXPECT_EQ(lt.iou.size(), 2u);
    for (double v : lt.iou) EXPECT_TRUE(v >= 0 && v <= 1);
  }
  FrozenTargets wrong;
  wrong.layers.resize(1);
  ad::Tape t2;
  EXPECT_THROW(fx.run(t2, wrong, {}), ConfigError);
}

TEST(Losses, TotalLossGradientMatchesFiniteDifferences) {
  Fixture fx;
  LossOptions opt;
  opt.centerness = true;
  FrozenTargets frozen;
  {
    ad::Tape t;
    fx.run(t, frozen, opt);
  }
  auto f = [&](bool with_grad) {
    ad::Tape t;
    const LossTerms l = fx.run(t, frozen, opt);
    if (with_grad) {
      t.backward(l.total);
      t.accumulate_param_grads();
    }
    return l.total.value()[0];
  };
  for (const auto& c : ad::check_parameters(fx.store, f, 1e-6, 3, 11)) EXPECT_LT(c.max_rel_error, 1e-5) << c.name;
}

}  // namespace
}  // namespace d2etr
