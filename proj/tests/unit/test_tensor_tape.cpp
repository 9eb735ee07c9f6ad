// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "d2etr/grad_check.hpp"
#include "d2etr/ops.hpp"
#include "d2etr/tape.hpp"

namespace d2etr {
namespace {

TEST(Tensor, ShapeAndIndexing) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(-1), 3);
  t.at(1, 2) = 4.0;
  EXPECT_EQ(t[5], 4.0);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
  EXPECT_EQ(t.reshaped({3, 2}).dim(0), 3);
}

TEST(ParameterStore, RejectsDuplicateNames) {
  ad::ParameterStore s;
  s.add("w", Tensor({2}, 1.0));
  EXPECT_THROW(s.add("w", Tensor({2}, 1.0)), ConfigError);
  EXPECT_EQ(s.total_values(), 2u);
  EXPECT_EQ(s.find("missing"), nullptr);
}

TEST(Tape, BackwardThroughSharedSubexpression) {
  ad::Tape tape;
  ad::Var x = tape.variable(Tensor({1}, {3.0}));
  ad::Var y = ad::mul(x, x);           // x^2
  ad::Var z = ad::add(y, ad::mul(y, x));  // x^2 + x^3
  tape.backward(z);
  EXPECT_DOUBLE_EQ(tape.grad(x)[0], 2 * 3.0 + 3 * 9.0);
}

TEST(Tape, ParameterGradientsAccumulateAcrossTapes) {
  ad::ParameterStore s;
  ad::Parameter& w = s.add("w", Tensor({2}, {1.0, -2.0}));
  s.zero_grad();
  for (int k = 0; k < 2; ++k) {
    ad::Tape tape;
    ad::Var v = tape.param(w);
    EXPECT_EQ(tape.param(w).id, v.id);
    tape.backward(ad::sum(ad::square(v)));
    tape.accumulate_param_grads(0.5);
  }
  EXPECT_DOUBLE_EQ(w.grad[0], 2.0);
  EXPECT_DOUBLE_EQ(w.grad[1], -4.0);
}

TEST(Tape, NonScalarLossRejected) {
  ad::Tape tape;
  ad::Var x = tape.variable(Tensor({2}, 1.0));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Tape, NonFiniteForwardRaises) {
  ad::Tape tape;
  ad::Var x = tape.variable(Tensor({1}, {-1.0}));
  EXPECT_THROW(ad::log(x), NumericError);
}

TEST(Tape, UnreachedNodeHasZeroGradient) {
  ad::Tape tape;
  ad::Var a = tape.variable(Tensor({2}, 1.0));
  ad::Var b = tape.variable(Tensor({2}, 1.0));
  ad::Var l = ad::sum(a);
  tape.backward(l);
  EXPECT_EQ(tape.grad(b), Tensor({2}, 0.0));
}

TEST(Tape, BackwardVisitsEachNodeAtMostOnce) {
  ad::Tape tape;
  ad::Var x = tape.variable(Tensor({3}, 0.5));
  ad::Var y = x;
  for (int i = 0; i < 10; ++i) y = ad::add(y, x);
  tape.backward(ad::sum(y));
  EXPECT_LE(tape.backward_visits(), tape.size());
}

TEST(GradCheck, QuadraticIsExact) {
  const ad::Objective f = [](std::span<const double> th, std::span<double> g) {
    double v = 0;
    for (std::size_t i = 0; i < th.size(); ++i) {
      v += 0.5 * (i + 1) * th[i] * th[i];
      if (!g.empty()) g[i] = (i + 1) * th[i];
    }
    return v;
  };
  const std::vector<double> theta{0.3, -1.2, 2.0};
  EXPECT_LT(ad::finite_diff_check(f, theta, 1e-6), 1e-8);
}

TEST(GradCheck, DetectsWrongGradient) {
  const ad::Objective f = [](std::span<const double> th, std::span<double> g) {
    if (!g.empty()) g[0] = 3.0 * th[0];  // true derivative is 2x
    return th[0] * th[0];
  };
  const std::vector<double> theta{1.0};
  EXPECT_GT(ad::finite_diff_check(f, theta, 1e-6), 0.1);
}

TEST(GradCheck, StepSizeValidated) {
  const ad::Objective f = [](std::span<const double> th, std::span<double>) { return th[0]; };
  const std::vector<double> theta{1.0};
  EXPECT_THROW(ad::finite_diff_check(f, theta, 1e-3), ConfigError);
  EXPECT_THROW(ad::finite_diff_check(f, theta, 1e-9), ConfigError);
}

TEST(GradCheck, NonFiniteObjectiveRaises) {
  const ad::Objective f = [](std::span<const double>, std::span<double>) { return std::nan(""); };
  const std::vector<double> theta{1.0};
  EXPECT_THROW(ad::finite_diff_check(f, theta, 1e-6), NumericError);
}

TEST(GradCheck, ParameterCheckCoversEveryParameter) {
  ad::ParameterStore s;
  ad::Parameter& a = s.add("a", Tensor({3}, {0.1, 0.2, 0.3}));
  ad::Parameter& b = s.add("b", Tensor({2}, {1.0, -1.0}));
  const ad::ModelObjective f = [&](bool with_grad) {
    ad::Tape tape;
    ad::Var l = ad::add(ad::sum(ad::exp(tape.param(a))), ad::sum(ad::square(tape.param(b))));
    if (with_grad) {
      tape.backward(l);
      tape.accumulate_param_grads();
    }
    return l.value().item();
  };
  const auto checks = ad::check_parameters(s, f, 1e-6, 2, 0);
  ASSERT_EQ(checks.size(), 2u);
  for (const auto& c : checks) EXPECT_LT(c.max_rel_error, 1e-8) << c.name;
}

}  // namespace
}  // namespace d2etr
