// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "d2etr/tape.hpp"

namespace d2etr::ad {

/// Scalar objective of a flat parameter vector. When `grad` is non-empty the
/// objective must also write its analytic gradient there.
using Objective = std::function<double(std::span<const double> theta, std::span<double> grad)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// Requires h in [1e-7, 1e-4]; throws NumericError if f is non-finite.
double finite_diff_check(const Objective& f, std::span<const double> theta, double h);

/// Convenience wrapper: builds a fresh tape, feeds `theta` as one variable
/// and differentiates `build(tape, theta_var)`.
double finite_diff_check(const std::function<Var(Tape&, Var)>& build, const Tensor& theta,
                         double h = 1e-6);

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
};

/// Model-level objective: evaluates the loss at the current parameter values.
/// When `with_grad` is set, it must also leave the analytic gradient in each
/// Parameter::grad (zeroed beforehand by the checker).
using ModelObjective = std::function<double(bool with_grad)>;

/// Compares analytic parameter gradients against central differences on up to
/// `coords_per_param` randomly chosen coordinates of every parameter.
std::vector<ParamCheck> check_parameters(ParameterStore& params, const ModelObjective& f, double h,
                                         int coords_per_param, std::uint64_t seed);

}  // namespace d2etr::ad
