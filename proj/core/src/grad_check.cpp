// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace d2etr::ad {
namespace {

double checked(double v) {
  if (!std::isfinite(v)) throw NumericError("finite_diff_check: objective is not finite");
  return v;
}

double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

void check_step(double h) {
  if (!(h >= 1e-7 && h <= 1e-4)) throw ConfigError("finite_diff_check: h must lie in [1e-7, 1e-4]");
}

}  // namespace

double finite_diff_check(const Objective& f, std::span<const double> theta, double h) {
  check_step(h);
  std::vector<double> x(theta.begin(), theta.end());
  std::vector<double> analytic(x.size(), 0.0);
  checked(f(x, analytic));
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = checked(f(x, {}));
    x[i] = saved - h;
    const double down = checked(f(x, {}));
    x[i] = saved;
    worst = std::max(worst, rel_error(analytic[i], (up - down) / (2.0 * h)));
  }
  return worst;
}

double finite_diff_check(const std::function<Var(Tape&, Var)>& build, const Tensor& theta, double h) {
  const Shape shape = theta.shape();
  Objective f = [&](std::span<const double> x, std::span<double> grad) {
    Tape tape;
    Var v = tape.variable(Tensor(shape, std::vector<double>(x.begin(), x.end())));
    Var out = build(tape, v);
    if (!grad.empty()) {
      tape.backward(out);
      const Tensor g = tape.grad(v);
      std::copy(g.data().begin(), g.data().end(), grad.begin());
    }
    return out.value().item();
  };
  return finite_diff_check(f, theta.data(), h);
}

std::vector<ParamCheck> check_parameters(ParameterStore& params, const ModelObjective& f, double h,
                                         int coords_per_param, std::uint64_t seed) {
  check_step(h);
  params.zero_grad();
  checked(f(true));
  std::mt19937_64 rng(seed);
  std::vector<ParamCheck> out;
  for (Parameter& p : params) {
    ParamCheck pc;
    pc.name = p.name;
    std::vector<std::size_t> idx(p.value.numel());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(coords_per_param)));
    for (std::size_t i : idx) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double up = checked(f(false));
      p.value[i] = saved - h;
      const double down = checked(f(false));
      p.value[i] = saved;
      pc.max_rel_error = std::max(pc.max_rel_error, rel_error(p.grad[i], (up - down) / (2.0 * h)));
      ++pc.coords;
    }
    out.push_back(std::move(pc));
  }
  return out;
}

}  // namespace d2etr::ad
