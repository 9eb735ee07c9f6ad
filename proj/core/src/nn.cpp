// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/nn.hpp"

#include <Eigen/Dense>

namespace d2etr::nn {

Tensor Init::orthogonal(const Shape& shape, double gain) {
  const int rows = shape.at(0);
  const int cols = static_cast<int>(numel(shape) / rows);
  const bool flip = rows < cols;
  const int r = flip ? cols : rows;
  const int c = flip ? rows : cols;
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd a(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) a(i, j) = gauss(rng_);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(r, c);
  const Eigen::MatrixXd upper = qr.matrixQR();
  for (int j = 0; j < c; ++j) {
    if (upper(j, j) < 0) q.col(j) *= -1.0;
  }
  Tensor out(shape);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) out[static_cast<std::size_t>(i) * cols + j] = gain * (flip ? q(j, i) : q(i, j));
  return out;
}

Tensor Init::normal(const Shape& shape, double stddev) {
  std::normal_distribution<double> gauss(0.0, stddev);
  Tensor out(shape);
  for (double& v : out.data()) v = gauss(rng_);
  return out;
}

Tensor Init::uniform(const Shape& shape, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor out(shape);
  for (double& v : out.data()) v = dist(rng_);
  return out;
}

Linear Linear::create(ad::ParameterStore& store, const std::string& name, int in, int out,
                      Init& init, bool with_bias) {
  Linear l;
  l.weight = &store.add(name + ".weight", init.orthogonal({in, out}));
  if (with_bias) l.bias = &store.add(name + ".bias", Tensor({out}, 0.0));
  return l;
}

ad::Var Linear::operator()(ad::Var x) const {
  return ad::linear(x, x.tape->param(*weight), bind(*x.tape, bias));
}

LayerNorm LayerNorm::create(ad::ParameterStore& store, const std::string& name, int channels,
                            double eps) {
  LayerNorm n;
  n.gamma = &store.add(name + ".gamma", Tensor({channels}, 1.0));
  n.beta = &store.add(name + ".beta", Tensor({channels}, 0.0));
  n.eps = eps;
  return n;
}

ad::Var LayerNorm::operator()(ad::Var x) const {
  return ad::layer_norm(x, x.tape->param(*gamma), x.tape->param(*beta), eps);
}

}  // namespace d2etr::nn
