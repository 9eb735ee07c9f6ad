// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "d2etr/flops.hpp"

namespace d2etr::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;
using VecMapC = Eigen::Map<const Eigen::VectorXd>;
using VecMap = Eigen::Map<Eigen::VectorXd>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape) throw std::logic_error(std::string(op) + ": inputs on different tapes");
}

void require_rank(Var x, int rank, const char* op) {
  require(x.value().rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                        ", got shape " + to_string(x.shape()));
}

void require_same_shape(Var a, Var b, const char* op) {
  require_same_tape(a, b, op);
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + to_string(a.shape()) +
                                      " vs " + to_string(b.shape()));
}

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  require(axis >= 0 && axis < rank, std::string(op) + ": axis out of range");
  return axis;
}

// y = f(x) elementwise with dy/dx = df(x, y).
template <typename F, typename DF>
Var unary(const char* op, Var x, std::uint64_t flops_per_elem, F f, DF df) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = f(xv[i]);
  flops::record(flops_per_elem * xv.numel());
  const int xi = x.id;
  return x.tape->record(op, std::move(out), {x}, [xi, df](Tape& t, int self) {
    double* gx = t.grad_sink(xi);
    if (gx == nullptr) return;
    const double* gy = t.grad_of(self);
    const Tensor& xv = t.value(xi);
    const Tensor& yv = t.value(self);
    for (std::size_t i = 0; i < xv.numel(); ++i) gx[i] += gy[i] * df(xv[i], yv[i]);
  });
}

// y = f(a, b) elementwise with partials (da, db) = df(a, b).
template <typename F, typename DF>
Var binary(const char* op, Var a, Var b, F f, DF df) {
  require_same_shape(a, b, op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.numel(); ++i) out[i] = f(av[i], bv[i]);
  flops::record(av.numel());
  const int ai = a.id, bi = b.id;
  return a.tape->record(op, std::move(out), {a, b}, [ai, bi, df](Tape& t, int self) {
    double* ga = t.grad_sink(ai);
    double* gb = t.grad_sink(bi);
    const double* gy = t.grad_of(self);
    const Tensor& av = t.value(ai);
    const Tensor& bv = t.value(bi);
    for (std::size_t i = 0; i < av.numel(); ++i) {
      const auto [da, db] = df(av[i], bv[i]);
      if (ga) ga[i] += gy[i] * da;
      if (gb) gb[i] += gy[i] * db;
    }
  });
}

}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double sigmoid_value(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

PoolBin adaptive_bin(int i, int in, int out) {
  const long long lo = static_cast<long long>(i) * in;
  const long long hi = static_cast<long long>(i + 1) * in;
  return {static_cast<int>(lo / out), static_cast<int>((hi + out - 1) / out)};
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner dimensions differ " + to_string(a.shape()) + " x " +
                             to_string(b.shape()));
  Tensor out({m, n});
  Map(out.ptr(), m, n).noalias() = MapC(a.value().ptr(), m, k) * MapC(b.value().ptr(), k, n);
  flops::record(flops::matmul_flops(m, k, n));
  const int ai = a.id, bi = b.id;
  return a.tape->record("matmul", std::move(out), {a, b}, [ai, bi, m, k, n](Tape& t, int self) {
    MapC gy(t.grad_of(self), m, n);
    if (double* ga = t.grad_sink(ai)) {
      Map(ga, m, k).noalias() += gy * MapC(t.value(bi).ptr(), k, n).transpose();
    }
    if (double* gb = t.grad_sink(bi)) {
      Map(gb, k, n).noalias() += MapC(t.value(ai).ptr(), m, k).transpose() * gy;
    }
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b, "matmul_nt");
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  require(b.dim(1) == k, "matmul_nt: inner dimensions differ " + to_string(a.shape()) + " x " +
                             to_string(b.shape()) + "^T");
  Tensor out({m, n});
  Map(out.ptr(), m, n).noalias() =
      MapC(a.value().ptr(), m, k) * MapC(b.value().ptr(), n, k).transpose();
  flops::record(flops::matmul_flops(m, k, n));
  const int ai = a.id, bi = b.id;
  return a.tape->record("matmul_nt", std::move(out), {a, b}, [ai, bi, m, k, n](Tape& t, int self) {
    MapC gy(t.grad_of(self), m, n);
    if (double* ga = t.grad_sink(ai)) {
      Map(ga, m, k).noalias() += gy * MapC(t.value(bi).ptr(), n, k);
    }
    if (double* gb = t.grad_sink(bi)) {
      Map(gb, n, k).noalias() += gy.transpose() * MapC(t.value(ai).ptr(), m, k);
    }
  });
}

Var linear(Var x, Var weight, Var bias) {
  require_same_tape(x, weight, "linear");
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const int rows = x.dim(0), in = x.dim(1), out_dim = weight.dim(1);
  require(weight.dim(0) == in, "linear: input width " + std::to_string(in) +
                                   " does not match weight " + to_string(weight.shape()));
  const bool has_bias = bias.valid();
  if (has_bias) {
    require_same_tape(x, bias, "linear");
    require(bias.numel() == static_cast<std::size_t>(out_dim), "linear: bias size mismatch");
  }
  Tensor out({rows, out_dim});
  Map y(out.ptr(), rows, out_dim);
  y.noalias() = MapC(x.value().ptr(), rows, in) * MapC(weight.value().ptr(), in, out_dim);
  flops::record(flops::matmul_flops(rows, in, out_dim));
  if (has_bias) {
    y.rowwise() += VecMapC(bias.value().ptr(), out_dim).transpose();
    flops::record(static_cast<std::uint64_t>(rows) * out_dim);
  }
  const int xi = x.id, wi = weight.id, bi = has_bias ? bias.id : -1;
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return x.tape->record("linear", std::move(out), inputs,
                        [xi, wi, bi, rows, in, out_dim](Tape& t, int self) {
                          MapC gy(t.grad_of(self), rows, out_dim);
                          if (double* gx = t.grad_sink(xi)) {
                            Map(gx, rows, in).noalias() +=
                                gy * MapC(t.value(wi).ptr(), in, out_dim).transpose();
                          }
                          if (double* gw = t.grad_sink(wi)) {
                            Map(gw, in, out_dim).noalias() +=
                                MapC(t.value(xi).ptr(), rows, in).transpose() * gy;
                          }
                          if (bi >= 0) {
                            if (double* gb = t.grad_sink(bi)) {
                              VecMap(gb, out_dim) += gy.colwise().sum().transpose();
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  return binary("add", a, b, [](double x, double y) { return x + y; },
                [](double, double) { return std::pair{1.0, 1.0}; });
}

Var sub(Var a, Var b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; },
                [](double, double) { return std::pair{1.0, -1.0}; });
}

Var mul(Var a, Var b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; },
                [](double x, double y) { return std::pair{y, x}; });
}

Var div(Var a, Var b) {
  return binary("div", a, b, [](double x, double y) { return x / y; },
                [](double x, double y) { return std::pair{1.0 / y, -x / (y * y)}; });
}

// Ties route the gradient to the first argument.
Var minimum(Var a, Var b) {
  return binary("minimum", a, b, [](double x, double y) { return std::min(x, y); },
                [](double x, double y) { return x <= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0}; });
}

Var maximum(Var a, Var b) {
  return binary("maximum", a, b, [](double x, double y) { return std::max(x, y); },
                [](double x, double y) { return x >= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0}; });
}

Var add_row(Var x, Var row) {
  require_same_tape(x, row, "add_row");
  require_rank(x, 2, "add_row");
  const int rows = x.dim(0), cols = x.dim(1);
  require(row.numel() == static_cast<std::size_t>(cols), "add_row: row size mismatch");
  Tensor out = x.value();
  Map(out.ptr(), rows, cols).rowwise() += VecMapC(row.value().ptr(), cols).transpose();
  flops::record(out.numel());
  const int xi = x.id, ri = row.id;
  return x.tape->record("add_row", std::move(out), {x, row}, [xi, ri, rows, cols](Tape& t, int self) {
    MapC gy(t.grad_of(self), rows, cols);
    if (double* gx = t.grad_sink(xi)) Map(gx, rows, cols) += gy;
    if (double* gr = t.grad_sink(ri)) VecMap(gr, cols) += gy.colwise().sum().transpose();
  });
}

Var scale(Var x, double s) {
  return unary("scale", x, 1, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

Var add_scalar(Var x, double s) {
  return unary("add_scalar", x, 1, [s](double v) { return v + s; },
               [](double, double) { return 1.0; });
}

Var exp(Var x) {
  return unary("exp", x, flops::kFlopsPerTranscendental, [](double v) { return std::exp(v); },
               [](double, double y) { return y; });
}

Var log(Var x) {
  return unary("log", x, flops::kFlopsPerTranscendental, [](double v) { return std::log(v); },
               [](double v, double) { return 1.0 / v; });
}

Var sigmoid(Var x) {
  return unary("sigmoid", x, flops::kFlopsPerTranscendental, sigmoid_value,
               [](double, double y) { return y * (1.0 - y); });
}

Var abs(Var x) {
  return unary("abs", x, 1, [](double v) { return std::abs(v); },
               [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Var square(Var x) {
  return unary("square", x, 1, [](double v) { return v * v; },
               [](double v, double) { return 2.0 * v; });
}

Var clamp(Var x, double lo, double hi) {
  return unary("clamp", x, 1, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var x) {
  const Tensor& xv = x.value();
  double s = 0.0;
  for (double v : xv.data()) s += v;
  flops::record(xv.numel());
  const int xi = x.id;
  return x.tape->record("sum", Tensor::scalar(s), {x}, [xi](Tape& t, int self) {
    double* gx = t.grad_sink(xi);
    if (gx == nullptr) return;
    const double g = t.grad_of(self)[0];
    const std::size_t n = t.value(xi).numel();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Normalization and activations

Var softmax(Var x, int axis) {
  const Tensor& xv = x.value();
  axis = normalize_axis(axis, xv.rank(), "softmax");
  const int n = xv.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
  for (int i = axis + 1; i < xv.rank(); ++i) inner *= xv.dim(i);
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (int i = 0; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
      double z = 0.0;
      for (int i = 0; i < n; ++i) {
        const double e = std::exp(xv[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (int i = 0; i < n; ++i) out[base + i * inner] *= inv;
    }
  }
  flops::record(flops::kFlopsPerTranscendental * xv.numel());
  const int xi = x.id;
  return x.tape->record("softmax", std::move(out), {x}, [xi, outer, inner, n](Tape& t, int self) {
    double* gx = t.grad_sink(xi);
    if (gx == nullptr) return;
    const double* gy = t.grad_of(self);
    const Tensor& y = t.value(self);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t base = o * n * inner + j;
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += gy[base + i * inner] * y[base + i * inner];
        for (int i = 0; i < n; ++i) {
          const std::size_t p = base + i * inner;
          gx[p] += y[p] * (gy[p] - dot);
        }
      }
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  require_same_tape(x, gamma, "layer_norm");
  require_same_tape(x, beta, "layer_norm");
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  const int c = xv.dim(-1);
  require(gamma.numel() == static_cast<std::size_t>(c) && beta.numel() == static_cast<std::size_t>(c),
          "layer_norm: affine size mismatch for " + to_string(xv.shape()));
  const std::size_t rows = xv.numel() / c;
  Tensor out(xv.shape());
  auto xhat = std::make_shared<AlignedVector>(xv.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const double* g = gamma.value().ptr();
  const double* b = beta.value().ptr();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.ptr() + r * c;
    double mu = 0.0;
    for (int i = 0; i < c; ++i) mu += xr[i];
    mu /= c;
    double var = 0.0;
    for (int i = 0; i < c; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= c;
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (int i = 0; i < c; ++i) {
      const double h = (xr[i] - mu) * rs;
      (*xhat)[r * c + i] = h;
      out[r * c + i] = g[i] * h + b[i];
    }
  }
  flops::record(flops::kFlopsPerTranscendental * xv.numel());
  const int xi = x.id, gi = gamma.id, bi = beta.id;
  return x.tape->record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [xi, gi, bi, rows, c, xhat, rstd](Tape& t, int self) {
        const double* gy = t.grad_of(self);
        const double* g = t.value(gi).ptr();
        double* gx = t.grad_sink(xi);
        double* gg = t.grad_sink(gi);
        double* gb = t.grad_sink(bi);
        std::vector<double> dh(c);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gyr = gy + r * c;
          const double* hr = xhat->data() + r * c;
          if (gg) for (int i = 0; i < c; ++i) gg[i] += gyr[i] * hr[i];
          if (gb) for (int i = 0; i < c; ++i) gb[i] += gyr[i];
          if (!gx) continue;
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (int i = 0; i < c; ++i) {
            dh[i] = gyr[i] * g[i];
            mean_dh += dh[i];
            mean_dh_h += dh[i] * hr[i];
          }
          mean_dh /= c;
          mean_dh_h /= c;
          const double rs = (*rstd)[r];
          for (int i = 0; i < c; ++i) gx[r * c + i] += rs * (dh[i] - mean_dh - hr[i] * mean_dh_h);
        }
      });
}

Var gelu(Var x) {
  return unary("gelu", x, flops::kFlopsPerTranscendental, gelu_value, [](double v, double) {
    const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * v * v) * (std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    return cdf + v * pdf;
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const int xi = x.id;
  return x.tape->record("reshape", std::move(out), {x}, [xi](Tape& t, int self) {
    double* gx = t.grad_sink(xi);
    if (gx == nullptr) return;
    const double* gy = t.grad_of(self);
    const std::size_t n = t.value(xi).numel();
    for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i];
  });
}

Var transpose(Var x) {
  require_rank(x, 2, "transpose");
  const int r = x.dim(0), c = x.dim(1);
  Tensor out({c, r});
  Map(out.ptr(), c, r) = MapC(x.value().ptr(), r, c).transpose();
  const int xi = x.id;
  return x.tape->record("transpose", std::move(out), {x}, [xi, r, c](Tape& t, int self) {
    if (double* gx = t.grad_sink(xi)) Map(gx, r, c) += MapC(t.grad_of(self), c, r).transpose();
  });
}

Var slice_cols(Var x, int begin, int end) {
  require_rank(x, 2, "slice_cols");
  const int r = x.dim(0), c = x.dim(1), w = end - begin;
  require(begin >= 0 && end <= c && w > 0, "slice_cols: bad range");
  Tensor out({r, w});
  Map(out.ptr(), r, w) = MapC(x.value().ptr(), r, c).middleCols(begin, w);
  const int xi = x.id;
  return x.tape->record("slice_cols", std::move(out), {x}, [xi, r, c, w, begin](Tape& t, int self) {
    if (double* gx = t.grad_sink(xi)) Map(gx, r, c).middleCols(begin, w) += MapC(t.grad_of(self), r, w);
  });
}

Var slice_rows(Var x, int begin, int end) {
  require_rank(x, 2, "slice_rows");
  const int r = x.dim(0), c = x.dim(1), h = end - begin;
  require(begin >= 0 && end <= r && h > 0, "slice_rows: bad range");
  Tensor out({h, c});
  std::copy_n(x.value().ptr() + static_cast<std::size_t>(begin) * c, static_cast<std::size_t>(h) * c,
              out.ptr());
  const int xi = x.id;
  return x.tape->record("slice_rows", std::move(out), {x}, [xi, c, h, begin](Tape& t, int self) {
    double* gx = t.grad_sink(xi);
    if (gx == nullptr) return;
    const double* gy = t.grad_of(self);
    double* dst = gx + static_cast<std::size_t>(begin) * c;
    for (std::size_t i = 0; i < static_cast<std::size_t>(h) * c; ++i) dst[i] += gy[i];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int c = parts[0].dim(1);
  int rows = 0;
  for (const Var& p : parts) {
    require_rank(p, 2, "concat_rows");
    require_same_tape(parts[0], p, "concat_rows");
    require(p.dim(1) == c, "concat_rows: column count mismatch");
    rows += p.dim(0);
  }
  Tensor out({rows, c});
  std::vector<int> ids;
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy_n(p.value().ptr(), p.numel(), out.ptr() + off);
    off += p.numel();
    ids.push_back(p.id);
  }
  return parts[0].tape->record("concat_rows", std::move(out), parts, [ids](Tape& t, int self) {
    const double* gy = t.grad_of(self);
    std::size_t off = 0;
    for (int id : ids) {
      const std::size_t n = t.value(id).numel();
      if (double* g = t.grad_sink(id)) {
        for (std::size_t i = 0; i < n; ++i) g[i] += gy[off + i];
      }
      off += n;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const int r = parts[0].dim(0);
  int cols = 0;
  for (const Var& p : parts) {
    require_rank(p, 2, "concat_cols");
    require_same_tape(parts[0], p, "concat_cols");
    require(p.dim(0) == r, "concat_cols: row count mismatch");
    cols += p.dim(1);
  }
  Tensor out({r, cols});
  Map y(out.ptr(), r, cols);
  std::vector<std::pair<int, int>> spans;  // (id, width)
  int off = 0;
  for (const Var& p : parts) {
    const int w = p.dim(1);
    y.middleCols(off, w) = MapC(p.value().ptr(), r, w);
    spans.emplace_back(p.id, w);
    off += w;
  }
  return parts[0].tape->record("concat_cols", std::move(out), parts,
                               [spans, r, cols](Tape& t, int self) {
                                 MapC gy(t.grad_of(self), r, cols);
                                 int off = 0;
                                 for (const auto& [id, w] : spans) {
                                   if (double* g = t.grad_sink(id)) Map(g, r, w) += gy.middleCols(off, w);
                                   off += w;
                                 }
                               });
}

Var gather_rows(Var x, const std::vector<int>& rows) {
  require_rank(x, 2, "gather_rows");
  const int n = x.dim(0), c = x.dim(1);
  require(!rows.empty(), "gather_rows: empty index list");
  for (int r : rows) require(r >= 0 && r < n, "gather_rows: index out of range");
  Tensor out({static_cast<int>(rows.size()), c});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.value().ptr() + static_cast<std::size_t>(rows[i]) * c, c, out.ptr() + i * c);
  }
  const int xi = x.id;
  return x.tape->record("gather_rows", std::move(out), {x}, [xi, rows, c](Tape& t, int self) {
    double* gx = t.grad_sink(xi);
    if (gx == nullptr) return;
    const double* gy = t.grad_of(self);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (int j = 0; j < c; ++j) gx[static_cast<std::size_t>(rows[i]) * c + j] += gy[i * c + j];
    }
  });
}

Var map_to_tokens(Var x) {
  require_rank(x, 3, "map_to_tokens");
  const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
  return reshape(transpose(reshape(x, {c, hw})), {hw, c});
}

Var tokens_to_map(Var x, int h, int w) {
  require_rank(x, 2, "tokens_to_map");
  require(x.dim(0) == h * w, "tokens_to_map: token count " + std::to_string(x.dim(0)) +
                                 " does not match grid " + std::to_string(h) + "x" + std::to_string(w));
  const int c = x.dim(1);
  return reshape(transpose(x), {c, h, w});
}

// ---------------------------------------------------------------------------
// Spatial operators

Var adaptive_avg_pool2d(Var x, int out_h, int out_w) {
  require_rank(x, 3, "adaptive_avg_pool2d");
  require(out_h > 0 && out_w > 0, "adaptive_avg_pool2d: output size must be positive");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const Tensor& xv = x.value();
  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < out_h; ++i) {
      const PoolBin bi = adaptive_bin(i, h, out_h);
      for (int j = 0; j < out_w; ++j) {
        const PoolBin bj = adaptive_bin(j, w, out_w);
        double s = 0.0;
        for (int r = bi.begin; r < bi.end; ++r)
          for (int q = bj.begin; q < bj.end; ++q) s += xv.at(ch, r, q);
        out.at(ch, i, j) = s / ((bi.end - bi.begin) * (bj.end - bj.begin));
      }
    }
  }
  {
    flops::FlopLabel label("pool");
    flops::record(xv.numel());
  }
  const int xi = x.id;
  return x.tape->record("adaptive_avg_pool2d", std::move(out), {x},
                        [xi, c, h, w, out_h, out_w](Tape& t, int self) {
                          double* gx = t.grad_sink(xi);
                          if (gx == nullptr) return;
                          const double* gy = t.grad_of(self);
                          for (int ch = 0; ch < c; ++ch) {
                            for (int i = 0; i < out_h; ++i) {
                              const PoolBin bi = adaptive_bin(i, h, out_h);
                              for (int j = 0; j < out_w; ++j) {
                                const PoolBin bj = adaptive_bin(j, w, out_w);
                                const double g = gy[(ch * out_h + i) * out_w + j] /
                                                 ((bi.end - bi.begin) * (bj.end - bj.begin));
                                for (int r = bi.begin; r < bi.end; ++r)
                                  for (int q = bj.begin; q < bj.end; ++q)
                                    gx[(static_cast<std::size_t>(ch) * h + r) * w + q] += g;
                              }
                            }
                          }
                        });
}

namespace {

struct Tap {
  int i0, i1;
  double w0, w1;
};

std::vector<Tap> bilinear_taps(int in, int out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / out;
  for (int d = 0; d < out; ++d) {
    const double src = std::max((d + 0.5) * ratio - 0.5, 0.0);
    const int i0 = std::min(static_cast<int>(src), in - 1);
    const int i1 = std::min(i0 + 1, in - 1);
    const double l1 = std::min(src - i0, 1.0);
    taps[d] = {i0, i1, 1.0 - l1, l1};
  }
  return taps;
}

}  // namespace

Tensor resize_bilinear(const Tensor& xv, int out_h, int out_w) {
  if (xv.rank() != 3) throw ShapeError("resize_bilinear: expected [C,H,W], got " + to_string(xv.shape()));
  require(out_h > 0 && out_w > 0, "resize_bilinear: output size must be positive");
  const int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  Tensor out({c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < out_h; ++i) {
      for (int j = 0; j < out_w; ++j) {
        const Tap& a = ty[i];
        const Tap& b = tx[j];
        out.at(ch, i, j) = a.w0 * (b.w0 * xv.at(ch, a.i0, b.i0) + b.w1 * xv.at(ch, a.i0, b.i1)) +
                           a.w1 * (b.w0 * xv.at(ch, a.i1, b.i0) + b.w1 * xv.at(ch, a.i1, b.i1));
      }
    }
  }
  return out;
}

Var interpolate_bilinear(Var x, int out_h, int out_w) {
  require_rank(x, 3, "interpolate_bilinear");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out = resize_bilinear(x.value(), out_h, out_w);
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  flops::record(8ull * out.numel());
  const int xi = x.id;
  return x.tape->record("interpolate_bilinear", std::move(out), {x},
                        [xi, c, h, w, out_h, out_w, ty, tx](Tape& t, int self) {
                          double* gx = t.grad_sink(xi);
                          if (gx == nullptr) return;
                          const double* gy = t.grad_of(self);
                          auto at = [&](int ch, int r, int q) -> double& {
                            return gx[(static_cast<std::size_t>(ch) * h + r) * w + q];
                          };
                          for (int ch = 0; ch < c; ++ch) {
                            for (int i = 0; i < out_h; ++i) {
                              for (int j = 0; j < out_w; ++j) {
                                const double g = gy[(ch * out_h + i) * out_w + j];
                                const Tap& a = ty[i];
                                const Tap& b = tx[j];
                                at(ch, a.i0, b.i0) += g * a.w0 * b.w0;
                                at(ch, a.i0, b.i1) += g * a.w0 * b.w1;
                                at(ch, a.i1, b.i0) += g * a.w1 * b.w0;
                                at(ch, a.i1, b.i1) += g * a.w1 * b.w1;
                              }
                            }
                          }
                        });
}

Var depthwise_conv3x3(Var x, Var kernel) {
  require_same_tape(x, kernel, "depthwise_conv3x3");
  require_rank(x, 3, "depthwise_conv3x3");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(kernel.shape() == Shape{c, 3, 3}, "depthwise_conv3x3: kernel shape " +
                                                to_string(kernel.shape()) + " does not match " +
                                                std::to_string(c) + " channels");
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    const double* k = kv.ptr() + ch * 9;
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        double s = 0.0;
        for (int di = -1; di <= 1; ++di) {
          const int r = i + di;
          if (r < 0 || r >= h) continue;
          for (int dj = -1; dj <= 1; ++dj) {
            const int q = j + dj;
            if (q < 0 || q >= w) continue;
            s += k[(di + 1) * 3 + dj + 1] * xv.at(ch, r, q);
          }
        }
        out.at(ch, i, j) = s;
      }
    }
  }
  flops::record(flops::kFlopsPerMac * 9ull * out.numel());
  const int xi = x.id, ki = kernel.id;
  return x.tape->record(
      "depthwise_conv3x3", std::move(out), {x, kernel}, [xi, ki, c, h, w](Tape& t, int self) {
        const double* gy = t.grad_of(self);
        double* gx = t.grad_sink(xi);
        double* gk = t.grad_sink(ki);
        const Tensor& xv = t.value(xi);
        const Tensor& kv = t.value(ki);
        for (int ch = 0; ch < c; ++ch) {
          const double* k = kv.ptr() + ch * 9;
          for (int i = 0; i < h; ++i) {
            for (int j = 0; j < w; ++j) {
              const double g = gy[(static_cast<std::size_t>(ch) * h + i) * w + j];
              for (int di = -1; di <= 1; ++di) {
                const int r = i + di;
                if (r < 0 || r >= h) continue;
                for (int dj = -1; dj <= 1; ++dj) {
                  const int q = j + dj;
                  if (q < 0 || q >= w) continue;
                  const std::size_t src = (static_cast<std::size_t>(ch) * h + r) * w + q;
                  const int kk = (di + 1) * 3 + dj + 1;
                  if (gx) gx[src] += g * k[kk];
                  if (gk) gk[ch * 9 + kk] += g * xv[src];
                }
              }
            }
          }
        }
      });
}

Var conv2d(Var x, Var weight, Var bias, int stride, int padding) {
  require_same_tape(x, weight, "conv2d");
  require_rank(x, 3, "conv2d");
  require_rank(weight, 4, "conv2d");
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == cin && weight.dim(3) == k,
          "conv2d: weight " + to_string(weight.shape()) + " incompatible with input " + to_string(x.shape()));
  require(stride > 0 && padding >= 0, "conv2d: invalid stride/padding");
  require(h + 2 * padding >= k && w + 2 * padding >= k, "conv2d: input smaller than kernel");
  const int ho = (h + 2 * padding - k) / stride + 1;
  const int wo = (w + 2 * padding - k) / stride + 1;
  const int patch = cin * k * k;
  const int npos = ho * wo;
  // im2col: cols[patch, npos]
  auto cols = std::make_shared<AlignedVector>(static_cast<std::size_t>(patch) * npos, 0.0);
  const Tensor& xv = x.value();
  for (int ci = 0; ci < cin; ++ci) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = cols->data() + static_cast<std::size_t>((ci * k + ki) * k + kj) * npos;
        for (int oi = 0; oi < ho; ++oi) {
          const int r = oi * stride - padding + ki;
          if (r < 0 || r >= h) continue;
          for (int oj = 0; oj < wo; ++oj) {
            const int q = oj * stride - padding + kj;
            if (q < 0 || q >= w) continue;
            row[oi * wo + oj] = xv.at(ci, r, q);
          }
        }
      }
    }
  }
  Tensor out({cout, ho, wo});
  Map y(out.ptr(), cout, npos);
  y.noalias() = MapC(weight.value().ptr(), cout, patch) * MapC(cols->data(), patch, npos);
  flops::record(flops::matmul_flops(cout, patch, npos));
  const bool has_bias = bias.valid();
  if (has_bias) {
    require(bias.numel() == static_cast<std::size_t>(cout), "conv2d: bias size mismatch");
    y.colwise() += VecMapC(bias.value().ptr(), cout);
    flops::record(out.numel());
  }
  const int xi = x.id, wi = weight.id, bi = has_bias ? bias.id : -1;
  std::vector<Var> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return x.tape->record(
      "conv2d", std::move(out), inputs,
      [=](Tape& t, int self) {
        MapC gy(t.grad_of(self), cout, npos);
        if (double* gw = t.grad_sink(wi)) {
          Map(gw, cout, patch).noalias() += gy * MapC(cols->data(), patch, npos).transpose();
        }
        if (bi >= 0) {
          if (double* gb = t.grad_sink(bi)) VecMap(gb, cout) += gy.rowwise().sum();
        }
        double* gx = t.grad_sink(xi);
        if (gx == nullptr) return;
        RowMat gcols = MapC(t.value(wi).ptr(), cout, patch).transpose() * gy;
        for (int ci = 0; ci < cin; ++ci) {
          for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
              const double* row = gcols.data() + static_cast<std::size_t>((ci * k + ki) * k + kj) * npos;
              for (int oi = 0; oi < ho; ++oi) {
                const int r = oi * stride - padding + ki;
                if (r < 0 || r >= h) continue;
                for (int oj = 0; oj < wo; ++oj) {
                  const int q = oj * stride - padding + kj;
                  if (q < 0 || q >= w) continue;
                  gx[(static_cast<std::size_t>(ci) * h + r) * w + q] += row[oi * wo + oj];
                }
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses

Var sigmoid_focal_loss(Var logits, const Tensor& targets, double gamma, double alpha, double eps) {
  require(logits.shape() == targets.shape(), "sigmoid_focal_loss: target shape " +
                                                 to_string(targets.shape()) + " vs logits " +
                                                 to_string(logits.shape()));
  const Tensor& z = logits.value();
  double total = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    const double p = std::clamp(sigmoid_value(z[i]), eps, 1.0 - eps);
    const double tv = targets[i];
    total += -alpha * std::pow(std::abs(tv - p), gamma) *
             (tv * std::log(p) + (1.0 - tv) * std::log(1.0 - p));
  }
  flops::record(flops::kFlopsPerTranscendental * z.numel());
  const int zi = logits.id;
  return logits.tape->record(
      "sigmoid_focal_loss", Tensor::scalar(total), {logits},
      [zi, targets, gamma, alpha, eps](Tape& t, int self) {
        double* gz = t.grad_sink(zi);
        if (gz == nullptr) return;
        const double g = t.grad_of(self)[0];
        const Tensor& z = t.value(zi);
        for (std::size_t i = 0; i < z.numel(); ++i) {
          const double raw = sigmoid_value(z[i]);
          if (raw < eps || raw > 1.0 - eps) continue;
          const double p = raw;
          const double tv = targets[i];
          const double d = p - tv;
          const double ad = std::abs(d);
          const double m = std::pow(ad, gamma);
          const double dm = ad > 0 ? gamma * std::pow(ad, gamma - 1.0) * (d > 0 ? 1.0 : -1.0) : 0.0;
          const double ll = tv * std::log(p) + (1.0 - tv) * std::log(1.0 - p);
          const double dll = tv / p - (1.0 - tv) / (1.0 - p);
          const double dp = -alpha * (dm * ll + m * dll);
          gz[i] += g * dp * p * (1.0 - p);
        }
      });
}

Var bce_with_logits(Var logits, const Tensor& targets) {
  require(logits.shape() == targets.shape(), "bce_with_logits: target shape mismatch");
  const Tensor& z = logits.value();
  double total = 0.0;
  for (std::size_t i = 0; i < z.numel(); ++i) {
    const double v = z[i];
    total += std::max(v, 0.0) - targets[i] * v + std::log1p(std::exp(-std::abs(v)));
  }
  flops::record(flops::kFlopsPerTranscendental * z.numel());
  const int zi = logits.id;
  return logits.tape->record("bce_with_logits", Tensor::scalar(total), {logits},
                             [zi, targets](Tape& t, int self) {
                               double* gz = t.grad_sink(zi);
                               if (gz == nullptr) return;
                               const double g = t.grad_of(self)[0];
                               const Tensor& z = t.value(zi);
                               for (std::size_t i = 0; i < z.numel(); ++i) {
                                 gz[i] += g * (sigmoid_value(z[i]) - targets[i]);
                               }
                             });
}

}  // namespace d2etr::ad
