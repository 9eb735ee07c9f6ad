// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/complexity.hpp"

#include <cmath>
#include <iomanip>

#include "d2etr/attention.hpp"
#include "d2etr/ops.hpp"

namespace d2etr::complexity {

namespace {

double need(const Bindings& b, const char* key) {
  auto it = b.find(key);
  if (it == b.end()) throw ConfigError(std::string("eval_formula: missing binding '") + key + "'");
  if (!(it->second > 0)) throw ConfigError(std::string("eval_formula: binding '") + key + "' must be positive");
  return it->second;
}

double geometric_sum(double s) {
  double total = 0.0;
  for (int k = 0; k < static_cast<int>(s); ++k) total += std::pow(4.0, k);
  return total;
}

}  // namespace

double eval_formula(Formula f, const Bindings& b) {
  switch (f) {
    case Formula::kEncoderSelfAttention: {
      const double hw = need(b, "H") * need(b, "W"), c = need(b, "C");
      return hw * hw * c + hw * c * c;
    }
    case Formula::kDecoderCrossAttention: {
      const double n = need(b, "N"), hw = need(b, "H") * need(b, "W"), c = need(b, "C");
      return n * hw * c + n * c * c;
    }
    case Formula::kDenseFusion: {
      const double s = need(b, "S");
      return geometric_sum(s) * need(b, "h") * need(b, "w") * s * need(b, "P") * need(b, "P") * need(b, "C");
    }
    case Formula::kCeca:
      return need(b, "S") * need(b, "h") * need(b, "w") * need(b, "P") * need(b, "P") * need(b, "C");
  }
  throw ConfigError("eval_formula: unknown formula");
}

Formula parse_formula(const std::string& name) {
  if (name == "encoder_sa") return Formula::kEncoderSelfAttention;
  if (name == "decoder_ca") return Formula::kDecoderCrossAttention;
  if (name == "dense_fusion") return Formula::kDenseFusion;
  if (name == "ceca") return Formula::kCeca;
  throw ConfigError("unknown formula '" + name + "' (encoder_sa, decoder_ca, dense_fusion, ceca)");
}

std::string formula_name(Formula f) {
  switch (f) {
    case Formula::kEncoderSelfAttention: return "encoder_sa";
    case Formula::kDecoderCrossAttention: return "decoder_ca";
    case Formula::kDenseFusion: return "dense_fusion";
    case Formula::kCeca: return "ceca";
  }
  return "?";
}

flops::FlopCounter count_forward(const std::function<void()>& fn) {
  flops::FlopCounter counter;
  flops::FlopCounter::Activation active(counter);
  fn();
  return counter;
}

std::uint64_t counted_ceca(int scales, const FusionShape& shape) {
  if (scales < 1) throw ConfigError("counted_ceca: at least one scale");
  ad::ParameterStore store;
  nn::Init init(0);
  attn::TransformerBlock block(store, "probe", shape.channels, shape.heads, 4, scales, shape.pool, 1e-6, init);
  ad::Tape tape;
  auto make_map = [&](int h, int w, int scale) {
    FeatureMap m;
    m.tokens = tape.constant(Tensor({h * w, shape.channels}, 0.5));
    m.h = h;
    m.w = w;
    m.scale = scale;
    return m;
  };
  std::vector<FeatureMap> prev;
  for (int k = scales - 1; k >= 1; --k) {
    const int f = static_cast<int>(std::pow(shape.predecessor_growth, k));
    prev.push_back(make_map(shape.h * f, shape.w * f, scales - k));
  }
  const FeatureMap q = make_map(shape.h, shape.w, scales);
  const flops::FlopCounter c = count_forward([&] { block.forward(q, prev); });
  std::uint64_t pool = 0;
  for (const auto& [label, n] : c.by_label()) {
    if (label.rfind("attn/", 0) == 0 && label.find("/pool") != std::string::npos) pool += n;
  }
  return c.total("attn") - pool;
}

std::vector<ScalingReportRow> scaling_report(const FusionShape& shape, int s_min, int s_max) {
  if (s_min < 1 || s_max > 6 || s_min > s_max) throw ConfigError("scaling_report: S range must lie within 1..6");
  std::vector<ScalingReportRow> rows;
  for (int s = s_min; s <= s_max; ++s) {
    const Bindings b{{"S", s}, {"h", shape.h}, {"w", shape.w}, {"P", shape.pool}, {"C", shape.channels}};
    ScalingReportRow r;
    r.S = s;
    r.counted_ceca = counted_ceca(s, shape);
    r.formula_ceca = eval_formula(Formula::kCeca, b);
    r.formula_dense = eval_formula(Formula::kDenseFusion, b);
    r.ratio = r.formula_dense / r.formula_ceca;
    rows.push_back(r);
  }
  return rows;
}

void write_scaling_csv(std::ostream& os, const std::vector<ScalingReportRow>& rows) {
  const auto old = os.precision(17);
  os << "S,counted_ceca,formula_ceca,formula_dense,ratio\n";
  for (const auto& r : rows) {
    os << r.S << ',' << r.counted_ceca << ',' << r.formula_ceca << ',' << r.formula_dense << ',' << r.ratio << '\n';
  }
  os.precision(old);
}

double linear_r2(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("linear_r2: need at least two paired points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (syy == 0.0) return 1.0;
  return (sxy * sxy) / (sxx * syy);
}

}  // namespace d2etr::complexity
