// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/attention.hpp"

#include <cmath>

#include "d2etr/flops.hpp"

namespace d2etr::attn {

using ad::Var;
using flops::FlopLabel;

double AttentionConfig::scale() const { return 1.0 / std::sqrt(static_cast<double>(head_dim())); }

void AttentionConfig::validate() const {
  if (channels <= 0 || heads <= 0) throw ConfigError("attention: channels and heads must be positive");
  if (channels % heads != 0) {
    throw ConfigError("attention: heads (" + std::to_string(heads) + ") must divide channels (" +
                      std::to_string(channels) + ")");
  }
}

Tensor AttentionTrace::mean_over_heads() const {
  if (heads.empty()) return {};
  Tensor out(heads[0].shape(), 0.0);
  for (const Tensor& h : heads)
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += h[i];
  for (double& v : out.data()) v /= static_cast<double>(heads.size());
  return out;
}

Var multi_head_attention(Var q, Var k, Var v, const AttentionWeights& w, const AttentionConfig& cfg,
                         AttentionTrace* trace) {
  cfg.validate();
  if (k.dim(0) == 0 || v.dim(0) == 0) throw ShapeError("attention: no key tokens");
  if (k.dim(0) != v.dim(0)) throw ShapeError("attention: key/value token counts differ");
  for (Var x : {q, k, v}) {
    if (x.dim(1) != cfg.channels) {
      throw ShapeError("attention: input width " + std::to_string(x.dim(1)) +
                       " does not match configured channels " + std::to_string(cfg.channels));
    }
  }
  Var qp, kp, vp;
  {
    FlopLabel l("q");
    qp = ad::scale(ad::linear(q, w.wq, w.bq), cfg.scale());
  }
  {
    FlopLabel l("k");
    kp = ad::linear(k, w.wk, w.bk);
  }
  {
    FlopLabel l("v");
    vp = ad::linear(v, w.wv, w.bv);
  }
  const int d = cfg.head_dim();
  std::vector<Var> outs;
  outs.reserve(cfg.heads);
  if (trace) trace->heads.clear();
  for (int h = 0; h < cfg.heads; ++h) {
    Var qh = cfg.heads == 1 ? qp : ad::slice_cols(qp, h * d, (h + 1) * d);
    Var kh = cfg.heads == 1 ? kp : ad::slice_cols(kp, h * d, (h + 1) * d);
    Var vh = cfg.heads == 1 ? vp : ad::slice_cols(vp, h * d, (h + 1) * d);
    Var logits, probs;
    {
      FlopLabel l("score");
      logits = ad::matmul_nt(qh, kh);
    }
    {
      FlopLabel l("softmax");
      probs = ad::softmax(logits, -1);
    }
    if (trace) trace->heads.push_back(probs.value());
    FlopLabel l("weight");
    outs.push_back(ad::matmul(probs, vh));
  }
  Var cat = cfg.heads == 1 ? outs[0] : ad::concat_cols(outs);
  FlopLabel l("out");
  return ad::linear(cat, w.wo, w.bo);
}

Var feed_forward(Var x, const FfnWeights& w, const Grid* grid) {
  Var hidden = ad::linear(x, w.w1, w.b1);
  if (w.convolutional()) {
    if (grid == nullptr) throw ConfigError("feed_forward: convolutional mode requires a grid shape");
    Var map = ad::tokens_to_map(hidden, grid->h, grid->w);
    map = ad::depthwise_conv3x3(map, w.dw_kernel);
    hidden = ad::map_to_tokens(map);
    if (w.dw_bias.valid()) hidden = ad::add_row(hidden, w.dw_bias);
  }
  hidden = ad::gelu(hidden);
  return ad::linear(hidden, w.w2, w.b2);
}

Var spatial_reduce(const std::vector<FeatureMap>& keys, const std::vector<ScaleProjection>& projections,
                   int pool, double eps) {
  if (keys.size() != projections.size()) {
    throw ConfigError("spatial_reduce: " + std::to_string(keys.size()) + " key scales but " +
                      std::to_string(projections.size()) + " projections");
  }
  if (keys.empty()) throw ConfigError("spatial_reduce: no key scales");
  if (pool <= 0) throw ConfigError("spatial_reduce: pool size must be positive");
  std::vector<Var> parts;
  parts.reserve(keys.size());
  for (std::size_t j = 0; j < keys.size(); ++j) {
    const FeatureMap& x = keys[j];
    const ScaleProjection& p = projections[j];
    Var pooled = ad::map_to_tokens(ad::adaptive_avg_pool2d(ad::tokens_to_map(x.tokens, x.h, x.w), pool, pool));
    Var t = ad::linear(pooled, p.w, p.b);
    t = ad::layer_norm(t, p.gamma, p.beta, eps);
    parts.push_back(ad::gelu(t));
  }
  return parts.size() == 1 ? parts[0] : ad::concat_rows(parts);
}

FeatureMap fusing_layer(const FeatureMap& x, const std::vector<FeatureMap>& prev, const BlockWeights& w,
                        const BlockOptions& opt, AttentionTrace* trace) {
  if (x.channels() != opt.attention.channels) {
    throw ShapeError("fusing_layer: query width " + std::to_string(x.channels()) +
                     " does not match block width " + std::to_string(opt.attention.channels));
  }
  for (const FeatureMap& p : prev) {
    if (p.channels() != opt.attention.channels) {
      throw ShapeError("fusing_layer: key scale width " + std::to_string(p.channels()) +
                       " does not match block width " + std::to_string(opt.attention.channels));
    }
  }
  Var a;
  {
    FlopLabel scope("attn");
    Var q = ad::layer_norm(x.tokens, w.norm1_gamma, w.norm1_beta, opt.eps);
    std::vector<FeatureMap> keys = prev;
    keys.push_back(opt.normalized_query_key ? x.with_tokens(q) : x);
    Var kv;
    {
      FlopLabel sr("sr");
      kv = spatial_reduce(keys, w.sr, opt.pool, opt.eps);
    }
    a = multi_head_attention(q, kv, kv, w.attn, opt.attention, trace);
  }
  {
    FlopLabel scope("residual");
    a = ad::add(a, x.tokens);
  }
  FlopLabel scope("ffn");
  Var n2 = ad::layer_norm(a, w.norm2_gamma, w.norm2_beta, opt.eps);
  const Grid grid{x.h, x.w};
  Var out = ad::add(feed_forward(n2, w.ffn, &grid), a);
  return x.with_tokens(out);
}

FeatureMap sra_block(const FeatureMap& x, const BlockWeights& w, const BlockOptions& opt) {
  return fusing_layer(x, {}, w, opt);
}

TransformerBlock::TransformerBlock(ad::ParameterStore& store, const std::string& prefix, int channels,
                                   int heads, int mlp_ratio, int key_scales, int pool, double eps,
                                   nn::Init& init, bool normalized_query_key) {
  opt_.attention = {channels, heads};
  opt_.attention.validate();
  opt_.pool = pool;
  opt_.eps = eps;
  opt_.normalized_query_key = normalized_query_key;
  if (key_scales < 1) throw ConfigError(prefix + ": at least one key scale required");
  if (mlp_ratio < 1) throw ConfigError(prefix + ": mlp_ratio must be >= 1");
  norm1_ = nn::LayerNorm::create(store, prefix + ".norm1", channels, eps);
  q_ = nn::Linear::create(store, prefix + ".attn.q", channels, channels, init);
  k_ = nn::Linear::create(store, prefix + ".attn.k", channels, channels, init);
  v_ = nn::Linear::create(store, prefix + ".attn.v", channels, channels, init);
  o_ = nn::Linear::create(store, prefix + ".attn.proj", channels, channels, init);
  for (int j = 0; j < key_scales; ++j) {
    const std::string sr = prefix + ".attn.sr" + std::to_string(j);
    sr_proj_.push_back(nn::Linear::create(store, sr + ".proj", channels, channels, init));
    sr_norm_.push_back(nn::LayerNorm::create(store, sr + ".norm", channels, eps));
  }
  norm2_ = nn::LayerNorm::create(store, prefix + ".norm2", channels, eps);
  const int hidden = channels * mlp_ratio;
  fc1_ = nn::Linear::create(store, prefix + ".mlp.fc1", channels, hidden, init);
  dw_kernel_ = &store.add(prefix + ".mlp.dwconv.weight", init.orthogonal({hidden, 3, 3}));
  dw_bias_ = &store.add(prefix + ".mlp.dwconv.bias", Tensor({hidden}, 0.0));
  fc2_ = nn::Linear::create(store, prefix + ".mlp.fc2", hidden, channels, init);
}

BlockWeights TransformerBlock::bind(ad::Tape& tape) const {
  BlockWeights w;
  w.norm1_gamma = tape.param(*norm1_.gamma);
  w.norm1_beta = tape.param(*norm1_.beta);
  w.attn = {tape.param(*q_.weight), nn::bind(tape, q_.bias), tape.param(*k_.weight), nn::bind(tape, k_.bias),
            tape.param(*v_.weight), nn::bind(tape, v_.bias), tape.param(*o_.weight), nn::bind(tape, o_.bias)};
  for (std::size_t j = 0; j < sr_proj_.size(); ++j) {
    w.sr.push_back({tape.param(*sr_proj_[j].weight), nn::bind(tape, sr_proj_[j].bias),
                    tape.param(*sr_norm_[j].gamma), tape.param(*sr_norm_[j].beta)});
  }
  w.norm2_gamma = tape.param(*norm2_.gamma);
  w.norm2_beta = tape.param(*norm2_.beta);
  w.ffn = {tape.param(*fc1_.weight), nn::bind(tape, fc1_.bias), tape.param(*fc2_.weight),
           nn::bind(tape, fc2_.bias), tape.param(*dw_kernel_), tape.param(*dw_bias_)};
  return w;
}

FeatureMap TransformerBlock::forward(const FeatureMap& x, const std::vector<FeatureMap>& prev,
                                     AttentionTrace* trace) const {
  if (static_cast<int>(prev.size()) + 1 != key_scales()) {
    throw ConfigError("transformer block expects " + std::to_string(key_scales() - 1) +
                      " predecessor scales, got " + std::to_string(prev.size()));
  }
  return fusing_layer(x, prev, bind(*x.tokens.tape), opt_, trace);
}

AttentionModule AttentionModule::create(ad::ParameterStore& store, const std::string& prefix,
                                        AttentionConfig cfg, nn::Init& init) {
  cfg.validate();
  AttentionModule m;
  m.cfg = cfg;
  m.q = nn::Linear::create(store, prefix + ".q", cfg.channels, cfg.channels, init);
  m.k = nn::Linear::create(store, prefix + ".k", cfg.channels, cfg.channels, init);
  m.v = nn::Linear::create(store, prefix + ".v", cfg.channels, cfg.channels, init);
  m.o = nn::Linear::create(store, prefix + ".proj", cfg.channels, cfg.channels, init);
  return m;
}

AttentionWeights AttentionModule::bind(ad::Tape& tape) const {
  return {tape.param(*q.weight), nn::bind(tape, q.bias), tape.param(*k.weight), nn::bind(tape, k.bias),
          tape.param(*v.weight), nn::bind(tape, v.bias), tape.param(*o.weight), nn::bind(tape, o.bias)};
}

}  // namespace d2etr::attn
