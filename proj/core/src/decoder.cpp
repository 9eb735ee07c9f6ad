// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "d2etr/flops.hpp"
#include "d2etr/ops.hpp"

namespace d2etr {

using ad::Var;
using flops::FlopLabel;

void DecoderConfig::validate() const {
  if (layers < 1) throw ConfigError("decoder.layers must be >= 1");
  if (queries < 1) throw ConfigError("decoder.queries must be >= 1");
  if (num_classes < 1) throw ConfigError("decoder.num_classes must be >= 1");
  if (mlp_ratio < 1) throw ConfigError("decoder.mlp_ratio must be >= 1");
  if (channels % 4 != 0) throw ConfigError("decoder.channels must be a multiple of 4");
  attn::AttentionConfig{channels, heads}.validate();
  if (alpha < 0 || beta < 0 || alpha + beta > 1.0)
    throw ConfigError("decoder: alpha and beta must be >= 0 with alpha + beta <= 1");
  if (memory_start_stride < 1) throw ConfigError("decoder.memory_start_stride must be positive");
  if (!(norm_eps > 0)) throw ConfigError("decoder.norm_eps must be positive");
}

Tensor ObjectQuerySet::reference_points() const {
  if (!ref_logits.valid()) return {};
  Tensor out = ref_logits.value();
  for (double& v : out.data()) v = ad::sigmoid_value(v);
  return out;
}

Tensor sine_position_encoding(int h, int w, int channels) {
  if (h <= 0 || w <= 0) throw ShapeError("sine_position_encoding: grid must be non-empty");
  if (channels % 4 != 0) throw ConfigError("sine_position_encoding: channels must be a multiple of 4");
  const int half = channels / 2;
  const int freqs = half / 2;
  Tensor out({h * w, channels});
  for (int i = 0; i < h; ++i) {
    const double y = 2.0 * std::numbers::pi * (i + 0.5) / h;
    for (int j = 0; j < w; ++j) {
      const double x = 2.0 * std::numbers::pi * (j + 0.5) / w;
      double* row = out.ptr() + static_cast<std::size_t>(i * w + j) * channels;
      for (int f = 0; f < freqs; ++f) {
        const double div = std::pow(10000.0, 2.0 * f / half);
        row[2 * f] = std::sin(y / div);
        row[2 * f + 1] = std::cos(y / div);
        row[half + 2 * f] = std::sin(x / div);
        row[half + 2 * f + 1] = std::cos(x / div);
      }
    }
  }
  return out;
}

Var decoder_layer(Var queries, Var query_pos, Var memory, Var memory_pos, const DecoderLayerWeights& w,
                  const attn::AttentionConfig& cfg, double eps, attn::AttentionTrace* cross_trace) {
  if (memory.value().rank() != 2 || memory.dim(0) == 0) throw ShapeError("decoder_layer: empty memory");
  Var x = queries;
  {
    FlopLabel l("self_attn");
    Var n = ad::layer_norm(x, w.norm1_gamma, w.norm1_beta, eps);
    Var qk = ad::add(n, query_pos);
    x = ad::add(x, attn::multi_head_attention(qk, qk, n, w.self_attn, cfg));
  }
  {
    FlopLabel l("cross_attn");
    Var n = ad::layer_norm(x, w.norm2_gamma, w.norm2_beta, eps);
    Var keys = memory_pos.valid() ? ad::add(memory, memory_pos) : memory;
    x = ad::add(x, attn::multi_head_attention(ad::add(n, query_pos), keys, memory, w.cross_attn, cfg, cross_trace));
  }
  FlopLabel l("ffn");
  Var n = ad::layer_norm(x, w.norm3_gamma, w.norm3_beta, eps);
  return ad::add(x, attn::feed_forward(n, w.ffn, nullptr));
}

Decoder::Decoder(ad::ParameterStore& store, DecoderConfig cfg, int memory_levels, nn::Init& init)
    : cfg_(std::move(cfg)), memory_levels_(memory_levels) {
  cfg_.validate();
  if (memory_levels_ < 1) throw ConfigError("decoder: at least one memory level required");
  const int n = cfg_.queries, c = cfg_.channels, k = cfg_.num_classes;
  query_content_ = &store.add("decoder.query.content", init.normal({n, c}, 1.0));
  query_pos_ = &store.add("decoder.query.pos", init.normal({n, c}, 1.0));
  if (cfg_.reference_points) {
    Tensor ref = init.uniform({n, 2}, 0.05, 0.95);
    for (double& v : ref.data()) v = std::log(v / (1.0 - v));
    ref_logits_ = &store.add("decoder.query.ref", std::move(ref));
  }
  if (memory_levels_ > 1) level_embed_ = &store.add("decoder.level_embed", init.normal({memory_levels_, c}, 1.0));
  const double prior_bias = -std::log((1.0 - 0.01) / 0.01);
  for (int i = 0; i < cfg_.layers; ++i) {
    const std::string p = "decoder.layer" + std::to_string(i);
    Layer l;
    l.norm1 = nn::LayerNorm::create(store, p + ".norm1", c, cfg_.norm_eps);
    l.self_attn = attn::AttentionModule::create(store, p + ".self_attn", {c, cfg_.heads}, init);
    l.norm2 = nn::LayerNorm::create(store, p + ".norm2", c, cfg_.norm_eps);
    l.cross_attn = attn::AttentionModule::create(store, p + ".cross_attn", {c, cfg_.heads}, init);
    l.norm3 = nn::LayerNorm::create(store, p + ".norm3", c, cfg_.norm_eps);
    l.fc1 = nn::Linear::create(store, p + ".mlp.fc1", c, c * cfg_.mlp_ratio, init);
    l.fc2 = nn::Linear::create(store, p + ".mlp.fc2", c * cfg_.mlp_ratio, c, init);
    layers_.push_back(l);
    const std::string hp = "decoder.head" + std::to_string(i);
    Heads h;
    h.cls = nn::Linear::create(store, hp + ".class", c, k, init);
    for (double& v : h.cls.bias->value.data()) v = prior_bias;
    h.box1 = nn::Linear::create(store, hp + ".box.fc1", c, c, init);
    h.box2 = nn::Linear::create(store, hp + ".box.fc2", c, 4, init);
    h.iou = nn::Linear::create(store, hp + ".iou", c, 1, init);
    h.ctr = nn::Linear::create(store, hp + ".ctr", c, 1, init);
    heads_.push_back(h);
  }
  final_norm_ = nn::LayerNorm::create(store, "decoder.norm", c, cfg_.norm_eps);
}

ObjectQuerySet Decoder::bind_queries(ad::Tape& tape) const {
  return {tape.param(*query_content_), tape.param(*query_pos_), nn::bind(tape, ref_logits_)};
}

DecoderLayerWeights Decoder::bind_layer(ad::Tape& tape, int layer) const {
  const Layer& l = layers_.at(layer);
  DecoderLayerWeights w;
  w.norm1_gamma = tape.param(*l.norm1.gamma);
  w.norm1_beta = tape.param(*l.norm1.beta);
  w.self_attn = l.self_attn.bind(tape);
  w.norm2_gamma = tape.param(*l.norm2.gamma);
  w.norm2_beta = tape.param(*l.norm2.beta);
  w.cross_attn = l.cross_attn.bind(tape);
  w.norm3_gamma = tape.param(*l.norm3.gamma);
  w.norm3_beta = tape.param(*l.norm3.beta);
  w.ffn = {tape.param(*l.fc1.weight), nn::bind(tape, l.fc1.bias), tape.param(*l.fc2.weight),
           nn::bind(tape, l.fc2.bias), {}, {}};
  return w;
}

LayerPrediction Decoder::apply_heads(Var hidden, const Heads& h, const ObjectQuerySet& q) const {
  FlopLabel label("heads");
  LayerPrediction p;
  p.hidden = hidden;
  Var y = final_norm_(hidden);
  p.class_logits = h.cls(y);
  Var box = h.box2(ad::gelu(h.box1(y)));
  if (q.ref_logits.valid()) {
    // Reference points anchor the predicted centers.
    Var zeros = hidden.tape->constant(Tensor({q.size(), 2}, 0.0));
    box = ad::add(box, ad::concat_cols({q.ref_logits, zeros}));
  }
  p.boxes = ad::sigmoid(box);
  p.iou_logits = h.iou(y);
  p.ctr_logits = h.ctr(y);
  return p;
}

DecoderOutput Decoder::forward(const FeaturePyramid& memory, ad::Tape& tape, bool trace) const {
  if (static_cast<int>(memory.size()) != memory_levels_) {
    throw ConfigError("decoder: built for " + std::to_string(memory_levels_) + " memory scales, got " +
                      std::to_string(memory.size()));
  }
  FlopLabel label("decoder");
  DecoderOutput out;
  std::vector<Var> tokens, pos;
  int offset = 0;
  Var level = nn::bind(tape, level_embed_);
  for (std::size_t j = 0; j < memory.size(); ++j) {
    const FeatureMap& m = memory[j];
    if (m.channels() != cfg_.channels) {
      throw ShapeError("decoder: memory width " + std::to_string(m.channels()) + " != decoder width " +
                       std::to_string(cfg_.channels));
    }
    tokens.push_back(m.tokens);
    Var p = tape.constant(sine_position_encoding(m.h, m.w, cfg_.channels));
    if (level.valid()) {
      Var row = ad::reshape(ad::slice_rows(level, static_cast<int>(j), static_cast<int>(j) + 1), {cfg_.channels});
      p = ad::add_row(p, row);
    }
    pos.push_back(p);
    out.memory.push_back({offset, m.size(), m.stride, m.scale});
    offset += m.size();
  }
  Var mem = tokens.size() == 1 ? tokens[0] : ad::concat_rows(tokens);
  Var mem_pos = pos.size() == 1 ? pos[0] : ad::concat_rows(pos);

  const ObjectQuerySet q = bind_queries(tape);
  out.reference_points = q.reference_points();
  const attn::AttentionConfig acfg{cfg_.channels, cfg_.heads};
  Var x = q.content;
  for (int i = 0; i < cfg_.layers; ++i) {
    FlopLabel layer("layer" + std::to_string(i));
    attn::AttentionTrace tr;
    x = decoder_layer(x, q.position, mem, mem_pos, bind_layer(tape, i), acfg, cfg_.norm_eps, trace ? &tr : nullptr);
    if (trace) out.cross_attention.push_back(tr.mean_over_heads());
    out.layers.push_back(apply_heads(x, heads_[i], q));
  }
  return out;
}

double compute_centerness(double ref_x, double ref_y, const Corners& box) {
  if (box.degenerate()) return 0.0;
  const double l = ref_x - box.x1, r = box.x2 - ref_x;
  const double t = ref_y - box.y1, b = box.y2 - ref_y;
  if (!(l > 0 && r > 0 && t > 0 && b > 0)) return 0.0;
  return std::sqrt((std::min(l, r) / std::max(l, r)) * (std::min(t, b) / std::max(t, b)));
}

namespace {

double pow0(double base, double exponent) { return exponent == 0.0 ? 1.0 : std::pow(base, exponent); }

}  // namespace

double location_aware_score(double cls, double iou_pred, double ctr_pred, double alpha, double beta) {
  if (alpha < 0 || beta < 0 || alpha + beta > 1.0)
    throw ConfigError("location_aware_score: need alpha, beta >= 0 and alpha + beta <= 1");
  return pow0(cls, 1.0 - alpha - beta) * pow0(iou_pred, alpha) * pow0(ctr_pred, beta);
}

std::vector<Detection> postprocess(const DecoderOutput& out, const DecoderConfig& cfg, int top_k,
                                   int image_size) {
  const LayerPrediction& p = out.last();
  const Tensor& logits = p.class_logits.value();
  const Tensor& boxes = p.boxes.value();
  const int n = logits.dim(0), k = logits.dim(1);
  const double beta = cfg.effective_beta();
  std::vector<Detection> all;
  all.reserve(static_cast<std::size_t>(n) * k);
  for (int q = 0; q < n; ++q) {
    const double iou_p = ad::sigmoid_value(p.iou_logits.value()[q]);
    const double ctr_p = ad::sigmoid_value(p.ctr_logits.value()[q]);
    const BBox b{boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)};
    Corners c = b.corners();
    c = {c.x1 * image_size, c.y1 * image_size, c.x2 * image_size, c.y2 * image_size};
    for (int cls = 0; cls < k; ++cls) {
      const double s = location_aware_score(ad::sigmoid_value(logits.at(q, cls)), iou_p, ctr_p, cfg.alpha, beta);
      all.push_back({q, cls, s, c});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (top_k >= 0 && static_cast<std::size_t>(top_k) < all.size()) all.resize(top_k);
  return all;
}

}  // namespace d2etr
