// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Set-prediction decoder: learned object queries refined by self-attention,
// cross-attention into the fused pyramid and a feed-forward layer, with
// class, box, IoU and centerness heads on every layer's output.

#pragma once

#include <string>
#include <vector>

#include "d2etr/attention.hpp"
#include "d2etr/box.hpp"
#include "d2etr/feature_map.hpp"
#include "d2etr/nn.hpp"

namespace d2etr {

enum class MemoryMode {
  kLastScale,   ///< coarsest fused map only
  kMultiScale,  ///< fused maps from `memory_start_stride` upward plus the extra stride-2 scale
};

struct DecoderConfig {
  int layers = 3;
  int queries = 25;
  int channels = 32;
  int heads = 2;
  int mlp_ratio = 4;
  int num_classes = 2;
  MemoryMode memory = MemoryMode::kMultiScale;
  int memory_start_stride = 8;
  bool reference_points = true;
  bool centerness = true;  ///< only honoured with reference points
  double alpha = 0.45;
  double beta = 0.05;
  double norm_eps = 1e-6;

  /// beta as used for scoring: 0 without reference points.
  double effective_beta() const { return centerness_enabled() ? beta : 0.0; }
  bool centerness_enabled() const { return reference_points && centerness; }
  void validate() const;
};

/// Learned query content, positional embeddings and optional reference points.
struct ObjectQuerySet {
  ad::Var content;     ///< [N, C]
  ad::Var position;    ///< [N, C]
  ad::Var ref_logits;  ///< [N, 2] or invalid

  int size() const { return content.dim(0); }
  /// Sigmoid of the reference logits, [N, 2] in the unit square.
  Tensor reference_points() const;
};

/// Heads of one decoder layer.
struct LayerPrediction {
  ad::Var hidden;        ///< [N, C]
  ad::Var class_logits;  ///< [N, K]
  ad::Var boxes;         ///< [N, 4] (cx, cy, w, h) in (0,1)
  ad::Var iou_logits;    ///< [N, 1]
  ad::Var ctr_logits;    ///< [N, 1]
};

/// Token layout of the cross-attention memory.
struct MemoryLevel {
  int begin = 0;
  int tokens = 0;
  int stride = 0;
  int scale = 0;
};

struct DecoderOutput {
  std::vector<LayerPrediction> layers;
  Tensor reference_points;                   ///< [N, 2], empty without reference points
  std::vector<MemoryLevel> memory;           ///< per memory scale
  std::vector<Tensor> cross_attention;       ///< per layer, head-mean [N, L]; filled when traced
  const LayerPrediction& last() const { return layers.back(); }
};

/// Fixed 2-D sine encoding of an h x w grid at half-pixel normalized
/// coordinates: first C/2 channels for y, the rest for x. C must be a multiple of 4.
Tensor sine_position_encoding(int h, int w, int channels);

/// Parameters of one decoder layer bound on a tape.
struct DecoderLayerWeights {
  ad::Var norm1_gamma, norm1_beta;
  attn::AttentionWeights self_attn;
  ad::Var norm2_gamma, norm2_beta;
  attn::AttentionWeights cross_attn;
  ad::Var norm3_gamma, norm3_beta;
  attn::FfnWeights ffn;
};

/// Pre-norm layer: self-attention among queries, cross-attention into
/// `memory` (keys carry `memory_pos`), feed-forward; each with a residual.
/// Throws ShapeError on empty memory.
ad::Var decoder_layer(ad::Var queries, ad::Var query_pos, ad::Var memory, ad::Var memory_pos,
                      const DecoderLayerWeights& w, const attn::AttentionConfig& cfg, double eps,
                      attn::AttentionTrace* cross_trace = nullptr);

class Decoder {
 public:
  Decoder(ad::ParameterStore& store, DecoderConfig cfg, int memory_levels, nn::Init& init);

  /// Runs all layers over the selected memory scales; `trace` records cross-attention.
  DecoderOutput forward(const FeaturePyramid& memory, ad::Tape& tape, bool trace = false) const;
  ObjectQuerySet bind_queries(ad::Tape& tape) const;
  DecoderLayerWeights bind_layer(ad::Tape& tape, int layer) const;
  const DecoderConfig& config() const { return cfg_; }
  int memory_levels() const { return memory_levels_; }

 private:
  struct Layer {
    nn::LayerNorm norm1, norm2, norm3;
    attn::AttentionModule self_attn, cross_attn;
    nn::Linear fc1, fc2;
  };
  struct Heads {
    nn::Linear cls, box1, box2, iou, ctr;
  };
  LayerPrediction apply_heads(ad::Var hidden, const Heads& h, const ObjectQuerySet& q) const;

  DecoderConfig cfg_;
  int memory_levels_;
  ad::Parameter* query_content_ = nullptr;
  ad::Parameter* query_pos_ = nullptr;
  ad::Parameter* ref_logits_ = nullptr;
  ad::Parameter* level_embed_ = nullptr;
  std::vector<Layer> layers_;
  std::vector<Heads> heads_;
  nn::LayerNorm final_norm_;
};

/// Centerness of a reference point in a box:
/// sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)) inside the box, else 0.
/// Degenerate boxes give 0.
double compute_centerness(double ref_x, double ref_y, const Corners& box);

/// CLS^(1-a-b) * IoU^a * CTR^b with 0^0 = 1. Throws ConfigError unless
/// a, b >= 0 and a + b <= 1.
double location_aware_score(double cls, double iou_pred, double ctr_pred, double alpha, double beta);

struct Detection {
  int query = 0;
  int label = 0;
  double score = 0.0;
  Corners box;  ///< pixels
};

/// Top-k (query, class) pairs of the last layer by fused score. No
/// duplicate suppression.
std::vector<Detection> postprocess(const DecoderOutput& out, const DecoderConfig& cfg, int top_k,
                                   int image_size);

}  // namespace d2etr
