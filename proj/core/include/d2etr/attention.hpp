// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Attention building blocks: multi-head attention, the (convolutional)
// feed-forward network, per-scale spatial reduction of keys, and the
// pre-norm transformer block shared by normal stages and fusing stages.

#pragma once

#include <string>
#include <vector>

#include "d2etr/feature_map.hpp"
#include "d2etr/nn.hpp"

namespace d2etr::attn {

struct AttentionConfig {
  int channels = 0;
  int heads = 1;

  int head_dim() const { return channels / heads; }
  /// 1 / sqrt(channels / heads)
  double scale() const;
  void validate() const;
};

/// Attention projections bound on a tape. Biases may be invalid Vars.
struct AttentionWeights {
  ad::Var wq, bq, wk, bk, wv, bv, wo, bo;
};

/// Softmax weights captured per head, each [L_q, L_k].
struct AttentionTrace {
  std::vector<Tensor> heads;

  /// Mean over heads of the attention weights, [L_q, L_k].
  Tensor mean_over_heads() const;
};

/// softmax(q Wq (k Wk)^T / sqrt(d_h)) v Wv per head; heads concatenated and
/// projected by Wo. Throws ShapeError when there are no keys.
ad::Var multi_head_attention(ad::Var q, ad::Var k, ad::Var v, const AttentionWeights& w,
                             const AttentionConfig& cfg, AttentionTrace* trace = nullptr);

struct FfnWeights {
  ad::Var w1, b1, w2, b2;
  ad::Var dw_kernel, dw_bias;  ///< set for the convolutional variant
  bool convolutional() const { return dw_kernel.valid(); }
};

/// Spatial grid of a token sequence, needed by the convolutional variant.
struct Grid {
  int h = 0;
  int w = 0;
};

/// Expansion, [depthwise 3x3], GELU, projection back. `grid` is required in
/// convolutional mode (ConfigError otherwise).
ad::Var feed_forward(ad::Var x, const FfnWeights& w, const Grid* grid);

/// 1x1 projection and norm applied to one pooled key scale.
struct ScaleProjection {
  ad::Var w, b, gamma, beta;
};

/// Concat over scales of GELU(Norm_j(Pool(x_j) W_j)); output [scales * P^2, C].
ad::Var spatial_reduce(const std::vector<FeatureMap>& keys,
                       const std::vector<ScaleProjection>& projections, int pool, double eps);

struct BlockWeights {
  ad::Var norm1_gamma, norm1_beta;
  AttentionWeights attn;
  std::vector<ScaleProjection> sr;  ///< one per key scale: predecessors first, own scale last
  ad::Var norm2_gamma, norm2_beta;
  FfnWeights ffn;
};

struct BlockOptions {
  AttentionConfig attention;
  int pool = 7;
  double eps = 1e-6;
  /// Feed Norm(x) instead of raw x into the own-scale key slot.
  bool normalized_query_key = false;
};

/// A = MHA(Norm1(x), SR(prev + {x})) + x;  out = FFN(Norm2(A)) + A.
/// With `prev` empty this is the single-scale spatial-reduction block.
FeatureMap fusing_layer(const FeatureMap& x, const std::vector<FeatureMap>& prev,
                        const BlockWeights& w, const BlockOptions& opt,
                        AttentionTrace* trace = nullptr);

/// Intra-scale block of a normal stage.
FeatureMap sra_block(const FeatureMap& x, const BlockWeights& w, const BlockOptions& opt);

/// Parameter-owning transformer block, named "<prefix>.*".
class TransformerBlock {
 public:
  TransformerBlock(ad::ParameterStore& store, const std::string& prefix, int channels, int heads,
                   int mlp_ratio, int key_scales, int pool, double eps, nn::Init& init,
                   bool normalized_query_key = false);

  FeatureMap forward(const FeatureMap& x, const std::vector<FeatureMap>& prev = {},
                     AttentionTrace* trace = nullptr) const;
  BlockWeights bind(ad::Tape& tape) const;
  const BlockOptions& options() const { return opt_; }
  int key_scales() const { return static_cast<int>(sr_proj_.size()); }

 private:
  BlockOptions opt_;
  nn::LayerNorm norm1_, norm2_;
  nn::Linear q_, k_, v_, o_;
  std::vector<nn::Linear> sr_proj_;
  std::vector<nn::LayerNorm> sr_norm_;
  nn::Linear fc1_, fc2_;
  ad::Parameter* dw_kernel_ = nullptr;
  ad::Parameter* dw_bias_ = nullptr;
};

/// Binds the four attention projections of a layer named "<prefix>.{q,k,v,proj}".
struct AttentionModule {
  nn::Linear q, k, v, o;
  AttentionConfig cfg;

  static AttentionModule create(ad::ParameterStore& store, const std::string& prefix,
                                AttentionConfig cfg, nn::Init& init);
  AttentionWeights bind(ad::Tape& tape) const;
};

}  // namespace d2etr::attn
