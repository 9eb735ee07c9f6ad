// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Two-stream pyramid backbone: normal transformer stages build a shrinking
// pyramid x_1..x_S; parallel fusing stages turn each x_i into x_i* by
// attending from x_i (the only query scale) to pooled keys of every
// previously fused map plus x_i itself.

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "d2etr/attention.hpp"
#include "d2etr/feature_map.hpp"
#include "d2etr/nn.hpp"

namespace d2etr {

struct StageConfig {
  int depth = 1;
  int channels = 16;
  int heads = 1;
  int patch_stride = 2;
  int sr_pool = 7;
  int mlp_ratio = 4;
};

struct PyramidConfig {
  int image_size = 64;
  int in_channels = 3;
  std::vector<StageConfig> stages;
  int fuse_width = 32;
  int fuse_depth = 2;
  int fuse_heads = 1;
  int fuse_mlp_ratio = 4;
  int fuse_pool = 7;
  int fuse_start_level = 1;  ///< 1-based; stages at or above it are fused
  bool fusion = true;        ///< false: project raw x_i only (ablation)
  bool normalized_query_key = false;
  bool extra_level = true;   ///< build the stride-2 conv that adds one coarser scale
  double norm_eps = 1e-6;

  int num_stages() const { return static_cast<int>(stages.size()); }
  int num_fused() const { return num_stages() - fuse_start_level + 1; }
  int stride_of(int stage) const;  ///< 1-based
  int grid_of(int stage) const;    ///< side length of x_stage
  void validate() const;

  /// 4 stages, channels (16,32,64,128), depth 1 each, fusing width 32, depth 2, 64x64 input.
  static PyramidConfig toy();
};

/// Overlapping patch embedding geometry: kernel 2s-1, padding s-1.
struct PatchEmbedGeometry {
  int kernel;
  int padding;
  static PatchEmbedGeometry for_stride(int stride);
  int output_size(int input) const;
};

/// Strided overlapping conv + layer norm. `x` is [C_in, H, W].
FeatureMap patch_embed(ad::Var x, ad::Var weight, ad::Var bias, ad::Var gamma, ad::Var beta, int stride,
                       double eps);

struct BackboneOutput {
  std::vector<FeatureMap> raw;  ///< x_1..x_S, stage widths
  FeaturePyramid fused;         ///< x_{start}*..x_S*, fusing width, stride-ascending
};

class Backbone {
 public:
  Backbone(ad::ParameterStore& store, PyramidConfig cfg, nn::Init& init);

  /// `image` is [in_channels, image_size, image_size].
  BackboneOutput forward(ad::Var image) const;
  /// Stride-2 3x3 convolution of the last fused map.
  FeatureMap extra_scale(const FeatureMap& last) const;

  const PyramidConfig& config() const { return cfg_; }

 private:
  struct Stage {
    ad::Parameter* embed_weight;
    ad::Parameter* embed_bias;
    nn::LayerNorm embed_norm;
    std::vector<attn::TransformerBlock> blocks;
    nn::LayerNorm norm;
  };
  struct FuseStage {
    nn::Linear proj;
    std::vector<attn::TransformerBlock> blocks;
    nn::LayerNorm norm;
  };

  PyramidConfig cfg_;
  std::vector<Stage> stages_;
  std::vector<FuseStage> fuse_;
  ad::Parameter* extra_weight_ = nullptr;
  ad::Parameter* extra_bias_ = nullptr;
};

}  // namespace d2etr
