// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/backbone.hpp"

#include "d2etr/flops.hpp"
#include "d2etr/ops.hpp"

namespace d2etr {

using ad::Var;

int PyramidConfig::stride_of(int stage) const {
  int s = 1;
  for (int i = 0; i < stage; ++i) s *= stages.at(i).patch_stride;
  return s;
}

int PyramidConfig::grid_of(int stage) const {
  int side = image_size;
  for (int i = 0; i < stage; ++i) {
    side = PatchEmbedGeometry::for_stride(stages.at(i).patch_stride).output_size(side);
  }
  return side;
}

void PyramidConfig::validate() const {
  if (stages.empty()) throw ConfigError("backbone: at least one stage required");
  if (image_size <= 0 || in_channels <= 0) throw ConfigError("backbone: image_size and in_channels must be positive");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const StageConfig& s = stages[i];
    const std::string at = "stage" + std::to_string(i + 1);
    if (s.patch_stride != 2 && s.patch_stride != 4) throw ConfigError(at + ": patch_stride must be 2 or 4");
    if (s.depth < 0 || s.channels <= 0 || s.sr_pool <= 0 || s.mlp_ratio <= 0)
      throw ConfigError(at + ": depth, channels, sr_pool, mlp_ratio must be positive");
    attn::AttentionConfig{s.channels, s.heads}.validate();
    if (i > 0 && s.patch_stride != 2) throw ConfigError(at + ": stages after the first downsample by 2");
  }
  if (fuse_start_level < 1 || fuse_start_level > num_stages())
    throw ConfigError("backbone: fuse_start_level must lie in [1, number of stages]");
  if (fuse_width <= 0 || fuse_depth < 0 || fuse_pool <= 0 || fuse_mlp_ratio <= 0)
    throw ConfigError("backbone: fusing width, depth, pool and mlp ratio must be positive");
  attn::AttentionConfig{fuse_width, fuse_heads}.validate();
  if (!(norm_eps > 0)) throw ConfigError("backbone: norm_eps must be positive");
  const int k = PatchEmbedGeometry::for_stride(stages[0].patch_stride).kernel;
  if (image_size < k) throw ConfigError("backbone: image smaller than the first patch kernel");
}

PyramidConfig PyramidConfig::toy() {
  PyramidConfig c;
  c.image_size = 64;
  c.stages = {{1, 16, 1, 4, 7, 4}, {1, 32, 1, 2, 7, 4}, {1, 64, 2, 2, 7, 4}, {1, 128, 4, 2, 7, 4}};
  c.fuse_width = 32;
  c.fuse_depth = 2;
  c.fuse_heads = 1;
  c.fuse_pool = 7;
  c.fuse_start_level = 1;
  return c;
}

PatchEmbedGeometry PatchEmbedGeometry::for_stride(int stride) { return {2 * stride - 1, stride - 1}; }

int PatchEmbedGeometry::output_size(int input) const {
  const int stride = (kernel + 1) / 2;
  return (input + 2 * padding - kernel) / stride + 1;
}

FeatureMap patch_embed(Var x, Var weight, Var bias, Var gamma, Var beta, int stride, double eps) {
  if (stride != 2 && stride != 4) throw ConfigError("patch_embed: stride must be 2 or 4");
  const auto geo = PatchEmbedGeometry::for_stride(stride);
  if (x.dim(1) < geo.kernel || x.dim(2) < geo.kernel) {
    throw ShapeError("patch_embed: input " + to_string(x.shape()) + " smaller than kernel " +
                     std::to_string(geo.kernel));
  }
  Var y = ad::conv2d(x, weight, bias, stride, geo.padding);
  FeatureMap out;
  out.h = y.dim(1);
  out.w = y.dim(2);
  out.tokens = ad::layer_norm(ad::map_to_tokens(y), gamma, beta, eps);
  return out;
}

Backbone::Backbone(ad::ParameterStore& store, PyramidConfig cfg, nn::Init& init) : cfg_(std::move(cfg)) {
  cfg_.validate();
  int in = cfg_.in_channels;
  for (int i = 0; i < cfg_.num_stages(); ++i) {
    const StageConfig& sc = cfg_.stages[i];
    const std::string name = "stage" + std::to_string(i + 1);
    const auto geo = PatchEmbedGeometry::for_stride(sc.patch_stride);
    Stage st{};
    st.embed_weight = &store.add(name + ".patch_embed.weight", init.orthogonal({sc.channels, in, geo.kernel, geo.kernel}));
    st.embed_bias = &store.add(name + ".patch_embed.bias", Tensor({sc.channels}, 0.0));
    st.embed_norm = nn::LayerNorm::create(store, name + ".patch_embed.norm", sc.channels, cfg_.norm_eps);
    for (int j = 0; j < sc.depth; ++j) {
      st.blocks.emplace_back(store, name + ".block" + std::to_string(j), sc.channels, sc.heads, sc.mlp_ratio, 1,
                             sc.sr_pool, cfg_.norm_eps, init);
    }
    st.norm = nn::LayerNorm::create(store, name + ".norm", sc.channels, cfg_.norm_eps);
    stages_.push_back(std::move(st));
    in = sc.channels;
  }
  for (int i = cfg_.fuse_start_level; i <= cfg_.num_stages(); ++i) {
    const int k = i - cfg_.fuse_start_level;  // number of fused predecessors
    const std::string name = "fuse" + std::to_string(i);
    FuseStage fs{};
    fs.proj = nn::Linear::create(store, name + ".proj", cfg_.stages[i - 1].channels, cfg_.fuse_width, init);
    if (cfg_.fusion) {
      for (int j = 0; j < cfg_.fuse_depth; ++j) {
        fs.blocks.emplace_back(store, name + ".block" + std::to_string(j), cfg_.fuse_width, cfg_.fuse_heads,
                               cfg_.fuse_mlp_ratio, k + 1, cfg_.fuse_pool, cfg_.norm_eps, init,
                               cfg_.normalized_query_key);
      }
      fs.norm = nn::LayerNorm::create(store, name + ".norm", cfg_.fuse_width, cfg_.norm_eps);
    }
    fuse_.push_back(std::move(fs));
  }
  if (!cfg_.extra_level) return;
  extra_weight_ = &store.add("extra.conv.weight", init.orthogonal({cfg_.fuse_width, cfg_.fuse_width, 3, 3}));
  extra_bias_ = &store.add("extra.conv.bias", Tensor({cfg_.fuse_width}, 0.0));
}

BackboneOutput Backbone::forward(Var image) const {
  ad::Tape& tape = *image.tape;
  if (image.value().shape() != Shape{cfg_.in_channels, cfg_.image_size, cfg_.image_size}) {
    throw ShapeError("backbone: expected image " +
                     to_string({cfg_.in_channels, cfg_.image_size, cfg_.image_size}) + ", got " +
                     to_string(image.shape()));
  }
  BackboneOutput out;
  Var map = image;
  for (int i = 0; i < cfg_.num_stages(); ++i) {
    const Stage& st = stages_[i];
    const StageConfig& sc = cfg_.stages[i];
    const int level = i + 1;
    FeatureMap x;
    {
      flops::FlopLabel label("stage" + std::to_string(level));
      x = patch_embed(map, tape.param(*st.embed_weight), tape.param(*st.embed_bias), tape.param(*st.embed_norm.gamma),
                      tape.param(*st.embed_norm.beta), sc.patch_stride, cfg_.norm_eps);
      x.stride = cfg_.stride_of(level);
      x.scale = level;
      for (std::size_t j = 0; j < st.blocks.size(); ++j) {
        flops::FlopLabel block("block" + std::to_string(j));
        x = st.blocks[j].forward(x);
      }
      x.tokens = st.norm(x.tokens);
    }
    out.raw.push_back(x);
    map = ad::tokens_to_map(x.tokens, x.h, x.w);

    if (level < cfg_.fuse_start_level) continue;
    const FuseStage& fs = fuse_[level - cfg_.fuse_start_level];
    flops::FlopLabel label("fuse" + std::to_string(level));
    FeatureMap q;
    {
      flops::FlopLabel proj("proj");
      q = x.with_tokens(fs.proj(x.tokens));
    }
    if (cfg_.fusion) {
      // Previously fused maps are keys only and stay untouched.
      for (std::size_t j = 0; j < fs.blocks.size(); ++j) {
        flops::FlopLabel block("block" + std::to_string(j));
        q = fs.blocks[j].forward(q, out.fused);
      }
      flops::FlopLabel norm("norm");
      q.tokens = fs.norm(q.tokens);
    }
    out.fused.push_back(q);  // coarser than every predecessor: order stays stride-ascending
  }
  return out;
}

FeatureMap Backbone::extra_scale(const FeatureMap& last) const {
  if (extra_weight_ == nullptr) throw ConfigError("backbone: extra scale disabled in this configuration");
  ad::Tape& tape = *last.tokens.tape;
  flops::FlopLabel label("extra");
  Var map = ad::tokens_to_map(last.tokens, last.h, last.w);
  Var y = ad::conv2d(map, tape.param(*extra_weight_), tape.param(*extra_bias_), 2, 1);
  FeatureMap out;
  out.h = y.dim(1);
  out.w = y.dim(2);
  out.tokens = ad::map_to_tokens(y);
  out.stride = last.stride * 2;
  out.scale = last.scale + 1;
  return out;
}

}  // namespace d2etr
