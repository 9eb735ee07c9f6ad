// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Full detector: fusing backbone, memory selection, decoder and the
// training-only token labeling head.

#pragma once

#include <memory>
#include <vector>

#include "d2etr/backbone.hpp"
#include "d2etr/decoder.hpp"
#include "d2etr/losses.hpp"

namespace d2etr {

struct DetectorConfig {
  PyramidConfig backbone = PyramidConfig::toy();
  DecoderConfig decoder;
  LossOptions loss;  ///< centerness follows the decoder; token follows token_labeling
  bool token_labeling = true;
  std::uint64_t init_seed = 0;

  void validate() const;
  /// Multi-scale memory (strides >= 8 plus the extra level), reference points on.
  static DetectorConfig toy();
};

struct DetectorOutput {
  BackboneOutput backbone;
  FeaturePyramid memory;
  DecoderOutput decoder;
  std::vector<ad::Var> token_logits;  ///< per fused scale, [h*w, K]; training only
  std::vector<attn::Grid> token_grids;
};

struct StepResult {
  double cls = 0, bbox = 0, awr = 0, token = 0, total = 0;
};

class Detector {
 public:
  explicit Detector(DetectorConfig cfg);

  /// `image` is [3, S, S]; `training` adds the token head.
  DetectorOutput forward(ad::Tape& tape, const Tensor& image, bool training, bool trace = false) const;

  /// Forward, freeze matching targets, build the loss. `frozen` may carry
  /// targets from an earlier evaluation; it is filled when empty.
  LossTerms loss(ad::Tape& tape, const Tensor& image, const ImageTargets& targets, FrozenTargets& frozen) const;

  /// Forward + backward of one sample; adds `grad_scale` times the gradient
  /// into each Parameter::grad.
  StepResult accumulate(const Tensor& image, const ImageTargets& targets, double grad_scale) const;

  std::vector<Detection> detect(const Tensor& image, int top_k) const;

  ad::ParameterStore& params() { return *store_; }
  const ad::ParameterStore& params() const { return *store_; }
  const DetectorConfig& config() const { return cfg_; }
  const Backbone& backbone() const { return *backbone_; }
  const Decoder& decoder() const { return *decoder_; }
  LossOptions loss_options() const;

 private:
  DetectorConfig cfg_;
  std::unique_ptr<ad::ParameterStore> store_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<Decoder> decoder_;
  nn::Linear token_head_;
};

/// Memory scales fed to the decoder for a given backbone output.
int memory_level_count(const DetectorConfig& cfg);

}  // namespace d2etr
