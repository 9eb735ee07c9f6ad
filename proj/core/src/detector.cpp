// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/detector.hpp"

#include "d2etr/flops.hpp"
#include "d2etr/ops.hpp"

namespace d2etr {

void DetectorConfig::validate() const {
  backbone.validate();
  decoder.validate();
  loss.weights.validate();
  if (decoder.channels != backbone.fuse_width) {
    throw ConfigError("decoder.channels (" + std::to_string(decoder.channels) + ") must equal backbone.fuse_width (" +
                      std::to_string(backbone.fuse_width) + ")");
  }
  if (memory_level_count(*this) < 1) throw ConfigError("decoder.memory_start_stride leaves no memory scales");
}

DetectorConfig DetectorConfig::toy() {
  DetectorConfig c;
  c.backbone = PyramidConfig::toy();
  c.decoder = DecoderConfig{};
  return c;
}

int memory_level_count(const DetectorConfig& cfg) {
  if (cfg.decoder.memory == MemoryMode::kLastScale) return 1;
  int n = 0;
  for (int level = cfg.backbone.fuse_start_level; level <= cfg.backbone.num_stages(); ++level) {
    if (cfg.backbone.stride_of(level) >= cfg.decoder.memory_start_stride) ++n;
  }
  return n + 1;  // extra level
}

Detector::Detector(DetectorConfig cfg) : cfg_(std::move(cfg)), store_(std::make_unique<ad::ParameterStore>()) {
  cfg_.backbone.extra_level = cfg_.decoder.memory == MemoryMode::kMultiScale;
  cfg_.validate();
  nn::Init init(cfg_.init_seed);
  backbone_ = std::make_unique<Backbone>(*store_, cfg_.backbone, init);
  decoder_ = std::make_unique<Decoder>(*store_, cfg_.decoder, memory_level_count(cfg_), init);
  if (cfg_.token_labeling) {
    token_head_ = nn::Linear::create(*store_, "token_head", cfg_.backbone.fuse_width, cfg_.decoder.num_classes, init);
  }
}

LossOptions Detector::loss_options() const {
  LossOptions o = cfg_.loss;
  o.centerness = cfg_.decoder.centerness_enabled();
  o.token = cfg_.token_labeling;
  return o;
}

DetectorOutput Detector::forward(ad::Tape& tape, const Tensor& image, bool training, bool trace) const {
  DetectorOutput out;
  out.backbone = backbone_->forward(tape.constant(image));
  const FeaturePyramid& fused = out.backbone.fused;
  if (cfg_.decoder.memory == MemoryMode::kLastScale) {
    out.memory.push_back(fused.back());
  } else {
    for (const FeatureMap& m : fused) {
      if (m.stride >= cfg_.decoder.memory_start_stride) out.memory.push_back(m);
    }
    out.memory.push_back(backbone_->extra_scale(fused.back()));
  }
  out.decoder = decoder_->forward(out.memory, tape, trace);
  if (training && cfg_.token_labeling) {
    flops::FlopLabel label("token_head");
    for (const FeatureMap& m : fused) {
      out.token_logits.push_back(token_head_(m.tokens));
      out.token_grids.push_back({m.h, m.w});
    }
  }
  return out;
}

LossTerms Detector::loss(ad::Tape& tape, const Tensor& image, const ImageTargets& targets,
                         FrozenTargets& frozen) const {
  const DetectorOutput out = forward(tape, image, true);
  const LossOptions opt = loss_options();
  if (frozen.layers.empty()) frozen = freeze_targets(out.decoder, targets, opt.match);
  return total_loss(out.decoder, out.token_logits, out.token_grids, targets, frozen, opt);
}

StepResult Detector::accumulate(const Tensor& image, const ImageTargets& targets, double grad_scale) const {
  ad::Tape tape;
  FrozenTargets frozen;
  const LossTerms t = loss(tape, image, targets, frozen);
  tape.backward(t.total);
  tape.accumulate_param_grads(grad_scale);
  return {t.cls.value().item(), t.bbox.value().item(), t.awr.value().item(), t.token.value().item(),
          t.total.value().item()};
}

std::vector<Detection> Detector::detect(const Tensor& image, int top_k) const {
  ad::Tape tape;
  const DetectorOutput out = forward(tape, image, false);
  return postprocess(out.decoder, cfg_.decoder, top_k, cfg_.backbone.image_size);
}

}  // namespace d2etr
