// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Set-prediction training objective: per-layer bipartite matching, focal
// classification, L1 + GIoU regression, IoU / centerness awareness branches
// and dense token labeling of the fused maps.

#pragma once

#include <vector>

#include "d2etr/box.hpp"
#include "d2etr/decoder.hpp"
#include "d2etr/hungarian.hpp"

namespace d2etr {

/// Ground truth of one image.
struct ImageTargets {
  std::vector<BBox> boxes;  ///< normalized cxcywh
  std::vector<int> labels;
  Tensor masks;  ///< [K, H, W] 0/1, per class; may be empty

  int size() const { return static_cast<int>(boxes.size()); }
};

struct FocalParams {
  double gamma = 2.0;
  double alpha = 0.25;
  double eps = 1e-8;
};

struct MatchWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
};

struct LossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  double awr = 1.0;
  double token = 1.0;
  void validate() const;
};

/// Scalar soft-target focal term: -a |t-p|^g (t log p + (1-t) log(1-p)), p clamped to [eps, 1-eps].
double focal_loss(double p, double t, const FocalParams& f = {});

/// [N, B] cost: w_cls * (-p[target class]) + w_l1 * |b - g|_1 + w_giou * (1 - GIoU).
Tensor matching_cost(const Tensor& class_probs, const Tensor& boxes, const ImageTargets& targets,
                     const MatchWeights& w);

/// Matching and awareness targets of one decoder layer, fixed once per step.
struct LayerTargets {
  MatchAssignment match;
  std::vector<double> iou;  ///< per matched pair, IoU(target, prediction)
  std::vector<double> ctr;  ///< per matched pair, centerness of the query's reference point
};

/// Targets for every decoder layer, computed from current predictions and
/// then treated as constants.
struct FrozenTargets {
  std::vector<LayerTargets> layers;
};

FrozenTargets freeze_targets(const DecoderOutput& out, const ImageTargets& targets, const MatchWeights& w);

struct ClsBoxLoss {
  ad::Var cls;   ///< focal sum / max(B, 1)
  ad::Var bbox;  ///< (l1 * sum |b - g|_1 + giou * sum (1 - GIoU)) / B; 0 when B = 0
};

ClsBoxLoss loss_cls_bbox(const LayerPrediction& p, const ImageTargets& targets, const MatchAssignment& match,
                         const LossWeights& w, const FocalParams& f = {});

/// (1/B) sum over matched pairs of BCE(iou logit, IoU) [+ BCE(ctr logit, CTR)].
ad::Var loss_aware(const LayerPrediction& p, const LayerTargets& t, bool centerness);

/// Soft token labels of one scale: masks bilinearly resized to h x w, [h*w, K].
Tensor token_labels(const Tensor& masks, int h, int w);

/// Sum over scales, positions and classes of the soft focal term between the
/// token logits ([h*w, K] per scale) and the resized masks, / max(B, 1).
ad::Var loss_token(const std::vector<ad::Var>& token_logits, const std::vector<attn::Grid>& grids,
                   const ImageTargets& targets, const FocalParams& f = {});

/// Weighted contributions; total is their sum.
struct LossTerms {
  ad::Var cls, bbox, awr, token, total;
};

struct LossOptions {
  LossWeights weights;
  MatchWeights match;
  FocalParams focal;
  bool centerness = false;
  bool token = true;
};

/// Sum over decoder layers of the detection terms plus the token term.
LossTerms total_loss(const DecoderOutput& out, const std::vector<ad::Var>& token_logits,
                     const std::vector<attn::Grid>& token_grids, const ImageTargets& targets,
                     const FrozenTargets& frozen, const LossOptions& opt);

}  // namespace d2etr
