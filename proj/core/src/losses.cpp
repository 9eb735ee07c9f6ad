// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/losses.hpp"

#include <algorithm>
#include <cmath>

#include "d2etr/ops.hpp"

namespace d2etr {

using ad::Var;

void LossWeights::validate() const {
  if (cls < 0 || l1 < 0 || giou < 0 || awr < 0 || token < 0) throw ConfigError("loss weights must be nonnegative");
}

double focal_loss(double p, double t, const FocalParams& f) {
  p = std::clamp(p, f.eps, 1.0 - f.eps);
  const double mod = f.gamma == 0.0 ? 1.0 : std::pow(std::abs(t - p), f.gamma);
  return -f.alpha * mod * (t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
}

namespace {

BBox box_row(const Tensor& boxes, int q) { return {boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)}; }

Var zero(ad::Tape& tape) { return tape.constant(Tensor::scalar(0.0)); }

std::vector<int> matched_queries(const MatchAssignment& m) {
  std::vector<int> q;
  q.reserve(m.pairs.size());
  for (const auto& [query, target] : m.pairs) q.push_back(query);
  return q;
}

/// Sum over rows of 1 - GIoU between predicted [B,4] and constant target cxcywh boxes.
Var giou_loss_sum(Var pred, const Tensor& target) {
  ad::Tape& tape = *pred.tape;
  const int b = pred.dim(0);
  Tensor tx1({b, 1}), ty1({b, 1}), tx2({b, 1}), ty2({b, 1}), tarea({b, 1});
  for (int i = 0; i < b; ++i) {
    const Corners c = box_row(target, i).corners();
    tx1[i] = c.x1;
    ty1[i] = c.y1;
    tx2[i] = c.x2;
    ty2[i] = c.y2;
    tarea[i] = c.area();
  }
  Var gx1 = tape.constant(tx1), gy1 = tape.constant(ty1), gx2 = tape.constant(tx2), gy2 = tape.constant(ty2);
  Var cx = ad::slice_cols(pred, 0, 1), cy = ad::slice_cols(pred, 1, 2);
  Var hw = ad::scale(ad::slice_cols(pred, 2, 3), 0.5), hh = ad::scale(ad::slice_cols(pred, 3, 4), 0.5);
  Var px1 = ad::sub(cx, hw), px2 = ad::add(cx, hw), py1 = ad::sub(cy, hh), py2 = ad::add(cy, hh);
  Var zeros = tape.constant(Tensor({b, 1}, 0.0));
  Var iw = ad::maximum(ad::sub(ad::minimum(px2, gx2), ad::maximum(px1, gx1)), zeros);
  Var ih = ad::maximum(ad::sub(ad::minimum(py2, gy2), ad::maximum(py1, gy1)), zeros);
  Var inter = ad::mul(iw, ih);
  Var parea = ad::mul(ad::sub(px2, px1), ad::sub(py2, py1));
  Var uni = ad::sub(ad::add(parea, tape.constant(tarea)), inter);
  Var hull = ad::mul(ad::sub(ad::maximum(px2, gx2), ad::minimum(px1, gx1)),
                     ad::sub(ad::maximum(py2, gy2), ad::minimum(py1, gy1)));
  Var giou = ad::sub(ad::div(inter, uni), ad::div(ad::sub(hull, uni), hull));
  return ad::sum(ad::add_scalar(ad::scale(giou, -1.0), 1.0));
}

}  // namespace

Tensor matching_cost(const Tensor& class_probs, const Tensor& boxes, const ImageTargets& targets,
                     const MatchWeights& w) {
  const int n = class_probs.dim(0), b = targets.size();
  if (boxes.dim(0) != n) throw ShapeError("matching_cost: class and box rows differ");
  if (b == 0) return {};
  Tensor cost({n, b}, 0.0);
  for (int q = 0; q < n; ++q) {
    const BBox p = box_row(boxes, q);
    for (int t = 0; t < b; ++t) {
      const BBox& g = targets.boxes[t];
      const double l1 = std::abs(p.cx - g.cx) + std::abs(p.cy - g.cy) + std::abs(p.w - g.w) + std::abs(p.h - g.h);
      cost.at(q, t) = -w.cls * class_probs.at(q, targets.labels[t]) + w.l1 * l1 + w.giou * (1.0 - giou(p, g));
    }
  }
  return cost;
}

FrozenTargets freeze_targets(const DecoderOutput& out, const ImageTargets& targets, const MatchWeights& w) {
  FrozenTargets f;
  for (const LayerPrediction& p : out.layers) {
    Tensor probs = p.class_logits.value();
    for (double& v : probs.data()) v = ad::sigmoid_value(v);
    const Tensor& boxes = p.boxes.value();
    LayerTargets lt;
    if (targets.size() > 0) {
      lt.match = hungarian_match(matching_cost(probs, boxes, targets, w));
    } else {
      lt.match.num_queries = probs.dim(0);
    }
    for (const auto& [q, t] : lt.match.pairs) {
      const Corners g = targets.boxes[t].corners();
      lt.iou.push_back(iou(g, box_row(boxes, q).corners()));
      double ctr = 0.0;
      if (!out.reference_points.empty()) {
        ctr = compute_centerness(out.reference_points.at(q, 0), out.reference_points.at(q, 1), g);
      }
      lt.ctr.push_back(ctr);
    }
    f.layers.push_back(std::move(lt));
  }
  return f;
}

ClsBoxLoss loss_cls_bbox(const LayerPrediction& p, const ImageTargets& targets, const MatchAssignment& match,
                         const LossWeights& w, const FocalParams& f) {
  ad::Tape& tape = *p.class_logits.tape;
  const int b = targets.size();
  Tensor onehot(p.class_logits.shape(), 0.0);
  for (const auto& [q, t] : match.pairs) onehot.at(q, targets.labels[t]) = 1.0;
  ClsBoxLoss out;
  out.cls = ad::scale(ad::sigmoid_focal_loss(p.class_logits, onehot, f.gamma, f.alpha, f.eps),
                      1.0 / std::max(b, 1));
  if (b == 0) {
    out.bbox = zero(tape);
    return out;
  }
  Tensor tgt({b, 4});
  for (int t = 0; t < b; ++t) {
    const BBox& g = targets.boxes[t];
    tgt.at(t, 0) = g.cx;
    tgt.at(t, 1) = g.cy;
    tgt.at(t, 2) = g.w;
    tgt.at(t, 3) = g.h;
  }
  // match.pairs is ordered by target, so gathered rows line up with tgt.
  Var pred = ad::gather_rows(p.boxes, matched_queries(match));
  Var l1 = ad::sum(ad::abs(ad::sub(pred, tape.constant(tgt))));
  Var gl = giou_loss_sum(pred, tgt);
  out.bbox = ad::scale(ad::add(ad::scale(l1, w.l1), ad::scale(gl, w.giou)), 1.0 / b);
  return out;
}

Var loss_aware(const LayerPrediction& p, const LayerTargets& t, bool centerness) {
  ad::Tape& tape = *p.iou_logits.tape;
  const int b = static_cast<int>(t.match.pairs.size());
  if (b == 0) return zero(tape);
  const std::vector<int> rows = matched_queries(t.match);
  Var loss = ad::bce_with_logits(ad::gather_rows(p.iou_logits, rows), Tensor({b, 1}, t.iou));
  if (centerness) loss = ad::add(loss, ad::bce_with_logits(ad::gather_rows(p.ctr_logits, rows), Tensor({b, 1}, t.ctr)));
  return ad::scale(loss, 1.0 / b);
}

Tensor token_labels(const Tensor& masks, int h, int w) {
  const Tensor resized = ad::resize_bilinear(masks, h, w);
  const int k = masks.dim(0);
  Tensor out({h * w, k});
  for (int c = 0; c < k; ++c)
    for (int i = 0; i < h * w; ++i) out.at(i, c) = resized[static_cast<std::size_t>(c) * h * w + i];
  return out;
}

Var loss_token(const std::vector<Var>& token_logits, const std::vector<attn::Grid>& grids,
               const ImageTargets& targets, const FocalParams& f) {
  if (token_logits.size() != grids.size()) throw ShapeError("loss_token: one grid per scale required");
  if (token_logits.empty()) throw ShapeError("loss_token: no scales");
  ad::Tape& tape = *token_logits[0].tape;
  if (targets.masks.rank() == 0) return zero(tape);
  if (targets.masks.rank() != 3) throw ShapeError("loss_token: masks must be [K, H, W]");
  Var loss;
  for (std::size_t j = 0; j < token_logits.size(); ++j) {
    const Tensor labels = token_labels(targets.masks, grids[j].h, grids[j].w);
    if (labels.shape() != token_logits[j].shape()) {
      throw ShapeError("loss_token: logits " + to_string(token_logits[j].shape()) + " vs labels " +
                       to_string(labels.shape()));
    }
    Var term = ad::sigmoid_focal_loss(token_logits[j], labels, f.gamma, f.alpha, f.eps);
    loss = loss.valid() ? ad::add(loss, term) : term;
  }
  return ad::scale(loss, 1.0 / std::max(targets.size(), 1));
}

LossTerms total_loss(const DecoderOutput& out, const std::vector<Var>& token_logits,
                     const std::vector<attn::Grid>& token_grids, const ImageTargets& targets,
                     const FrozenTargets& frozen, const LossOptions& opt) {
  opt.weights.validate();
  if (frozen.layers.size() != out.layers.size()) throw ConfigError("total_loss: frozen targets for a different decoder");
  ad::Tape& tape = *out.layers.at(0).class_logits.tape;
  Var cls, bbox, awr;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    const ClsBoxLoss cb = loss_cls_bbox(out.layers[i], targets, frozen.layers[i].match, opt.weights, opt.focal);
    const Var aw = loss_aware(out.layers[i], frozen.layers[i], opt.centerness);
    cls = cls.valid() ? ad::add(cls, cb.cls) : cb.cls;
    bbox = bbox.valid() ? ad::add(bbox, cb.bbox) : cb.bbox;
    awr = awr.valid() ? ad::add(awr, aw) : aw;
  }
  LossTerms t;
  t.cls = ad::scale(cls, opt.weights.cls);
  t.bbox = bbox;
  t.awr = ad::scale(awr, opt.weights.awr);
  t.token = opt.token && !token_logits.empty()
                ? ad::scale(loss_token(token_logits, token_grids, targets, opt.focal), opt.weights.token)
                : zero(tape);
  t.total = ad::add(ad::add(t.cls, t.bbox), ad::add(t.awr, t.token));
  return t;
}

}  // namespace d2etr
