// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Detection average precision: greedy score-ordered matching per IoU
// threshold, 101-point interpolated precision, COCO-style ignore rules for
// size ranges.

#pragma once

#include <array>
#include <vector>

#include "d2etr/dataset.hpp"
#include "d2etr/decoder.hpp"

namespace d2etr {

class Detector;

struct GroundTruth {
  int label = 0;
  Corners box;  ///< pixels
};

/// Detections and ground truth of one image.
struct ImageResult {
  std::vector<Detection> detections;
  std::vector<GroundTruth> truth;
};

inline constexpr std::array<double, 10> kIouThresholds = {0.50, 0.55, 0.60, 0.65, 0.70,
                                                          0.75, 0.80, 0.85, 0.90, 0.95};

struct EvalResult {
  double ap50 = 0, ap75 = 0, ap = 0;  ///< ap: mean over 0.50:0.05:0.95
  std::vector<double> per_class_ap;   ///< mean over thresholds; -1 without ground truth
  std::vector<double> per_class_ap50;
  std::array<double, 3> per_size_ap{-1, -1, -1};  ///< small, medium, large; -1 without ground truth
  int images = 0;
};

/// Area-range filter; truth outside it is ignored, as are unmatched detections outside it.
struct AreaRange {
  double lo = 0;
  double hi = 1e300;
};

/// AP of one class at one IoU threshold; -1 when the class has no
/// non-ignored ground truth.
double average_precision(const std::vector<ImageResult>& results, int label, double iou_threshold,
                         const AreaRange& range = {});

EvalResult evaluate(const std::vector<ImageResult>& results, int num_classes, int image_size);

/// Runs the detector over a dataset (first `limit` images when limit > 0).
std::vector<ImageResult> run_detector(const Detector& det, const data::Dataset& ds, int top_k, int limit = 0);

EvalResult evaluate_ap(const Detector& det, const data::Dataset& ds, int top_k, int limit = 0);

}  // namespace d2etr
