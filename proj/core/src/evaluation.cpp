// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/evaluation.hpp"

#include <algorithm>
#include <numeric>

#include "d2etr/detector.hpp"

namespace d2etr {

namespace {

struct Scored {
  double score;
  std::size_t image;
  std::size_t index;
};

bool in_range(const Corners& c, const AreaRange& r) {
  const double a = c.area();
  return a >= r.lo && a <= r.hi;
}

double mean_valid(const std::vector<double>& v) {
  double s = 0;
  int n = 0;
  for (double x : v) {
    if (x < 0) continue;
    s += x;
    ++n;
  }
  return n ? s / n : -1.0;
}

}  // namespace

double average_precision(const std::vector<ImageResult>& results, int label, double iou_threshold,
                         const AreaRange& range) {
  std::vector<Scored> dets;
  int positives = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    for (std::size_t d = 0; d < results[i].detections.size(); ++d) {
      if (results[i].detections[d].label == label) dets.push_back({results[i].detections[d].score, i, d});
    }
    for (const GroundTruth& g : results[i].truth) {
      if (g.label == label && in_range(g.box, range)) ++positives;
    }
  }
  if (positives == 0) return -1.0;
  std::stable_sort(dets.begin(), dets.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });

  std::vector<std::vector<char>> taken(results.size());
  for (std::size_t i = 0; i < results.size(); ++i) taken[i].assign(results[i].truth.size(), 0);
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (const Scored& s : dets) {
    const ImageResult& r = results[s.image];
    const Corners& box = r.detections[s.index].box;
    // Best unmatched ground truth; non-ignored candidates take priority.
    int best = -1;
    bool best_ignored = true;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < r.truth.size(); ++g) {
      if (r.truth[g].label != label || taken[s.image][g]) continue;
      const bool ignored = !in_range(r.truth[g].box, range);
      if (best >= 0 && !best_ignored && ignored) continue;
      const double v = iou(box, r.truth[g].box);
      if (v < iou_threshold) continue;
      if (best < 0 || (best_ignored && !ignored) || v > best_iou) {
        best = static_cast<int>(g);
        best_iou = v;
        best_ignored = ignored;
      }
    }
    if (best >= 0) {
      taken[s.image][best] = 1;
      if (best_ignored) continue;
      ++tp;
    } else {
      if (!in_range(box, range)) continue;
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / positives);
  }
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) precision[i] = std::max(precision[i], precision[i + 1]);
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
    if (it != recall.end()) sum += precision[it - recall.begin()];
  }
  return sum / 101.0;
}

EvalResult evaluate(const std::vector<ImageResult>& results, int num_classes, int image_size) {
  EvalResult out;
  out.images = static_cast<int>(results.size());
  std::vector<double> ap50(num_classes), ap75(num_classes), apm(num_classes);
  for (int c = 0; c < num_classes; ++c) {
    std::vector<double> per_t;
    for (double t : kIouThresholds) per_t.push_back(average_precision(results, c, t));
    ap50[c] = per_t[0];
    ap75[c] = per_t[5];
    apm[c] = mean_valid(per_t);
  }
  out.per_class_ap = apm;
  out.per_class_ap50 = ap50;
  out.ap50 = std::max(0.0, mean_valid(ap50));
  out.ap75 = std::max(0.0, mean_valid(ap75));
  out.ap = std::max(0.0, mean_valid(apm));
  const data::SizeThresholds th = data::size_thresholds(image_size);
  const AreaRange ranges[3] = {{0, th.small_max}, {th.small_max, th.large_min}, {th.large_min, 1e300}};
  for (int s = 0; s < 3; ++s) {
    std::vector<double> per_class;
    for (int c = 0; c < num_classes; ++c) {
      std::vector<double> per_t;
      for (double t : kIouThresholds) per_t.push_back(average_precision(results, c, t, ranges[s]));
      per_class.push_back(mean_valid(per_t));
    }
    out.per_size_ap[s] = mean_valid(per_class);
  }
  return out;
}

std::vector<ImageResult> run_detector(const Detector& det, const data::Dataset& ds, int top_k, int limit) {
  if (ds.samples.empty()) throw ConfigError("evaluation: empty dataset");
  const std::size_t n = limit > 0 ? std::min<std::size_t>(limit, ds.size()) : ds.size();
  std::vector<ImageResult> results(n);
  const double s = ds.image_size;
  for (std::size_t i = 0; i < n; ++i) {
    results[i].detections = det.detect(ds.samples[i].image, top_k);
    const ImageTargets& t = ds.samples[i].targets;
    for (int j = 0; j < t.size(); ++j) {
      const Corners c = t.boxes[j].corners();
      results[i].truth.push_back({t.labels[j], {c.x1 * s, c.y1 * s, c.x2 * s, c.y2 * s}});
    }
  }
  return results;
}

EvalResult evaluate_ap(const Detector& det, const data::Dataset& ds, int top_k, int limit) {
  return evaluate(run_detector(det, ds, top_k, limit), ds.num_classes, ds.image_size);
}

}  // namespace d2etr
