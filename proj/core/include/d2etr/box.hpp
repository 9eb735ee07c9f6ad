// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>

namespace d2etr {

struct Corners {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool degenerate() const { return !(x2 > x1 && y2 > y1); }
};

/// Center form, normalized to the image in [0,1].
struct BBox {
  double cx = 0, cy = 0, w = 0, h = 0;

  Corners corners() const { return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}; }
  static BBox from_corners(const Corners& c) {
    return {0.5 * (c.x1 + c.x2), 0.5 * (c.y1 + c.y2), c.x2 - c.x1, c.y2 - c.y1};
  }
  double area() const { return w * h; }
};

/// Intersection over union; 0 if either box is degenerate.
inline double iou(const Corners& a, const Corners& b) {
  if (a.degenerate() || b.degenerate()) return 0.0;
  const Corners in{std::max(a.x1, b.x1), std::max(a.y1, b.y1), std::min(a.x2, b.x2), std::min(a.y2, b.y2)};
  const double inter = in.area();
  return inter / (a.area() + b.area() - inter);
}

/// IoU minus the share of the enclosing hull not covered by the union.
inline double giou(const Corners& a, const Corners& b) {
  if (a.degenerate() || b.degenerate()) return 0.0;
  const Corners in{std::max(a.x1, b.x1), std::max(a.y1, b.y1), std::min(a.x2, b.x2), std::min(a.y2, b.y2)};
  const double inter = in.area();
  const double uni = a.area() + b.area() - inter;
  const Corners hull{std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2), std::max(a.y2, b.y2)};
  return inter / uni - (hull.area() - uni) / hull.area();
}

inline double iou(const BBox& a, const BBox& b) { return iou(a.corners(), b.corners()); }
inline double giou(const BBox& a, const BBox& b) { return giou(a.corners(), b.corners()); }

}  // namespace d2etr
