#pragma once

#include <algorithm>
#include <vector>

namespace deskdet {

/// Axis-aligned box, corner format. Valid iff x1 < x2 and y1 < y2.
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const { return x1 < x2 && y1 < y2; }
};

/// Intersection over union; 0 for disjoint or degenerate boxes.
double iou(const Box& a, const Box& b);

/// Clamp corners into [0,w]x[0,h]. Does not repair inverted boxes.
Box clip_box(const Box& b, double w, double h);

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores are broken by lower index.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh);

}  // namespace deskdet
