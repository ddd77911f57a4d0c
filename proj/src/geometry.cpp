#include "deskdet/geometry.hpp"

#include <numeric>

namespace deskdet {

double iou(const Box& a, const Box& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

Box clip_box(const Box& b, double w, double h) {
  Box out;
  out.x1 = std::clamp(b.x1, 0.0, w);
  out.y1 = std::clamp(b.y1, 0.0, h);
  out.x2 = std::clamp(b.x2, 0.0, w);
  out.y2 = std::clamp(b.y2, 0.0, h);
  return out;
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_thresh) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    return a < b;
  });
  std::vector<int> keep;
  std::vector<char> suppressed(boxes.size(), 0);
  for (int i : order) {
    if (suppressed[static_cast<std::size_t>(i)]) continue;
    keep.push_back(i);
    for (int j : order) {
      if (j == i || suppressed[static_cast<std::size_t>(j)]) continue;
      if (iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]) >
          iou_thresh) {
        suppressed[static_cast<std::size_t>(j)] = 1;
      }
    }
  }
  return keep;
}

}  // namespace deskdet
