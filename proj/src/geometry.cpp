#include "granudet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace granudet {

bool Box::valid() const {
  return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1) && x1 > x0 && y1 > y0;
}

std::array<double, 4> Box::to_center() const { return {(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0}; }

Box Box::from_center(double cx, double cy, double w, double h) {
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

namespace {
double intersection(const Box& a, const Box& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return w > 0 && h > 0 ? w * h : 0.0;
}
}  // namespace

double iou(const Box& a, const Box& b) {
  const double aa = a.area(), ab = b.area();
  if (aa <= 0 || ab <= 0) return 0.0;
  const double inter = intersection(a, b);
  return inter / (aa + ab - inter);
}

double giou(const Box& a, const Box& b) {
  const double aa = a.area(), ab = b.area();
  const double inter = intersection(a, b);
  const double uni = aa + ab - inter;
  const double enclose = std::max((std::max(a.x1, b.x1) - std::min(a.x0, b.x0)) *
                                      (std::max(a.y1, b.y1) - std::min(a.y0, b.y0)),
                                  1e-12);
  const double i = (aa <= 0 || ab <= 0) ? 0.0 : inter / uni;
  return i - (enclose - uni) / enclose;
}

double l1_box_loss(std::span<const double> a, std::span<const double> b) {
  if (a.size() != 4 || b.size() != 4) throw std::invalid_argument("l1_box_loss expects centre-form boxes");
  double s = 0.0;
  for (int i = 0; i < 4; ++i) s += std::fabs(a[i] - b[i]);
  return s;
}

std::vector<int> class_agnostic_nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold) {
  if (boxes.size() != scores.size()) throw std::invalid_argument("nms: boxes and scores differ in length");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> kept;
  std::vector<char> removed(boxes.size(), 0);
  for (int i : order) {
    if (removed[i]) continue;
    kept.push_back(i);
    for (int j : order)
      if (!removed[j] && j != i && iou(boxes[i], boxes[j]) > iou_threshold) removed[j] = 1;
  }
  return kept;
}

}  // namespace granudet
