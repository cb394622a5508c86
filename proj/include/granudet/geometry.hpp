#pragma once

#include <array>
#include <span>
#include <vector>

namespace granudet {

// Axis-aligned box in normalized image coordinates, corner form.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool valid() const;

  // (cx, cy, w, h)
  std::array<double, 4> to_center() const;
  static Box from_center(double cx, double cy, double w, double h);
  static Box from_center(std::span<const double> cxcywh) {
    return from_center(cxcywh[0], cxcywh[1], cxcywh[2], cxcywh[3]);
  }

  bool operator==(const Box&) const = default;
};

// Zero-area boxes give 0.
double iou(const Box& a, const Box& b);
// Enclosing area is clamped to at least 1e-12.
double giou(const Box& a, const Box& b);
inline double giou_loss(const Box& a, const Box& b) { return 1.0 - giou(a, b); }

// Sum of absolute differences over the four centre-form components.
double l1_box_loss(std::span<const double> a_cxcywh, std::span<const double> b_cxcywh);

// Greedy suppression in descending score order; equal scores keep the lower
// index first. Returns kept indices in visiting order.
std::vector<int> class_agnostic_nms(std::span<const Box> boxes, std::span<const double> scores, double iou_threshold);

}  // namespace granudet
