#pragma once

#include <array>

namespace mbfuse {

/// Axis-aligned box, top-left origin, pixel units.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }

  static Box from_center(double cx, double cy, double w, double h) { return {cx - 0.5 * w, cy - 0.5 * h, w, h}; }

  friend bool operator==(const Box&, const Box&) = default;
};

double intersection_area(const Box& a, const Box& b);

// Intersection over union; 0 when the union is empty.
double iou(const Box& a, const Box& b);

// Intersection over the area of `det` (ignore-region matching).
double intersection_over_first(const Box& det, const Box& region);

// Faster-RCNN parameterization relative to `anchor`:
// tx = (x - xa) / wa, ty = (y - ya) / ha on centers, tw = log(w / wa),
// th = log(h / ha).
using BoxDelta = std::array<double, 4>;

BoxDelta encode(const Box& anchor, const Box& box);

// Inverse of encode. tw, th are clamped to log(1000 / 16) before exp.
Box decode(const Box& anchor, const BoxDelta& delta);

inline constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)

}  // namespace mbfuse
