#include "mbfuse/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace mbfuse {

double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double ih = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

double intersection_over_first(const Box& det, const Box& region) {
  const double area = det.area();
  return area > 0.0 ? intersection_area(det, region) / area : 0.0;
}

BoxDelta encode(const Box& anchor, const Box& box) {
  return {(box.cx() - anchor.cx()) / anchor.w, (box.cy() - anchor.cy()) / anchor.h, std::log(box.w / anchor.w),
          std::log(box.h / anchor.h)};
}

Box decode(const Box& anchor, const BoxDelta& d) {
  const double cx = anchor.cx() + d[0] * anchor.w;
  const double cy = anchor.cy() + d[1] * anchor.h;
  const double w = anchor.w * std::exp(std::min(d[2], kMaxLogScale));
  const double h = anchor.h * std::exp(std::min(d[3], kMaxLogScale));
  return Box::from_center(cx, cy, w, h);
}

}  // namespace mbfuse
