#include <gtest/gtest.h>

#include <cmath>

#include "mbfuse/geometry.hpp"
#include "mbfuse/rng.hpp"

namespace mbfuse {
namespace {

TEST(Iou, IdenticalDisjointAndHalfOffset) {
  const Box a{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, {2, 2, 1, 1}), 0.0);
  // overlap 0.5, union 1.5
  EXPECT_NEAR(iou(a, {0.5, 0, 1, 1}), 1.0 / 3.0, 1e-12);
}

TEST(Iou, TouchingEdgesAndEmptyBoxes) {
  EXPECT_DOUBLE_EQ(iou({0, 0, 1, 1}, {1, 0, 1, 1}), 0.0);
  EXPECT_DOUBLE_EQ(iou({0, 0, 0, 0}, {0, 0, 0, 0}), 0.0);
}

TEST(Iou, SymmetricAndScaleInvariant) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const Box a{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(1, 40), rng.uniform(1, 40)};
    const Box b{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(1, 40), rng.uniform(1, 40)};
    const double s = rng.uniform(0.1, 10.0);
    const Box as{a.x * s, a.y * s, a.w * s, a.h * s};
    const Box bs{b.x * s, b.y * s, b.w * s, b.h * s};
    EXPECT_DOUBLE_EQ(iou(a, b), iou(b, a));
    EXPECT_NEAR(iou(a, b), iou(as, bs), 1e-9);
    EXPECT_GE(iou(a, b), 0.0);
    EXPECT_LE(iou(a, b), 1.0);
  }
}

TEST(Iou, IntersectionOverDetection) {
  // detection fully inside the region
  EXPECT_DOUBLE_EQ(intersection_over_first({2, 2, 2, 2}, {0, 0, 10, 10}), 1.0);
  EXPECT_DOUBLE_EQ(intersection_over_first({0, 0, 2, 2}, {1, 0, 10, 10}), 0.5);
  EXPECT_DOUBLE_EQ(intersection_area({0, 0, 2, 2}, {1, 1, 2, 2}), 1.0);
}

TEST(BoxCoding, KnownDelta) {
  const Box anchor{0, 0, 10, 20};
  const Box box{5, 0, 20, 20};
  const auto t = encode(anchor, box);
  EXPECT_NEAR(t[0], 1.0, 1e-12);  // centers 5 -> 15, wa = 10
  EXPECT_NEAR(t[1], 0.0, 1e-12);
  EXPECT_NEAR(t[2], std::log(2.0), 1e-12);
  EXPECT_NEAR(t[3], 0.0, 1e-12);
}

TEST(BoxCoding, RoundTrip) {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const Box anchor{rng.uniform(-20, 60), rng.uniform(-20, 60), rng.uniform(2, 50), rng.uniform(2, 80)};
    const Box box{rng.uniform(-20, 60), rng.uniform(-20, 60), rng.uniform(2, 50), rng.uniform(2, 80)};
    const Box back = decode(anchor, encode(anchor, box));
    EXPECT_NEAR(back.x, box.x, 1e-5);
    EXPECT_NEAR(back.y, box.y, 1e-5);
    EXPECT_NEAR(back.w, box.w, 1e-5);
    EXPECT_NEAR(back.h, box.h, 1e-5);
  }
}

TEST(BoxCoding, ZeroDeltaIsAnchorAndScaleIsClamped) {
  const Box anchor{3, 4, 10, 24};
  EXPECT_EQ(decode(anchor, {0, 0, 0, 0}), anchor);
  const Box wide = decode(anchor, {0, 0, 100.0, -100.0});
  EXPECT_NEAR(wide.w, 10 * std::exp(kMaxLogScale), 1e-9);
  EXPECT_NEAR(wide.cx(), anchor.cx(), 1e-9);
  EXPECT_GT(wide.h, 0.0);
}

}  // namespace
}  // namespace mbfuse
