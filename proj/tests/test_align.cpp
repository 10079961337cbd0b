#include <gtest/gtest.h>

#include <cmath>

#include "mbfuse/align.hpp"
#include "test_support.hpp"

namespace mbfuse {
namespace {

using testing::random_tensor;
using testing::values_of;

Tensor<double> offsets_of(int n, int h, int w, double dx, double dy) {
  Tensor<double> t(Shape{n, 2, h, w});
  for (int i = 0; i < n; ++i) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        t.at(i, 0, y, x) = dx;
        t.at(i, 1, y, x) = dy;
      }
    }
  }
  return t;
}

// Smooth test pattern evaluated at real coordinates.
double pattern(int c, double y, double x) { return std::sin(0.15 * x + 0.2 * c) + 0.5 * std::cos(0.12 * y - 0.05 * x); }

Tensor<double> sampled_pattern(int c, int h, int w, double shift_x) {
  Tensor<double> t(Shape{1, c, h, w});
  for (int k = 0; k < c; ++k) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) t.at(0, k, y, x) = pattern(k, y, x + shift_x);
    }
  }
  return t;
}

TEST(Align, ZeroOffsetsAreIdentity) {
  Rng rng(1);
  Tape<double> tape;
  const DualFeature<double> f{tape.constant(random_tensor(Shape{2, 3, 5, 6}, rng)),
                              tape.constant(random_tensor(Shape{2, 3, 5, 6}, rng)), 4};
  const auto zero = tape.constant(Tensor<double>(Shape{2, 2, 5, 6}));
  const auto out = align(f, {zero, zero});
  EXPECT_EQ(values_of(out.rgb.value()), values_of(f.rgb.value()));
  EXPECT_EQ(values_of(out.thermal.value()), values_of(f.thermal.value()));
  EXPECT_EQ(out.stage, 4);
}

TEST(Align, FrozenOffsetUndoesThermalShift) {
  // Thermal sees the scene two pixels ahead: thermal(x) = rgb(x + 2).
  const int h = 12, w = 20;
  Tape<double> tape;
  const auto rgb = sampled_pattern(3, h, w, 0.0);
  const auto thermal = sampled_pattern(3, h, w, 2.0);
  const DualFeature<double> f{tape.constant(rgb), tape.constant(thermal), 3};
  const OffsetPair<double> offsets{tape.constant(offsets_of(1, h, w, 0.0, 0.0)),
                                   tape.constant(offsets_of(1, h, w, -2.0, 0.0))};
  const auto out = align(f, offsets);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 2; x < w; ++x) ASSERT_NEAR(out.thermal.value().at(0, c, y, x), rgb.at(0, c, y, x), 1e-5);
    }
  }
  EXPECT_EQ(values_of(out.rgb.value()), values_of(rgb));
}

TEST(Align, HalfPixelOffsetAveragesNeighbours) {
  Rng rng(2);
  Tape<double> tape;
  const auto x = random_tensor(Shape{1, 1, 4, 4}, rng);
  const DualFeature<double> f{tape.constant(x), tape.constant(x), 3};
  const auto half = tape.constant(offsets_of(1, 4, 4, 0.5, 0.0));
  const auto out = align(f, {half, half});
  for (int y = 0; y < 4; ++y) {
    for (int c = 0; c < 3; ++c) {
      EXPECT_NEAR(out.rgb.value().at(0, 0, y, c), 0.5 * (x.at(0, 0, y, c) + x.at(0, 0, y, c + 1)), 1e-12);
    }
  }
}

TEST(Align, ConstantOffsetsCompose) {
  const int h = 16, w = 24;
  Tape<double> tape;
  const auto x = sampled_pattern(2, h, w, 0.0);
  const DualFeature<double> f{tape.constant(x), tape.constant(x), 3};
  const auto a = tape.constant(offsets_of(1, h, w, 1.25, -0.5));
  const auto b = tape.constant(offsets_of(1, h, w, 0.75, 1.5));
  const auto ab = tape.constant(offsets_of(1, h, w, 2.0, 1.0));
  const auto twice = align(align(f, {a, a}), {b, b});
  const auto once = align(f, {ab, ab});
  for (int c = 0; c < 2; ++c) {
    for (int y = 4; y < h - 4; ++y) {
      for (int xx = 4; xx < w - 4; ++xx) {
        // Bilinear interpolation of a smooth pattern is not exact; both sides
        // approximate the same shifted pattern.
        EXPECT_NEAR(twice.rgb.value().at(0, c, y, xx), once.rgb.value().at(0, c, y, xx), 2e-2);
      }
    }
  }
}

TEST(Align, IntegerOffsetsComposeExactly) {
  Rng rng(3);
  const int h = 10, w = 10;
  Tape<double> tape;
  const auto x = random_tensor(Shape{1, 2, h, w}, rng);
  const DualFeature<double> f{tape.constant(x), tape.constant(x), 3};
  const auto a = tape.constant(offsets_of(1, h, w, 1.0, -2.0));
  const auto b = tape.constant(offsets_of(1, h, w, 2.0, 1.0));
  const auto ab = tape.constant(offsets_of(1, h, w, 3.0, -1.0));
  const auto twice = align(align(f, {a, a}), {b, b});
  const auto once = align(f, {ab, ab});
  for (int c = 0; c < 2; ++c) {
    for (int y = 3; y < h - 3; ++y) {
      for (int xx = 3; xx < w - 3; ++xx) {
        EXPECT_NEAR(twice.rgb.value().at(0, c, y, xx), once.rgb.value().at(0, c, y, xx), 1e-12);
      }
    }
  }
}

TEST(Align, ExtentMismatchThrows) {
  Tape<double> tape;
  const DualFeature<double> f{tape.constant(Tensor<double>(Shape{1, 2, 4, 4})),
                              tape.constant(Tensor<double>(Shape{1, 2, 4, 4})), 3};
  const auto bad = tape.constant(Tensor<double>(Shape{1, 2, 4, 5}));
  EXPECT_THROW(align(f, {bad, bad}), ShapeError);
}

TEST(PredictOffsets, ZeroHeadGivesZeroOffsetsOfTheRightShape) {
  Rng rng(4);
  ParamStore<double> store;
  init_align(store, "ma", 6, 3, rng);
  Tape<double> tape;
  ParamBinding<double> binding(tape, store, false);
  const DualFeature<double> f{tape.constant(random_tensor(Shape{2, 6, 5, 7}, rng)),
                              tape.constant(random_tensor(Shape{2, 6, 5, 7}, rng)), 3};
  const auto off = predict_offsets(f, binding, "ma");
  EXPECT_EQ(off.rgb.shape(), (Shape{2, 2, 5, 7}));
  EXPECT_EQ(off.thermal.shape(), (Shape{2, 2, 5, 7}));
  for (double v : off.rgb.value().data()) EXPECT_EQ(v, 0.0);
  for (double v : off.thermal.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(PredictOffsets, GradientReachesBothCompressions) {
  Rng rng(5);
  ParamStore<double> store;
  init_align(store, "ma", 3, 2, rng);
  store.get("ma.offset.w") = Tensor<double>::uniform(store.get("ma.offset.w").shape(), rng, -0.5, 0.5);
  store.get("ma.rgb.b") = Tensor<double>::full(Shape{2}, 0.3);
  store.get("ma.thermal.b") = Tensor<double>::full(Shape{2}, 0.3);
  Tape<double> tape;
  ParamBinding<double> binding(tape, store);
  const DualFeature<double> f{tape.constant(random_tensor(Shape{1, 3, 4, 4}, rng)),
                              tape.constant(random_tensor(Shape{1, 3, 4, 4}, rng)), 3};
  const auto off = predict_offsets(f, binding, "ma");
  tape.backward(add(testing::weighted_sum(off.rgb), testing::weighted_sum(off.thermal, 7)));
  const auto grads = binding.gradients();
  for (std::size_t i = 0; i < store.size(); ++i) {
    double norm = 0.0;
    for (double g : grads[i].data()) norm += std::abs(g);
    EXPECT_GT(norm, 0.0) << store.names()[i];
  }
}

TEST(PredictOffsets, EndToEndGradientCheck) {
  Rng rng(6);
  ParamStore<double> store;
  init_align(store, "ma", 3, 2, rng);
  std::vector<NamedTensor> inputs;
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto v = store.at(i);
    for (std::size_t k = 0; k < v.numel(); ++k) v[k] += rng.normal(0.0, 0.2);
    inputs.push_back({store.names()[i], v});
  }
  inputs.back().value[0] += 0.37;  // keep sample positions off the integer grid
  const auto r = random_tensor(Shape{1, 3, 5, 5}, rng);
  const auto t = random_tensor(Shape{1, 3, 5, 5}, rng);
  const ScalarObjective objective = [&](Tape<double>& tape, std::span<const Var<double>> leaves) {
    ParamBinding<double> binding(tape, store, false);
    for (std::size_t i = 0; i < leaves.size(); ++i) binding.bind(store.names()[i], leaves[i]);
    const DualFeature<double> f{tape.constant(r), tape.constant(t), 3};
    const auto out = align(f, predict_offsets(f, binding, "ma"));
    return add(testing::weighted_sum(out.rgb), testing::weighted_sum(out.thermal, 5));
  };
  GradCheckOptions options;
  options.detect_nonsmooth = true;
  const auto report = grad_check(objective, inputs, options);
  testing::expect_grad_ok(report);
  EXPECT_TRUE(report.passed());
}

}  // namespace
}  // namespace mbfuse
