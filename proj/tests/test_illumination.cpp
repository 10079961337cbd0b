#include <gtest/gtest.h>

#include <cmath>

#include "mbfuse/illumination.hpp"
#include "mbfuse/synth.hpp"
#include "mbfuse/train.hpp"
#include "test_support.hpp"

namespace mbfuse {
namespace {

using testing::random_tensor;
using testing::values_of;

TEST(Reweight, WeightsSumToOneExactly) {
  // Any gate with alpha |w| + gamma in [0, 1] keeps w_r in [0, 1], where
  // w_r + (1 - w_r) rounds to exactly 1.
  Rng rng(1);
  for (int i = 0; i < 100000; ++i) {
    const double w_d = rng.uniform();
    const double w_abs = rng.uniform();
    const double alpha = rng.uniform();
    const double gamma = rng.uniform(-alpha * w_abs, 1.0 - alpha * w_abs);
    const auto g = illum_reweight(w_d, 1.0 - w_d, w_abs, alpha, gamma);
    ASSERT_GE(g.w_r, 0.0);
    ASSERT_LE(g.w_r, 1.0);
    ASSERT_EQ(g.w_r + g.w_t, 1.0) << g.w_r;
  }
}

TEST(Reweight, ThermalWeightIsComplementForAnyGate) {
  Rng rng(9);
  for (int i = 0; i < 10000; ++i) {
    const double w_d = rng.uniform();
    const auto g = illum_reweight(w_d, 1.0 - w_d, rng.uniform(), rng.uniform(-3, 3), rng.uniform(-3, 3));
    ASSERT_EQ(g.w_t, 1.0 - g.w_r);
    ASSERT_NEAR(g.w_r + g.w_t, 1.0, 1e-15);
  }
}

TEST(Reweight, SymmetricIlluminationIsNeutral) {
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const auto g = illum_reweight(0.5, 0.5, rng.uniform(), rng.uniform(-10, 10), rng.uniform(-10, 10));
    ASSERT_EQ(g.w_r, 0.5);
    ASSERT_EQ(g.w_t, 0.5);
  }
}

TEST(Reweight, HandDerivedCorners) {
  const auto day = illum_reweight(1.0, 0.0, 1.0, 1.0, 0.0);
  EXPECT_NEAR(day.w_r, 1.0, 1e-6);
  EXPECT_NEAR(day.w_t, 0.0, 1e-6);
  const auto night = illum_reweight(0.0, 1.0, 1.0, 1.0, 0.0);
  EXPECT_NEAR(night.w_r, 0.0, 1e-6);
  EXPECT_NEAR(night.w_t, 1.0, 1e-6);
  // ((0.8 - 0.2) / 2) (0.5 * 0.6 + 0.1) + 0.5 = 0.62
  EXPECT_NEAR(illum_reweight(0.8, 0.2, 0.6, 0.5, 0.1).w_r, 0.62, 1e-12);
}

TEST(Reweight, MonotoneInDayProbability) {
  double prev = -1.0;
  for (int i = 0; i <= 20; ++i) {
    const double w_d = i / 20.0;
    const double w_r = illum_reweight(w_d, 1.0 - w_d, 0.7, 1.0, 0.2).w_r;
    EXPECT_GT(w_r, prev);
    prev = w_r;
  }
}

TEST(Reweight, ClampKeepsGateInUnitInterval) {
  const auto raw = illum_reweight(1.0, 0.0, 1.0, 3.0, 0.0);
  EXPECT_GT(raw.w_r, 1.0);
  const auto clamped = illum_reweight(1.0, 0.0, 1.0, 3.0, 0.0, true);
  EXPECT_EQ(clamped.w_r, 1.0);
  EXPECT_EQ(clamped.w_t, 0.0);
}

TEST(Reweight, TapeVersionMatchesScalar) {
  Tape<double> tape;
  IllumState<double> s;
  s.w_d = tape.constant(Tensor<double>(Shape{2, 1, 1, 1}, {0.9, 0.3}));
  s.w_n = tape.constant(Tensor<double>(Shape{2, 1, 1, 1}, {0.1, 0.7}));
  s.w_abs = tape.constant(Tensor<double>(Shape{2, 1, 1, 1}, {0.4, 0.8}));
  s.alpha = tape.constant(Tensor<double>::full(Shape{1, 1, 1, 1}, 1.3));
  s.gamma = tape.constant(Tensor<double>::full(Shape{1, 1, 1, 1}, -0.2));
  illum_reweight(s);
  for (int n = 0; n < 2; ++n) {
    const auto g = illum_reweight(s.w_d.value()[n], s.w_n.value()[n], s.w_abs.value()[n], 1.3, -0.2);
    EXPECT_NEAR(s.w_r.value()[n], g.w_r, 1e-15);
    EXPECT_EQ(s.w_r.value()[n] + s.w_t.value()[n], 1.0);
  }
}

TEST(IllumNet, FreshNetIsUndecided) {
  Rng rng(3);
  ParamStore<double> store;
  init_illumination(store, rng);
  Tape<double> tape;
  ParamBinding<double> binding(tape, store, false);
  const auto img = Tensor<double>::uniform(Shape{3, 3, 64, 80}, rng, 0.0, 1.0);
  const auto s = illum_forward(tape.constant(img), binding);
  ASSERT_EQ(s.w_d.shape(), (Shape{3, 1, 1, 1}));
  for (int n = 0; n < 3; ++n) {
    EXPECT_NEAR(s.w_d.value()[n], 0.5, 1e-12);
    EXPECT_NEAR(s.w_d.value()[n] + s.w_n.value()[n], 1.0, 1e-12);
    EXPECT_GT(s.w_abs.value()[n], 0.0);
    EXPECT_LT(s.w_abs.value()[n], 1.0);
    EXPECT_GE(s.w_r.value()[n], 0.0);
    EXPECT_LE(s.w_r.value()[n], 1.0);
  }
  EXPECT_EQ(s.alpha.value()[0], 1.0);
  EXPECT_EQ(s.gamma.value()[0], 0.0);
}

TEST(IllumNet, RejectsNonRgbInput) {
  Rng rng(3);
  ParamStore<double> store;
  init_illumination(store, rng);
  Tape<double> tape;
  ParamBinding<double> binding(tape, store, false);
  EXPECT_THROW(illum_forward(tape.constant(Tensor<double>(Shape{1, 1, 56, 56})), binding), ShapeError);
}

TEST(IllumLoss, HandValues) {
  Tape<double> tape;
  IllumState<double> s;
  s.w_d = tape.constant(Tensor<double>::full(Shape{1, 1, 1, 1}, 0.5));
  s.w_n = tape.constant(Tensor<double>::full(Shape{1, 1, 1, 1}, 0.5));
  const std::vector<std::uint8_t> day{1}, night{0};
  EXPECT_NEAR(illum_loss(s, day).value()[0], std::log(2.0), 1e-12);
  EXPECT_NEAR(illum_loss(s, night).value()[0], std::log(2.0), 1e-12);
  s.w_d = tape.constant(Tensor<double>::full(Shape{1, 1, 1, 1}, 1.0 - 1e-9));
  s.w_n = tape.constant(Tensor<double>::full(Shape{1, 1, 1, 1}, 1e-9));
  EXPECT_LT(illum_loss(s, day).value()[0], 1e-6);
}

TEST(IllumLoss, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  ParamStore<double> store;
  IllumConfig config;
  config.input_size = 8;
  init_illumination(store, rng, config);
  std::vector<NamedTensor> inputs;
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto v = store.at(i);
    for (std::size_t k = 0; k < v.numel(); ++k) v[k] += rng.normal(0.0, 0.1);
    inputs.push_back({store.names()[i], v});
  }
  const auto img = Tensor<double>::uniform(Shape{2, 3, 8, 8}, rng, 0.0, 1.0);
  const std::vector<std::uint8_t> labels{1, 0};
  const ScalarObjective objective = [&](Tape<double>& tape, std::span<const Var<double>> leaves) {
    ParamBinding<double> binding(tape, store, false);
    for (std::size_t i = 0; i < leaves.size(); ++i) binding.bind(store.names()[i], leaves[i]);
    const auto s = illum_forward(tape.constant(img), binding, config);
    return illum_loss(s, labels);
  };
  GradCheckOptions options;
  options.detect_nonsmooth = true;
  const auto report = grad_check(objective, inputs, options);
  testing::expect_grad_ok(report);
  EXPECT_TRUE(report.passed());
}

DualFeature<double> random_pair(Tape<double>& tape, Rng& rng) {
  return {tape.constant(random_tensor(Shape{2, 4, 3, 3}, rng)), tape.constant(random_tensor(Shape{2, 4, 3, 3}, rng)),
          3};
}

TEST(Gate, EqualWeightsGiveEqualNorms) {
  Rng rng(5);
  Tape<double> tape;
  const auto f = random_pair(tape, rng);
  const auto w = tape.constant(Tensor<double>::full(Shape{2, 1, 1, 1}, 0.5));
  const auto g = gate_apply(f, w, w);
  for (int n = 0; n < 2; ++n) {
    for (int y = 0; y < 3; ++y) {
      for (int x = 0; x < 3; ++x) {
        double nr = 0.0, nt = 0.0;
        for (int c = 0; c < 4; ++c) {
          nr += std::pow(g.rgb.value().at(n, c, y, x), 2);
          nt += std::pow(g.thermal.value().at(n, c, y, x), 2);
        }
        EXPECT_NEAR(std::sqrt(nr), 10.0, 1e-9);
        EXPECT_NEAR(std::sqrt(nt), 10.0, 1e-9);
      }
    }
  }
}

TEST(Gate, PositiveRescaleOfRgbWeightIsInvisible) {
  Rng rng(6);
  Tape<double> tape;
  const auto f = random_pair(tape, rng);
  const auto w_t = tape.constant(Tensor<double>::full(Shape{2, 1, 1, 1}, 0.4));
  const auto a = gate_apply(f, tape.constant(Tensor<double>::full(Shape{2, 1, 1, 1}, 0.6)), w_t);
  const auto b = gate_apply(f, tape.constant(Tensor<double>::full(Shape{2, 1, 1, 1}, 0.6 * 7.5)), w_t);
  const auto x = values_of(a.rgb.value());
  const auto y = values_of(b.rgb.value());
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_NEAR(x[k], y[k], 1e-12);
}

TEST(Gate, ZeroWeightCollapsesStreamToZero) {
  Rng rng(7);
  Tape<double> tape;
  const auto f = random_pair(tape, rng);
  const auto g = gate_apply(f, tape.constant(Tensor<double>(Shape{2, 1, 1, 1})),
                            tape.constant(Tensor<double>::full(Shape{2, 1, 1, 1}, 1.0)));
  for (double v : g.rgb.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(IllumNet, LearnsDayNightOnSyntheticScenes) {
  SynthParams sp;
  const auto train_set = synth_generate(96, 21, sp);
  const auto test_set = synth_generate(64, 22, sp);
  Rng rng(8);
  ParamStore<float> store;
  init_illumination(store, rng);
  auto batch_of = [](const std::vector<SyntheticScene>& scenes, std::size_t begin, std::size_t end) {
    const int h = scenes[0].rgb.shape()[1], w = scenes[0].rgb.shape()[2];
    Tensor<float> img(Shape{static_cast<int>(end - begin), 3, h, w});
    std::vector<std::uint8_t> labels;
    for (std::size_t i = begin; i < end; ++i) {
      std::copy(scenes[i].rgb.raw(), scenes[i].rgb.raw() + scenes[i].rgb.numel(),
                img.raw() + (i - begin) * scenes[i].rgb.numel());
      labels.push_back(scenes[i].day ? 1 : 0);
    }
    return std::make_pair(img, labels);
  };
  Adam adam(2e-3);
  for (int epoch = 0; epoch < 12; ++epoch) {
    for (std::size_t b = 0; b < train_set.size(); b += 16) {
      const auto [img, labels] = batch_of(train_set, b, b + 16);
      Tape<float> tape;
      ParamBinding<float> binding(tape, store);
      const auto s = illum_forward(tape.constant(img), binding);
      tape.backward(illum_loss(s, labels));
      adam.step(store, binding.gradients());
    }
  }
  const auto [img, labels] = batch_of(test_set, 0, test_set.size());
  Tape<float> tape;
  ParamBinding<float> binding(tape, store, false);
  const auto s = illum_forward(tape.constant(img), binding);
  int correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += (s.w_d.value()[i] > 0.5f) == (labels[i] == 1);
  EXPECT_GT(correct, static_cast<int>(0.95 * labels.size()));
}

}  // namespace
}  // namespace mbfuse
