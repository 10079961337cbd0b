#include <gtest/gtest.h>

#include <sstream>

#include "mbfuse/ops.hpp"
#include "mbfuse/tensor.hpp"
#include "test_support.hpp"

namespace mbfuse {
namespace {

TEST(Shape, NumelAndAccessors) {
  Shape s{2, 3, 4, 5};
  EXPECT_EQ(s.rank(), 4);
  EXPECT_EQ(s.numel(), 120u);
  EXPECT_EQ(s.c(), 3);
  EXPECT_EQ(s.str(), "(2,3,4,5)");
}

TEST(Shape, RejectsBadExtents) {
  EXPECT_THROW((Shape{1, 0}), ShapeError);
  EXPECT_THROW((Shape{1, 1, 1, 1, 1}), ShapeError);
}

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Tensor, Mbt1RoundTripIsExactForFloatValues) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int rank = 1 + static_cast<int>(rng.below(4));
    std::vector<int> dims;
    for (int i = 0; i < rank; ++i) dims.push_back(1 + static_cast<int>(rng.below(5)));
    const auto t = Tensor<float>::normal(Shape(dims), rng, 0.0, 10.0);
    std::stringstream buf;
    write_mbt1(buf, t);
    EXPECT_EQ(buf.str().size(), mbt1_record_size(t.shape()));
    const auto back = read_mbt1<float>(buf);
    ASSERT_EQ(back.shape(), t.shape());
    EXPECT_EQ(testing::values_of(back), testing::values_of(t));
  }
}

TEST(Tensor, Mbt1LayoutIsLittleEndian) {
  Tensor<float> t(Shape{2}, std::vector<float>{1.0f, -2.0f});
  std::stringstream buf;
  write_mbt1(buf, t);
  const std::string bytes = buf.str();
  ASSERT_EQ(bytes.size(), 4u + 1u + 4u + 8u);
  EXPECT_EQ(bytes.substr(0, 4), "MBT1");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), 2);
  EXPECT_EQ(bytes[6], 0);
  // 1.0f = 0x3F800000
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(bytes[11]), 0x80);
}

TEST(Tensor, Mbt1RejectsBadMagic) {
  std::stringstream buf("MBT2\x01");
  EXPECT_THROW(read_mbt1<float>(buf), ParseError);
}

TEST(Rng, SameSeedSameSequence) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next();
    EXPECT_EQ(va, b.next());
    differs = differs || va != c.next();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformAndBelowStayInRange) {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(rng.below(7), 7u);
  }
}

TEST(Tape, BackwardOfSumIsOnes) {
  Tape<double> tape;
  Rng rng(5);
  auto x = tape.leaf(Tensor<double>::uniform(Shape{2, 3}, rng, -1, 1));
  auto root = sum(x);
  tape.backward(root);
  const auto grad = tape.grad(x);
  for (double g : grad.data()) EXPECT_EQ(g, 1.0);
}

TEST(Tape, BackwardOfSumOfSquaresIsTwoX) {
  Tape<double> tape;
  Rng rng(6);
  const auto xv = Tensor<double>::uniform(Shape{4}, rng, -1, 1);
  auto x = tape.leaf(xv);
  tape.backward(sum(mul(x, x)));
  const auto g = tape.grad(x);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(g[i], 2.0 * xv[i]);
}

TEST(Tape, FanOutAccumulatesAndEachNodeVisitedOnce) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::full(Shape{3}, 2.0));
  auto y = add(x, x);     // fan-out of x
  auto z = mul(y, x);     // x used a third time
  auto root = sum(z);     // root = sum(2x * x) -> d/dx = 4x = 8
  tape.backward(root);
  const auto grad = tape.grad(x);
  for (double g : grad.data()) EXPECT_DOUBLE_EQ(g, 8.0);
  EXPECT_EQ(tape.last_backward_visits(), 3u);  // add, mul, sum
}

TEST(Tape, NonScalarRootRejected) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::full(Shape{3}, 1.0));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Tape, NonFiniteValueIsAnError) {
  Tape<float> tape;
  auto x = tape.leaf(Tensor<float>::full(Shape{1}, 1e30f));
  EXPECT_THROW(mul(x, x), NumericError);
  EXPECT_THROW(tape.leaf(Tensor<float>::full(Shape{1}, std::numeric_limits<float>::quiet_NaN())),
               NumericError);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>::full(Shape{2}, 1.0));
  auto c = tape.constant(Tensor<double>::full(Shape{2}, 3.0));
  tape.backward(sum(mul(x, c)));
  EXPECT_FALSE(tape.has_grad(c.id()));
  EXPECT_EQ(tape.grad(x)[0], 3.0);
}

TEST(Tape, ReplayIsBitIdentical) {
  auto run = [] {
    Rng rng(11);
    Tape<float> tape;
    auto x = tape.leaf(Tensor<float>::uniform(Shape{1, 2, 6, 6}, rng, -1, 1));
    auto w = tape.leaf(Tensor<float>::uniform(Shape{3, 2, 3, 3}, rng, -1, 1));
    auto b = tape.leaf(Tensor<float>::uniform(Shape{3}, rng, -1, 1));
    auto y = tanh(conv2d(x, w, b, 1, 1));
    return testing::values_of(y.value());
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace mbfuse
