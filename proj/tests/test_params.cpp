#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mbfuse/ops.hpp"
#include "mbfuse/params.hpp"

namespace mbfuse {
namespace {

namespace fs = std::filesystem;

ParamStore<float> sample_store() {
  Rng rng(4);
  ParamStore<float> s;
  s.add("conv.w", Tensor<float>::uniform(Shape{2, 3, 3, 3}, rng, -1.0, 1.0));
  s.add("conv.b", Tensor<float>(Shape{2}, std::vector<float>{0.5f, -0.25f}));
  s.add("scale", Tensor<float>::scalar(3.0f));
  return s;
}

std::string fresh_dir(const std::string& name) {
  const std::string dir = ::testing::TempDir() + name;
  fs::remove_all(dir);
  return dir;
}

TEST(ParamStore, OrderLookupAndErrors) {
  auto s = sample_store();
  EXPECT_EQ(s.names(), (std::vector<std::string>{"conv.w", "conv.b", "scale"}));
  EXPECT_EQ(s.total_elements(), 54u + 2u + 1u);
  EXPECT_EQ(s.get("conv.b")[1], -0.25f);
  EXPECT_THROW(s.add("scale", Tensor<float>::scalar(1.0f)), Error);
  EXPECT_THROW(s.get("missing"), Error);
}

TEST(Checkpoint, RoundTripKeepsValuesAndMetadata) {
  const auto s = sample_store();
  const std::string dir = fresh_dir("ckpt_rt");
  save_checkpoint(dir, s, {{"seed", "7"}, {"dmaf", "on"}});
  const auto back = load_checkpoint(dir);
  EXPECT_TRUE(back.params == s);
  EXPECT_EQ(back.metadata.at("seed"), "7");
  EXPECT_EQ(back.metadata.at("dmaf"), "on");
  std::ifstream index(dir + "/index.txt");
  std::string text((std::istreambuf_iterator<char>(index)), {});
  EXPECT_NE(text.find("conv.w 2x3x3x3 0\n"), std::string::npos);
  // MBT1 record: magic, rank byte, 4 dims, 54 floats.
  EXPECT_NE(text.find("conv.b 2 " + std::to_string(4 + 1 + 16 + 54 * 4) + "\n"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Checkpoint, SavingTwiceGivesIdenticalBytes) {
  const auto s = sample_store();
  const std::string a = fresh_dir("ckpt_a"), b = fresh_dir("ckpt_b");
  save_checkpoint(a, s, {{"k", "v"}});
  save_checkpoint(b, s, {{"k", "v"}});
  for (const char* f : {"/params.mbt", "/index.txt"}) {
    std::ifstream x(a + f, std::ios::binary), y(b + f, std::ios::binary);
    const std::string bx((std::istreambuf_iterator<char>(x)), {}), by((std::istreambuf_iterator<char>(y)), {});
    EXPECT_EQ(bx, by) << f;
  }
}

TEST(Checkpoint, CorruptIndexIsRejected) {
  const std::string dir = fresh_dir("ckpt_bad");
  save_checkpoint(dir, sample_store(), {});
  std::ofstream(dir + "/index.txt", std::ios::app) << "broken-line\n";
  try {
    load_checkpoint(dir);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("index.txt:4"), std::string::npos) << e.what();
  }
  std::ofstream(dir + "/index.txt") << "conv.w 9x9 0\n";
  EXPECT_THROW(load_checkpoint(dir), ParseError);
  EXPECT_THROW(load_checkpoint(fresh_dir("ckpt_missing")), Error);
}

TEST(Binding, LeavesAreSharedAndGradientsInStoreOrder) {
  const auto s = sample_store().cast<double>();
  Tape<double> tape;
  ParamBinding<double> p(tape, s);
  auto a = p("scale");
  auto b = p("scale");
  auto loss = sum(mul(p("conv.b"), add(a, b)));
  tape.backward(loss);
  const auto grads = p.gradients();
  ASSERT_EQ(grads.size(), 3u);
  for (const double g : grads[0].data()) EXPECT_EQ(g, 0.0);
  EXPECT_EQ(grads[1][0], 6.0);
  EXPECT_EQ(grads[2][0], 2.0 * (0.5 - 0.25));
}

TEST(Binding, BindRejectsUnknownMismatchedAndDuplicate) {
  const auto s = sample_store().cast<double>();
  Tape<double> tape;
  ParamBinding<double> p(tape, s);
  EXPECT_THROW(p.bind("nope", tape.leaf(Tensor<double>::scalar(1.0), true)), Error);
  EXPECT_THROW(p.bind("scale", tape.leaf(Tensor<double>(Shape{2}), true)), ShapeError);
  auto v = tape.leaf(Tensor<double>::scalar(2.0), true);
  p.bind("scale", v);
  EXPECT_EQ(p("scale").value()[0], 2.0);
  EXPECT_THROW(p.bind("scale", v), Error);
  EXPECT_THROW(p("unknown"), Error);
}

TEST(Xavier, BoundsFollowFanInAndOut) {
  Rng rng(1);
  const auto w = xavier_uniform<double>(Shape{6, 4, 3, 3}, rng);
  const double limit = std::sqrt(6.0 / (4 * 9 + 6 * 9));
  double lo = 1.0, hi = -1.0;
  for (const double v : w.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_GE(lo, -limit);
  EXPECT_LE(hi, limit);
  EXPECT_GT(hi, 0.8 * limit);
  EXPECT_LT(lo, -0.8 * limit);
  const auto fc = xavier_uniform<double>(Shape{16, 64}, rng);
  for (const double v : fc.data()) EXPECT_LE(std::abs(v), std::sqrt(6.0 / 80.0));
  EXPECT_THROW(xavier_uniform<double>(Shape{3}, rng), ShapeError);
}

}  // namespace
}  // namespace mbfuse
