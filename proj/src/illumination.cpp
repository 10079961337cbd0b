#include "mbfuse/illumination.hpp"

#include <algorithm>

namespace mbfuse {

namespace {

constexpr int kConv1 = 8;
constexpr int kConv2 = 16;
constexpr int kHidden1 = 64;
constexpr int kHidden2 = 16;

template <typename T>
void add_layer(ParamStore<T>& store, const std::string& name, Shape weight, int bias, Rng& rng) {
  store.add(name + ".w", xavier_uniform<T>(weight, rng));
  store.add(name + ".b", Tensor<T>(Shape{bias}));
}

template <typename T>
Var<T> fc(ParamBinding<T>& p, const std::string& name, Var<T> x) {
  return fully_connected(x, p(name + ".w"), p(name + ".b"));
}

int flat_features(const IllumConfig& config) {
  if (config.input_size % 4 != 0) throw Error("illumination input size must be divisible by 4");
  const int side = config.input_size / 4;
  return kConv2 * side * side;
}

}  // namespace

GateWeights illum_reweight(double w_d, double w_n, double w_abs, double alpha, double gamma, bool clamp) {
  double w_r = (w_d - w_n) * 0.5 * (alpha * w_abs + gamma) + 0.5;
  if (clamp) w_r = std::clamp(w_r, 0.0, 1.0);
  return {w_r, 1.0 - w_r};
}

template <typename T>
void illum_reweight(IllumState<T>& s, bool clamp_gate) {
  const auto half_diff = affine(sub(s.w_d, s.w_n), 0.5);
  const auto strength = add(mul(s.w_abs, s.alpha), s.gamma);
  s.w_r = affine(mul(half_diff, strength), 1.0, 0.5);
  if (clamp_gate) s.w_r = clamp(s.w_r, 0.0, 1.0);
  s.w_t = affine(s.w_r, -1.0, 1.0);
}

template <typename T>
void init_illumination(ParamStore<T>& store, Rng& rng, const IllumConfig& config) {
  add_layer(store, "illum.conv1", Shape{kConv1, 3, 3, 3}, kConv1, rng);
  add_layer(store, "illum.conv2", Shape{kConv2, kConv1, 3, 3}, kConv2, rng);
  add_layer(store, "illum.fc1", Shape{kHidden1, flat_features(config)}, kHidden1, rng);
  add_layer(store, "illum.fc2", Shape{kHidden2, kHidden1}, kHidden2, rng);
  store.add("illum.cls.w", Tensor<T>(Shape{2, kHidden2}));
  store.add("illum.cls.b", Tensor<T>(Shape{2}));
  add_layer(store, "illum.abs", Shape{1, kHidden2}, 1, rng);
  store.add("illum.alpha", Tensor<T>::full(Shape{1, 1, 1, 1}, T(1)));
  store.add("illum.gamma", Tensor<T>(Shape{1, 1, 1, 1}));
}

template <typename T>
IllumState<T> illum_forward(Var<T> rgb_img, ParamBinding<T>& p, const IllumConfig& config) {
  const Shape& s = rgb_img.shape();
  if (s.rank() != 4 || s.c() != 3) throw ShapeError("illum_forward: expected (N,3,H,W) image, got " + s.str());
  const int n = s.n();
  auto& tape = p.tape();
  auto x = tape.constant(resize_bilinear(rgb_img.value(), config.input_size, config.input_size));
  x = maxpool2(relu(conv2d(x, p("illum.conv1.w"), p("illum.conv1.b"), 1, 1)));
  x = maxpool2(relu(conv2d(x, p("illum.conv2.w"), p("illum.conv2.b"), 1, 1)));
  x = relu(fc(p, "illum.fc1", x));
  x = relu(fc(p, "illum.fc2", x));
  const auto probs = reshape(softmax(fc(p, "illum.cls", x), 1), Shape{n, 2, 1, 1});
  IllumState<T> state;
  state.w_d = slice_channels(probs, 0, 1);
  state.w_n = slice_channels(probs, 1, 1);
  state.w_abs = reshape(sigmoid(fc(p, "illum.abs", x)), Shape{n, 1, 1, 1});
  state.alpha = p("illum.alpha");
  state.gamma = p("illum.gamma");
  illum_reweight(state, config.clamp_gate);
  return state;
}

template <typename T>
Var<T> illum_loss(const IllumState<T>& state, std::span<const std::uint8_t> is_day) {
  const int n = state.w_d.shape().n();
  if (static_cast<int>(is_day.size()) != n) throw ShapeError("illum_loss: one label per image required");
  Tensor<T> onehot(Shape{n, 2});
  for (int i = 0; i < n; ++i) onehot[static_cast<std::size_t>(i) * 2 + (is_day[i] ? 0 : 1)] = T(1);
  const std::vector<Var<T>> parts{state.w_d, state.w_n};
  const auto probs = reshape(concat_channels<T>(parts), Shape{n, 2});
  return cross_entropy(probs, onehot);
}

template <typename T>
DualFeature<T> gate_apply(const DualFeature<T>& f, Var<T> w_r, Var<T> w_t, double target, NormAxis axis) {
  return {l2_rescale(mul(f.rgb, w_r), target, axis), l2_rescale(mul(f.thermal, w_t), target, axis), f.stage};
}

#define MBFUSE_INSTANTIATE_ILLUM(T)                                                        \
  template void illum_reweight(IllumState<T>&, bool);                                      \
  template void init_illumination(ParamStore<T>&, Rng&, const IllumConfig&);               \
  template IllumState<T> illum_forward(Var<T>, ParamBinding<T>&, const IllumConfig&);      \
  template Var<T> illum_loss(const IllumState<T>&, std::span<const std::uint8_t>);         \
  template DualFeature<T> gate_apply(const DualFeature<T>&, Var<T>, Var<T>, double, NormAxis);

MBFUSE_INSTANTIATE_ILLUM(float)
MBFUSE_INSTANTIATE_ILLUM(double)

}  // namespace mbfuse
