#pragma once

#include <span>
#include <vector>

#include "mbfuse/tape.hpp"

namespace mbfuse {

// Elementwise binary ops. `b` either matches `a`, is rank-1 of length C for a
// rank-4 `a` (channel broadcast), or has a's rank with every extent equal to
// a's or 1.
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

// scale * x + offset with constant coefficients.
template <typename T>
Var<T> affine(Var<T> x, double scale, double offset = 0.0);

template <typename T>
Var<T> relu(Var<T> x);
template <typename T>
Var<T> tanh(Var<T> x);
template <typename T>
Var<T> sigmoid(Var<T> x);
template <typename T>
Var<T> softmax(Var<T> x, int axis);
// Gradient passes where lo <= x <= hi.
template <typename T>
Var<T> clamp(Var<T> x, double lo, double hi);

/// Direct 2-D convolution. weight is (C_out, C_in, k, k), bias is (C_out).
/// H_out = floor((H + 2 pad - k) / stride) + 1.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride = 1, int pad = 0);

template <typename T>
Var<T> maxpool2(Var<T> x);
template <typename T>
Var<T> global_avg(Var<T> x);

// x is (N, ...) flattened per sample; weight (out, in); bias (out) -> (N, out).
template <typename T>
Var<T> fully_connected(Var<T> x, Var<T> weight, Var<T> bias);

enum class NormAxis {
  kPosition,  // across channels at each (n, h, w)
  kChannel,   // across (h, w) for each (n, c)
  kMap,       // across (c, h, w) for each n
};

inline constexpr double kL2Epsilon = 1e-8;

// Rescales each normalization group to L2 norm `target`; the denominator is
// max(norm, kL2Epsilon), so all-zero groups stay zero.
template <typename T>
Var<T> l2_rescale(Var<T> x, double target, NormAxis axis = NormAxis::kPosition);

/// out(n,c,y,x) = bilinear read of x at (x + dx, y + dy), with dx, dy taken
/// from channels 0 and 1 of `offsets` (N, 2, H, W). Source coordinates clamp
/// to [0, extent - 1].
template <typename T>
Var<T> bilinear_sample(Var<T> x, Var<T> offsets);

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts);
template <typename T>
Var<T> slice_channels(Var<T> x, int begin, int count);
template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

template <typename T>
Var<T> sum(Var<T> x);
template <typename T>
Var<T> mean(Var<T> x);

inline constexpr double kProbClamp = 1e-7;

/// Focal classification loss over probabilities `probs` with per-element
/// labels (1 positive, 0 negative, anything else ignored), divided by
/// `normalizer`. Probabilities are clamped to [1e-7, 1 - 1e-7].
template <typename T>
Var<T> focal_loss(Var<T> probs, const Tensor<T>& labels, double alpha, double gamma, double normalizer);

/// Smooth-L1 summed over entries where mask != 0, divided by `normalizer`.
template <typename T>
Var<T> smooth_l1(Var<T> pred, const Tensor<T>& target, const Tensor<T>& mask, double normalizer);

/// Mean over rows of -sum_k onehot(n,k) log probs(n,k); probs is (N, K).
template <typename T>
Var<T> cross_entropy(Var<T> probs, const Tensor<T>& onehot);

// Bilinear image resize (no gradient; used for input preprocessing).
template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w);

}  // namespace mbfuse
