#include "mbfuse/ops.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <string>

namespace mbfuse {
namespace {

// Accumulator type for every reduction, independent of storage precision.
using Acc = double;

template <typename T>
std::span<T> maybe_grad(Tape<T>& tape, std::uint32_t id) {
  return tape.requires_grad(id) ? tape.grad_buffer(id) : std::span<T>();
}

void require_rank4(const Shape& s, const char* op) {
  if (s.rank() != 4) throw ShapeError(std::string(op) + ": expected a rank-4 tensor, got " + s.str());
}

// ---------------------------------------------------------------------------
// Broadcasting for the elementwise family.

struct BroadcastPlan {
  bool same = true;
  std::array<int, 4> dims{1, 1, 1, 1};            // a's extents, front-padded
  std::array<std::size_t, 4> b_stride{0, 0, 0, 0};  // 0 on broadcast axes
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan plan;
  if (a == b) return plan;
  plan.same = false;
  const int pad = 4 - a.rank();
  for (int i = 0; i < a.rank(); ++i) plan.dims[static_cast<std::size_t>(pad + i)] = a[i];

  std::array<int, 4> bd{1, 1, 1, 1};
  if (b.rank() == 1 && a.rank() == 4 && b[0] == a.c()) {
    bd[1] = b[0];
  } else if (b.rank() == a.rank()) {
    for (int i = 0; i < a.rank(); ++i) {
      if (b[i] != a[i] && b[i] != 1) {
        throw ShapeError(std::string(op) + ": cannot broadcast " + b.str() + " onto " + a.str());
      }
      bd[static_cast<std::size_t>(pad + i)] = b[i];
    }
  } else {
    throw ShapeError(std::string(op) + ": cannot broadcast " + b.str() + " onto " + a.str());
  }
  std::size_t stride = 1;
  for (int i = 3; i >= 0; --i) {
    const auto k = static_cast<std::size_t>(i);
    plan.b_stride[k] = bd[k] == 1 ? 0 : stride;
    stride *= static_cast<std::size_t>(bd[k]);
  }
  return plan;
}

// Calls fn(ia, ib) for every element of a with its broadcast partner in b.
template <typename Fn>
void for_each_pair(const BroadcastPlan& plan, std::size_t numel, Fn&& fn) {
  if (plan.same) {
    for (std::size_t i = 0; i < numel; ++i) fn(i, i);
    return;
  }
  const auto& d = plan.dims;
  const auto& s = plan.b_stride;
  std::size_t ia = 0;
  for (int i0 = 0; i0 < d[0]; ++i0) {
    for (int i1 = 0; i1 < d[1]; ++i1) {
      for (int i2 = 0; i2 < d[2]; ++i2) {
        const std::size_t base = static_cast<std::size_t>(i0) * s[0] + static_cast<std::size_t>(i1) * s[1] +
                                 static_cast<std::size_t>(i2) * s[2];
        for (int i3 = 0; i3 < d[3]; ++i3, ++ia) fn(ia, base + static_cast<std::size_t>(i3) * s[3]);
      }
    }
  }
}

enum class BinaryKind { kAdd, kSub, kMul };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, BinaryKind kind, const char* op) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const BroadcastPlan plan = plan_broadcast(av.shape(), bv.shape(), op);
  Tensor<T> out(av.shape());
  const T* pa = av.raw();
  const T* pb = bv.raw();
  T* po = out.raw();
  switch (kind) {
    case BinaryKind::kAdd:
      for_each_pair(plan, av.numel(), [&](std::size_t i, std::size_t j) { po[i] = pa[i] + pb[j]; });
      break;
    case BinaryKind::kSub:
      for_each_pair(plan, av.numel(), [&](std::size_t i, std::size_t j) { po[i] = pa[i] - pb[j]; });
      break;
    case BinaryKind::kMul:
      for_each_pair(plan, av.numel(), [&](std::size_t i, std::size_t j) { po[i] = pa[i] * pb[j]; });
      break;
  }
  const std::uint32_t ia = a.id();
  const std::uint32_t ib = b.id();
  return a.tape().record(op, std::move(out), {a, b}, [plan, ia, ib, kind](Tape<T>& tape, std::uint32_t self) {
    const auto g = tape.grad_view(self);
    const std::size_t n = g.size();
    if (tape.requires_grad(ia)) {
      auto ga = tape.grad_buffer(ia);
      if (kind == BinaryKind::kMul) {
        const T* pb = tape.value(ib).raw();
        for_each_pair(plan, n, [&](std::size_t i, std::size_t j) { ga[i] += g[i] * pb[j]; });
      } else {
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
    }
    if (tape.requires_grad(ib)) {
      auto gb = tape.grad_buffer(ib);
      std::vector<Acc> acc(gb.size(), 0.0);
      if (kind == BinaryKind::kMul) {
        const T* pa = tape.value(ia).raw();
        for_each_pair(plan, n, [&](std::size_t i, std::size_t j) { acc[j] += Acc(g[i]) * Acc(pa[i]); });
      } else {
        const Acc sign = kind == BinaryKind::kSub ? -1.0 : 1.0;
        for_each_pair(plan, n, [&](std::size_t i, std::size_t j) { acc[j] += sign * Acc(g[i]); });
      }
      for (std::size_t j = 0; j < gb.size(); ++j) gb[j] += static_cast<T>(acc[j]);
    }
  });
}

// Dot product with eight independent 64-bit partial sums so the loop
// vectorizes without reassociation flags; the summation order is fixed.
template <typename T>
Acc dot(const T* a, const T* b, int n) {
  Acc part[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    for (int k = 0; k < 8; ++k) part[k] += Acc(a[i + k]) * Acc(b[i + k]);
  }
  Acc total = ((part[0] + part[1]) + (part[2] + part[3])) + ((part[4] + part[5]) + (part[6] + part[7]));
  for (; i < n; ++i) total += Acc(a[i]) * Acc(b[i]);
  return total;
}

// Valid output range [lo, hi) along one axis for kernel tap `k`.
struct TapRange {
  int lo;
  int hi;
};

TapRange tap_range(int in_extent, int out_extent, int stride, int pad, int k) {
  // Need 0 <= o * stride - pad + k <= in_extent - 1.
  const int lo_num = pad - k;
  int lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
  const int hi_num = in_extent - 1 + pad - k;
  int hi = hi_num < 0 ? 0 : std::min(out_extent, hi_num / stride + 1);
  if (lo > hi) lo = hi;
  return {lo, hi};
}

// Visits the normalization groups of l2_rescale: fn(base, stride, count).
template <typename Fn>
void for_each_norm_group(const Shape& s, NormAxis axis, Fn&& fn) {
  const std::size_t n = static_cast<std::size_t>(s.n());
  const std::size_t c = static_cast<std::size_t>(s.c());
  const std::size_t hw = static_cast<std::size_t>(s.h()) * static_cast<std::size_t>(s.w());
  switch (axis) {
    case NormAxis::kPosition:
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < hw; ++p) fn(i * c * hw + p, hw, c);
      }
      break;
    case NormAxis::kChannel:
      for (std::size_t i = 0; i < n * c; ++i) fn(i * hw, std::size_t{1}, hw);
      break;
    case NormAxis::kMap:
      for (std::size_t i = 0; i < n; ++i) fn(i * c * hw, std::size_t{1}, c * hw);
      break;
  }
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary(a, b, BinaryKind::kAdd, "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary(a, b, BinaryKind::kSub, "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary(a, b, BinaryKind::kMul, "mul");
}

template <typename T>
Var<T> affine(Var<T> x, double scale, double offset) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    out[i] = static_cast<T>(static_cast<T>(scale) * xv[i] + static_cast<T>(offset));
  }
  const std::uint32_t ix = x.id();
  return x.tape().record("affine", std::move(out), {x}, [ix, scale](Tape<T>& tape, std::uint32_t self) {
    const auto g = tape.grad_view(self);
    auto gx = tape.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += static_cast<T>(scale) * g[i];
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  const std::uint32_t ix = x.id();
  return x.tape().record("relu", std::move(out), {x}, [ix](Tape<T>& tape, std::uint32_t self) {
    const auto g = tape.grad_view(self);
    const T* xv = tape.value(ix).raw();
    auto gx = tape.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T(0)) gx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> tanh(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = std::tanh(xv[i]);
  const std::uint32_t ix = x.id();
  return x.tape().record("tanh", std::move(out), {x}, [ix](Tape<T>& tape, std::uint32_t self) {
    const auto g = tape.grad_view(self);
    const T* y = tape.value(self).raw();
    auto gx = tape.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
  });
}

template <typename T>
Var<T> clamp(Var<T> x, double lo, double hi) {
  if (!(lo <= hi)) throw Error("clamp: lo > hi");
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  const T l = static_cast<T>(lo), h = static_cast<T>(hi);
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = std::min(std::max(xv[i], l), h);
  const std::uint32_t ix = x.id();
  return x.tape().record("clamp", std::move(out), {x}, [ix, l, h](Tape<T>& tape, std::uint32_t self) {
    const auto g = tape.grad_view(self);
    const T* xv = tape.value(ix).raw();
    auto gx = tape.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] >= l && xv[i] <= h) gx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    // Branches keep exp() from overflowing on either tail.
    const T v = xv[i];
    if (v >= T(0)) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  const std::uint32_t ix = x.id();
  return x.tape().record("sigmoid", std::move(out), {x}, [ix](Tape<T>& tape, std::uint32_t self) {
    const auto g = tape.grad_view(self);
    const T* y = tape.value(self).raw();
    auto gx = tape.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Var<T> softmax(Var<T> x, int axis) {
  const Tensor<T>& xv = x.value();
  const Shape& s = xv.shape();
  if (axis < 0) axis += s.rank();
  if (axis < 0 || axis >= s.rank()) throw ShapeError("softmax: axis out of range for " + s.str());
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
  for (int i = axis + 1; i < s.rank(); ++i) inner *= static_cast<std::size_t>(s[i]);
  const auto len = static_cast<std::size_t>(s[axis]);

  Tensor<T> out(s);
  std::vector<Acc> e(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      Acc m = xv[base];
      for (std::size_t k = 1; k < len; ++k) m = std::max<Acc>(m, xv[base + k * inner]);
      Acc total = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        e[k] = std::exp(Acc(xv[base + k * inner]) - m);
        total += e[k];
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] = static_cast<T>(e[k] / total);
    }
  }
  const std::uint32_t ix = x.id();
  return x.tape().record("softmax", std::move(out), {x},
                         [ix, outer, inner, len](Tape<T>& tape, std::uint32_t self) {
                           const auto g = tape.grad_view(self);
                           const T* y = tape.value(self).raw();
                           auto gx = tape.grad_buffer(ix);
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t in = 0; in < inner; ++in) {
                               const std::size_t base = o * len * inner + in;
                               Acc dot = 0.0;
                               for (std::size_t k = 0; k < len; ++k) {
                                 dot += Acc(g[base + k * inner]) * Acc(y[base + k * inner]);
                               }
                               for (std::size_t k = 0; k < len; ++k) {
                                 const std::size_t i = base + k * inner;
                                 gx[i] += static_cast<T>(Acc(y[i]) * (Acc(g[i]) - dot));
                               }
                             }
                           }
                         });
}

namespace {

// im2col layout: row (ci, ky, kx), column (oy, ox); taps outside the padded
// input read as zero.
template <typename T>
void im2col(const T* x, int c_in, int h, int w, int k, int stride, int pad, int ho, int wo, Acc* cols) {
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int ci = 0; ci < c_in; ++ci) {
    const T* src = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      const TapRange ry = tap_range(h, ho, stride, pad, ky);
      for (int kx = 0; kx < k; ++kx) {
        const TapRange rx = tap_range(w, wo, stride, pad, kx);
        Acc* row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * plane;
        std::fill(row, row + plane, Acc(0));
        for (int oy = ry.lo; oy < ry.hi; ++oy) {
          const T* s = src + static_cast<std::size_t>(oy * stride - pad + ky) * w - pad + kx;
          Acc* d = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = rx.lo; ox < rx.hi; ++ox) d[ox] = Acc(s[ox * stride]);
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column rows back onto the input plane.
void col2im(const Acc* cols, int c_in, int h, int w, int k, int stride, int pad, int ho, int wo, Acc* x) {
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int ci = 0; ci < c_in; ++ci) {
    Acc* dst = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      const TapRange ry = tap_range(h, ho, stride, pad, ky);
      for (int kx = 0; kx < k; ++kx) {
        const TapRange rx = tap_range(w, wo, stride, pad, kx);
        const Acc* row = cols + ((static_cast<std::size_t>(ci) * k + ky) * k + kx) * plane;
        for (int oy = ry.lo; oy < ry.hi; ++oy) {
          Acc* d = dst + static_cast<std::size_t>(oy * stride - pad + ky) * w - pad + kx;
          const Acc* s = row + static_cast<std::size_t>(oy) * wo;
          for (int ox = rx.lo; ox < rx.hi; ++ox) d[ox * stride] += s[ox];
        }
      }
    }
  }
}

using Vec4 = Acc __attribute__((vector_size(4 * sizeof(Acc))));

inline Vec4 load4(const Acc* p) {
  Vec4 v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

inline void store4(Acc* p, Vec4 v) { std::memcpy(p, &v, sizeof(v)); }

// C[m][p] += sum_j A(m, j) B[j][p], A(m, j) = a[m * a_row + j * a_col].
// Register tile of 4 rows x 8 columns; the j order is fixed.
void gemm_nn(int rows, int inner, int cols, const Acc* a, std::size_t a_row, std::size_t a_col, const Acc* b,
             Acc* c) {
  constexpr int kM = 4;
  const std::size_t ld = static_cast<std::size_t>(cols);
  int m0 = 0;
  for (; m0 + kM <= rows; m0 += kM) {
    const Acc* a0 = a + m0 * a_row;
    int p0 = 0;
    for (; p0 + 8 <= cols; p0 += 8) {
      Vec4 lo[kM], hi[kM];
      for (int r = 0; r < kM; ++r) {
        lo[r] = load4(c + (m0 + r) * ld + p0);
        hi[r] = load4(c + (m0 + r) * ld + p0 + 4);
      }
      for (int j = 0; j < inner; ++j) {
        const Vec4 bl = load4(b + j * ld + p0);
        const Vec4 bh = load4(b + j * ld + p0 + 4);
        const Acc* aj = a0 + j * a_col;
        for (int r = 0; r < kM; ++r) {
          const Acc av = aj[r * a_row];
          lo[r] += av * bl;
          hi[r] += av * bh;
        }
      }
      for (int r = 0; r < kM; ++r) {
        store4(c + (m0 + r) * ld + p0, lo[r]);
        store4(c + (m0 + r) * ld + p0 + 4, hi[r]);
      }
    }
    for (; p0 + 4 <= cols; p0 += 4) {
      Vec4 acc[kM];
      for (int r = 0; r < kM; ++r) acc[r] = load4(c + (m0 + r) * ld + p0);
      for (int j = 0; j < inner; ++j) {
        const Vec4 bv = load4(b + j * ld + p0);
        const Acc* aj = a0 + j * a_col;
        for (int r = 0; r < kM; ++r) acc[r] += aj[r * a_row] * bv;
      }
      for (int r = 0; r < kM; ++r) store4(c + (m0 + r) * ld + p0, acc[r]);
    }
    for (; p0 < cols; ++p0) {
      for (int r = 0; r < kM; ++r) {
        Acc s = c[(m0 + r) * ld + p0];
        for (int j = 0; j < inner; ++j) s += a0[r * a_row + j * a_col] * b[j * ld + p0];
        c[(m0 + r) * ld + p0] = s;
      }
    }
  }
  for (; m0 < rows; ++m0) {
    Acc* cm = c + m0 * ld;
    for (int j = 0; j < inner; ++j) {
      const Acc av = a[m0 * a_row + j * a_col];
      const Acc* bj = b + j * ld;
      for (int p = 0; p < cols; ++p) cm[p] += av * bj[p];
    }
  }
}

// dst (cols x rows) = src (rows x cols)^T, in blocks for locality.
void transpose(const Acc* src, std::size_t rows, std::size_t cols, Acc* dst) {
  constexpr std::size_t kB = 16;
  for (std::size_t r0 = 0; r0 < rows; r0 += kB) {
    const std::size_t r1 = std::min(rows, r0 + kB);
    for (std::size_t c0 = 0; c0 < cols; c0 += kB) {
      const std::size_t c1 = std::min(cols, c0 + kB);
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = c0; c < c1; ++c) dst[c * rows + r] = src[r * cols + c];
      }
    }
  }
}

template <typename T>
void widen(const T* src, std::size_t n, Acc* dst) {
  for (std::size_t i = 0; i < n; ++i) dst[i] = Acc(src[i]);
}

}  // namespace

// Convolution per image as a matrix product over im2col columns, all in
// 64-bit: out = W (C_out x C_in k^2) * cols (C_in k^2 x H_out W_out) + bias.
// Backward: dW += dOut * cols^T summed over images in batch order (cols is
// transposed first so the same kernel applies),
// dCols = W^T * dOut scattered back with col2im.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, int stride, int pad) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  const Tensor<T>& bv = bias.value();
  require_rank4(xv.shape(), "conv2d");
  require_rank4(wv.shape(), "conv2d weight");
  const int n_batch = xv.shape().n();
  const int c_in = xv.shape().c();
  const int h = xv.shape().h();
  const int w = xv.shape().w();
  const int c_out = wv.shape().n();
  const int k = wv.shape().h();
  if (wv.shape().c() != c_in) {
    throw ShapeError("conv2d: weight expects " + std::to_string(wv.shape().c()) + " input channels, got " +
                     std::to_string(c_in));
  }
  if (wv.shape().w() != k) throw ShapeError("conv2d: kernel must be square");
  if (bv.numel() != static_cast<std::size_t>(c_out)) throw ShapeError("conv2d: bias length mismatch");
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride or padding");
  if (h + 2 * pad < k || w + 2 * pad < k) {
    throw ShapeError("conv2d: kernel " + std::to_string(k) + " exceeds padded input " + xv.shape().str());
  }
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  const int taps = c_in * k * k;

  Tensor<T> out(Shape{n_batch, c_out, ho, wo});
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
  std::vector<Acc> wd(wv.numel());
  widen(wv.raw(), wv.numel(), wd.data());
  std::vector<Acc> cols(static_cast<std::size_t>(taps) * out_plane);
  std::vector<Acc> acc(static_cast<std::size_t>(c_out) * out_plane);
  for (int n = 0; n < n_batch; ++n) {
    im2col(xv.raw() + static_cast<std::size_t>(n) * c_in * in_plane, c_in, h, w, k, stride, pad, ho, wo, cols.data());
    for (int co = 0; co < c_out; ++co) {
      std::fill(acc.begin() + co * out_plane, acc.begin() + (co + 1) * out_plane, Acc(bv[static_cast<std::size_t>(co)]));
    }
    gemm_nn(c_out, taps, static_cast<int>(out_plane), wd.data(), taps, 1, cols.data(), acc.data());
    T* o = out.raw() + static_cast<std::size_t>(n) * c_out * out_plane;
    for (std::size_t i = 0; i < acc.size(); ++i) o[i] = static_cast<T>(acc[i]);
  }

  const std::uint32_t ix = x.id();
  const std::uint32_t iw = weight.id();
  const std::uint32_t ib = bias.id();
  return x.tape().record(
      "conv2d", std::move(out), {x, weight, bias},
      [=](Tape<T>& tape, std::uint32_t self) {
        const T* g = tape.grad_view(self).data();
        const T* xp = tape.value(ix).raw();
        const bool need_w = tape.requires_grad(iw);
        const bool need_x = tape.requires_grad(ix);
        if (tape.requires_grad(ib)) {
          auto gb = tape.grad_buffer(ib);
          for (int co = 0; co < c_out; ++co) {
            Acc s = 0.0;
            for (int n = 0; n < n_batch; ++n) {
              const T* gp = g + (static_cast<std::size_t>(n) * c_out + co) * out_plane;
              for (std::size_t i = 0; i < out_plane; ++i) s += gp[i];
            }
            gb[static_cast<std::size_t>(co)] += static_cast<T>(s);
          }
        }
        if (!need_w && !need_x) return;
        std::vector<Acc> gd(static_cast<std::size_t>(c_out) * out_plane);
        std::vector<Acc> cols_b(static_cast<std::size_t>(taps) * out_plane);
        std::vector<Acc> gw_acc(need_w ? static_cast<std::size_t>(c_out) * taps : 0);
        std::vector<Acc> cols_t(need_w ? cols_b.size() : 0);
        std::vector<Acc> wd_b;
        std::vector<Acc> gx_acc;
        if (need_x) {
          const Tensor<T>& wt = tape.value(iw);
          wd_b.resize(wt.numel());
          widen(wt.raw(), wt.numel(), wd_b.data());
          gx_acc.resize(static_cast<std::size_t>(c_in) * in_plane);
        }
        for (int n = 0; n < n_batch; ++n) {
          widen(g + static_cast<std::size_t>(n) * c_out * out_plane, gd.size(), gd.data());
          if (need_w) {
            im2col(xp + static_cast<std::size_t>(n) * c_in * in_plane, c_in, h, w, k, stride, pad, ho, wo,
                   cols_b.data());
            transpose(cols_b.data(), taps, out_plane, cols_t.data());
            gemm_nn(c_out, static_cast<int>(out_plane), taps, gd.data(), out_plane, 1, cols_t.data(), gw_acc.data());
          }
          if (need_x) {
            std::fill(cols_b.begin(), cols_b.end(), Acc(0));
            gemm_nn(taps, c_out, static_cast<int>(out_plane), wd_b.data(), 1, taps, gd.data(), cols_b.data());
            std::fill(gx_acc.begin(), gx_acc.end(), Acc(0));
            col2im(cols_b.data(), c_in, h, w, k, stride, pad, ho, wo, gx_acc.data());
            T* gxp = tape.grad_buffer(ix).data() + static_cast<std::size_t>(n) * c_in * in_plane;
            for (std::size_t i = 0; i < gx_acc.size(); ++i) gxp[i] += static_cast<T>(gx_acc[i]);
          }
        }
        if (need_w) {
          auto gw = tape.grad_buffer(iw);
          for (std::size_t i = 0; i < gw_acc.size(); ++i) gw[i] += static_cast<T>(gw_acc[i]);
        }
      });
}

template <typename T>
Var<T> maxpool2(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require_rank4(xv.shape(), "maxpool2");
  const Shape& s = xv.shape();
  if (s.h() % 2 != 0 || s.w() % 2 != 0) throw ShapeError("maxpool2: odd spatial extents " + s.str());
  const int ho = s.h() / 2;
  const int wo = s.w() / 2;
  Tensor<T> out(Shape{s.n(), s.c(), ho, wo});
  std::vector<std::uint32_t> argmax(out.numel());
  std::size_t o = 0;
  for (int nc = 0; nc < s.n() * s.c(); ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * s.h() * s.w();
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx, ++o) {
        std::size_t best = base + static_cast<std::size_t>(2 * y) * s.w() + 2 * xx;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t i = base + static_cast<std::size_t>(2 * y + dy) * s.w() + 2 * xx + dx;
            if (xv[i] > xv[best]) best = i;
          }
        }
        out[o] = xv[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  const std::uint32_t ix = x.id();
  return x.tape().record("maxpool2", std::move(out), {x},
                         [ix, argmax = std::move(argmax)](Tape<T>& tape, std::uint32_t self) {
                           const auto g = tape.grad_view(self);
                           auto gx = tape.grad_buffer(ix);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                         });
}

template <typename T>
Var<T> global_avg(Var<T> x) {
  const Tensor<T>& xv = x.value();
  require_rank4(xv.shape(), "global_avg");
  const Shape& s = xv.shape();
  const std::size_t hw = static_cast<std::size_t>(s.h()) * s.w();
  const std::size_t groups = static_cast<std::size_t>(s.n()) * s.c();
  Tensor<T> out(Shape{s.n(), s.c(), 1, 1});
  for (std::size_t gi = 0; gi < groups; ++gi) {
    Acc total = 0.0;
    for (std::size_t i = 0; i < hw; ++i) total += xv[gi * hw + i];
    out[gi] = static_cast<T>(total / Acc(hw));
  }
  const std::uint32_t ix = x.id();
  return x.tape().record("global_avg", std::move(out), {x}, [ix, hw, groups](Tape<T>& tape, std::uint32_t self) {
    const auto g = tape.grad_view(self);
    auto gx = tape.grad_buffer(ix);
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const T share = static_cast<T>(Acc(g[gi]) / Acc(hw));
      for (std::size_t i = 0; i < hw; ++i) gx[gi * hw + i] += share;
    }
  });
}

template <typename T>
Var<T> fully_connected(Var<T> x, Var<T> weight, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  const Tensor<T>& bv = bias.value();
  if (xv.shape().rank() < 1 || wv.shape().rank() != 2) throw ShapeError("fully_connected: bad operand ranks");
  const std::size_t n_batch = static_cast<std::size_t>(xv.shape()[0]);
  const std::size_t feat = xv.numel() / n_batch;
  const std::size_t n_out = static_cast<std::size_t>(wv.shape()[0]);
  if (static_cast<std::size_t>(wv.shape()[1]) != feat) {
    throw ShapeError("fully_connected: input has " + std::to_string(feat) + " features, weight expects " +
                     std::to_string(wv.shape()[1]));
  }
  if (bv.numel() != n_out) throw ShapeError("fully_connected: bias length mismatch");
  Tensor<T> out(Shape{static_cast<int>(n_batch), static_cast<int>(n_out)});
  for (std::size_t n = 0; n < n_batch; ++n) {
    const T* xr = xv.raw() + n * feat;
    for (std::size_t o = 0; o < n_out; ++o) {
      const T* wr = wv.raw() + o * feat;
      const Acc s = Acc(bv[o]) + dot(wr, xr, static_cast<int>(feat));
      out[n * n_out + o] = static_cast<T>(s);
    }
  }
  const std::uint32_t ix = x.id();
  const std::uint32_t iw = weight.id();
  const std::uint32_t ib = bias.id();
  return x.tape().record("fully_connected", std::move(out), {x, weight, bias},
                         [=](Tape<T>& tape, std::uint32_t self) {
                           const auto g = tape.grad_view(self);
                           const T* xp = tape.value(ix).raw();
                           const T* wp = tape.value(iw).raw();
                           std::vector<Acc> acc(feat);
                           if (tape.requires_grad(ix)) {
                             auto gx = tape.grad_buffer(ix);
                             for (std::size_t n = 0; n < n_batch; ++n) {
                               std::fill(acc.begin(), acc.end(), 0.0);
                               for (std::size_t o = 0; o < n_out; ++o) {
                                 const Acc go = g[n * n_out + o];
                                 const T* wr = wp + o * feat;
                                 for (std::size_t f = 0; f < feat; ++f) acc[f] += go * Acc(wr[f]);
                               }
                               for (std::size_t f = 0; f < feat; ++f) gx[n * feat + f] += static_cast<T>(acc[f]);
                             }
                           }
                           if (tape.requires_grad(iw)) {
                             auto gw = tape.grad_buffer(iw);
                             for (std::size_t o = 0; o < n_out; ++o) {
                               std::fill(acc.begin(), acc.end(), 0.0);
                               for (std::size_t n = 0; n < n_batch; ++n) {
                                 const Acc go = g[n * n_out + o];
                                 const T* xr = xp + n * feat;
                                 for (std::size_t f = 0; f < feat; ++f) acc[f] += go * Acc(xr[f]);
                               }
                               for (std::size_t f = 0; f < feat; ++f) gw[o * feat + f] += static_cast<T>(acc[f]);
                             }
                           }
                           if (tape.requires_grad(ib)) {
                             auto gb = tape.grad_buffer(ib);
                             for (std::size_t o = 0; o < n_out; ++o) {
                               Acc s = 0.0;
                               for (std::size_t n = 0; n < n_batch; ++n) s += g[n * n_out + o];
                               gb[o] += static_cast<T>(s);
                             }
                           }
                         });
}

template <typename T>
Var<T> l2_rescale(Var<T> x, double target, NormAxis axis) {
  const Tensor<T>& xv = x.value();
  require_rank4(xv.shape(), "l2_rescale");
  Tensor<T> out(xv.shape());
  std::vector<Acc> norms;
  for_each_norm_group(xv.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t count) {
    Acc sq = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      const Acc v = xv[base + i * stride];
      sq += v * v;
    }
    const Acc norm = std::sqrt(sq);
    norms.push_back(norm);
    const Acc factor = target / std::max(norm, kL2Epsilon);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t j = base + i * stride;
      out[j] = static_cast<T>(Acc(xv[j]) * factor);
    }
  });
  const std::uint32_t ix = x.id();
  const Shape shape = xv.shape();
  return x.tape().record(
      "l2_rescale", std::move(out), {x},
      [ix, target, axis, shape, norms = std::move(norms)](Tape<T>& tape, std::uint32_t self) {
        const auto g = tape.grad_view(self);
        const T* xp = tape.value(ix).raw();
        auto gx = tape.grad_buffer(ix);
        std::size_t group = 0;
        for_each_norm_group(shape, axis, [&](std::size_t base, std::size_t stride, std::size_t count) {
          const Acc norm = norms[group++];
          if (norm <= kL2Epsilon) {
            const Acc factor = target / kL2Epsilon;
            for (std::size_t i = 0; i < count; ++i) {
              const std::size_t j = base + i * stride;
              gx[j] += static_cast<T>(factor * Acc(g[j]));
            }
            return;
          }
          Acc dot = 0.0;
          for (std::size_t i = 0; i < count; ++i) {
            const std::size_t j = base + i * stride;
            dot += Acc(xp[j]) * Acc(g[j]);
          }
          const Acc scale = target / norm;
          const Acc proj = dot / (norm * norm);
          for (std::size_t i = 0; i < count; ++i) {
            const std::size_t j = base + i * stride;
            gx[j] += static_cast<T>(scale * (Acc(g[j]) - Acc(xp[j]) * proj));
          }
        });
      });
}

template <typename T>
Var<T> bilinear_sample(Var<T> x, Var<T> offsets) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& ov = offsets.value();
  require_rank4(xv.shape(), "bilinear_sample");
  require_rank4(ov.shape(), "bilinear_sample offsets");
  const Shape& s = xv.shape();
  if (ov.shape().c() != 2) {
    throw ShapeError("bilinear_sample: offsets need 2 channels (dx, dy), got " + std::to_string(ov.shape().c()));
  }
  if (ov.shape().n() != s.n() || ov.shape().h() != s.h() || ov.shape().w() != s.w()) {
    throw ShapeError("bilinear_sample: offset extents " + ov.shape().str() + " do not match " + s.str());
  }
  const int nb = s.n();
  const int nc = s.c();
  const int h = s.h();
  const int w = s.w();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor<T> out(s);
  for (int n = 0; n < nb; ++n) {
    const T* dxp = ov.raw() + static_cast<std::size_t>(n) * 2 * plane;
    const T* dyp = dxp + plane;
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const std::size_t p = static_cast<std::size_t>(y) * w + xx;
        const Acc sx = std::clamp<Acc>(Acc(xx) + Acc(dxp[p]), 0.0, Acc(w - 1));
        const Acc sy = std::clamp<Acc>(Acc(y) + Acc(dyp[p]), 0.0, Acc(h - 1));
        const int x0 = static_cast<int>(std::floor(sx));
        const int y0 = static_cast<int>(std::floor(sy));
        const int x1 = std::min(x0 + 1, w - 1);
        const int y1 = std::min(y0 + 1, h - 1);
        const Acc fx = sx - x0;
        const Acc fy = sy - y0;
        for (int c = 0; c < nc; ++c) {
          const T* src = xv.raw() + (static_cast<std::size_t>(n) * nc + c) * plane;
          const Acc v00 = src[static_cast<std::size_t>(y0) * w + x0];
          const Acc v01 = src[static_cast<std::size_t>(y0) * w + x1];
          const Acc v10 = src[static_cast<std::size_t>(y1) * w + x0];
          const Acc v11 = src[static_cast<std::size_t>(y1) * w + x1];
          const Acc top = (1.0 - fx) * v00 + fx * v01;
          const Acc bottom = (1.0 - fx) * v10 + fx * v11;
          out[(static_cast<std::size_t>(n) * nc + c) * plane + p] = static_cast<T>((1.0 - fy) * top + fy * bottom);
        }
      }
    }
  }
  const std::uint32_t ix = x.id();
  const std::uint32_t io = offsets.id();
  return x.tape().record(
      "bilinear_sample", std::move(out), {x, offsets}, [=](Tape<T>& tape, std::uint32_t self) {
        const auto g = tape.grad_view(self);
        const T* xp = tape.value(ix).raw();
        const T* op = tape.value(io).raw();
        auto gx = maybe_grad(tape, ix);
        auto go = maybe_grad(tape, io);
        std::vector<Acc> acc(gx.empty() ? 0 : plane);
        for (int n = 0; n < nb; ++n) {
          const T* dxp = op + static_cast<std::size_t>(n) * 2 * plane;
          const T* dyp = dxp + plane;
          for (int c = 0; c < nc; ++c) {
            const std::size_t base = (static_cast<std::size_t>(n) * nc + c) * plane;
            const T* src = xp + base;
            std::fill(acc.begin(), acc.end(), 0.0);
            for (int y = 0; y < h; ++y) {
              for (int xx = 0; xx < w; ++xx) {
                const std::size_t p = static_cast<std::size_t>(y) * w + xx;
                const Acc gv = g[base + p];
                if (gv == 0.0) continue;
                const Acc rx = Acc(xx) + Acc(dxp[p]);
                const Acc ry = Acc(y) + Acc(dyp[p]);
                const Acc sx = std::clamp<Acc>(rx, 0.0, Acc(w - 1));
                const Acc sy = std::clamp<Acc>(ry, 0.0, Acc(h - 1));
                const int x0 = static_cast<int>(std::floor(sx));
                const int y0 = static_cast<int>(std::floor(sy));
                const int x1 = std::min(x0 + 1, w - 1);
                const int y1 = std::min(y0 + 1, h - 1);
                const Acc fx = sx - x0;
                const Acc fy = sy - y0;
                const std::size_t i00 = static_cast<std::size_t>(y0) * w + x0;
                const std::size_t i01 = static_cast<std::size_t>(y0) * w + x1;
                const std::size_t i10 = static_cast<std::size_t>(y1) * w + x0;
                const std::size_t i11 = static_cast<std::size_t>(y1) * w + x1;
                if (!acc.empty()) {
                  acc[i00] += gv * (1.0 - fy) * (1.0 - fx);
                  acc[i01] += gv * (1.0 - fy) * fx;
                  acc[i10] += gv * fy * (1.0 - fx);
                  acc[i11] += gv * fy * fx;
                }
                if (!go.empty()) {
                  const Acc v00 = src[i00], v01 = src[i01], v10 = src[i10], v11 = src[i11];
                  const std::size_t od = static_cast<std::size_t>(n) * 2 * plane + p;
                  if (rx >= 0.0 && rx <= Acc(w - 1)) {
                    const Acc d = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
                    go[od] += static_cast<T>(gv * d);
                  }
                  if (ry >= 0.0 && ry <= Acc(h - 1)) {
                    const Acc d = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
                    go[od + plane] += static_cast<T>(gv * d);
                  }
                }
              }
            }
            if (!acc.empty()) {
              for (std::size_t i = 0; i < plane; ++i) gx[base + i] += static_cast<T>(acc[i]);
            }
          }
        }
      });
}

template <typename T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = parts[0].shape();
  require_rank4(first, "concat_channels");
  int total_c = 0;
  std::vector<int> channels;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    require_rank4(s, "concat_channels");
    if (s.n() != first.n() || s.h() != first.h() || s.w() != first.w()) {
      throw ShapeError("concat_channels: mismatched extents " + s.str() + " vs " + first.str());
    }
    channels.push_back(s.c());
    total_c += s.c();
  }
  const std::size_t plane = static_cast<std::size_t>(first.h()) * first.w();
  Tensor<T> out(Shape{first.n(), total_c, first.h(), first.w()});
  for (int n = 0; n < first.n(); ++n) {
    std::size_t c_off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const T* src = parts[k].value().raw() + static_cast<std::size_t>(n) * channels[k] * plane;
      std::copy(src, src + channels[k] * plane, out.raw() + (static_cast<std::size_t>(n) * total_c + c_off) * plane);
      c_off += static_cast<std::size_t>(channels[k]);
    }
  }
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  const int nb = first.n();
  return parts[0].tape().record("concat_channels", std::move(out), parts,
                                [ids, channels, plane, total_c, nb](Tape<T>& tape, std::uint32_t self) {
                                  const auto g = tape.grad_view(self);
                                  std::size_t c_off = 0;
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    if (tape.requires_grad(ids[k])) {
                                      auto gp = tape.grad_buffer(ids[k]);
                                      const std::size_t len = static_cast<std::size_t>(channels[k]) * plane;
                                      for (int n = 0; n < nb; ++n) {
                                        const T* src = g.data() + (static_cast<std::size_t>(n) * total_c + c_off) * plane;
                                        T* dst = gp.data() + static_cast<std::size_t>(n) * len;
                                        for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                                      }
                                    }
                                    c_off += static_cast<std::size_t>(channels[k]);
                                  }
                                });
}

template <typename T>
Var<T> slice_channels(Var<T> x, int begin, int count) {
  const Shape& s = x.shape();
  require_rank4(s, "slice_channels");
  if (begin < 0 || count <= 0 || begin + count > s.c()) {
    throw ShapeError("slice_channels: range out of bounds for " + s.str());
  }
  const std::size_t plane = static_cast<std::size_t>(s.h()) * s.w();
  Tensor<T> out(Shape{s.n(), count, s.h(), s.w()});
  for (int n = 0; n < s.n(); ++n) {
    const T* src = x.value().raw() + (static_cast<std::size_t>(n) * s.c() + begin) * plane;
    std::copy(src, src + count * plane, out.raw() + static_cast<std::size_t>(n) * count * plane);
  }
  const std::uint32_t ix = x.id();
  const int nb = s.n();
  const int total_c = s.c();
  return x.tape().record("slice_channels", std::move(out), {x},
                         [=](Tape<T>& tape, std::uint32_t self) {
                           const auto g = tape.grad_view(self);
                           auto gx = tape.grad_buffer(ix);
                           const std::size_t len = static_cast<std::size_t>(count) * plane;
                           for (int n = 0; n < nb; ++n) {
                             T* dst = gx.data() + (static_cast<std::size_t>(n) * total_c + begin) * plane;
                             const T* src = g.data() + static_cast<std::size_t>(n) * len;
                             for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                           }
                         });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(shape);
  const std::uint32_t ix = x.id();
  return x.tape().record("reshape", std::move(out), {x}, [ix](Tape<T>& tape, std::uint32_t self) {
    const auto g = tape.grad_view(self);
    auto gx = tape.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Acc total = 0.0;
  for (const T v : x.value().data()) total += v;
  const std::uint32_t ix = x.id();
  return x.tape().record("sum", Tensor<T>::scalar(static_cast<T>(total)), {x},
                         [ix](Tape<T>& tape, std::uint32_t self) {
                           const T g = tape.grad_view(self)[0];
                           for (auto& v : tape.grad_buffer(ix)) v += g;
                         });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return affine(sum(x), 1.0 / static_cast<double>(x.value().numel()));
}

template <typename T>
Var<T> focal_loss(Var<T> probs, const Tensor<T>& labels, double alpha, double gamma, double normalizer) {
  const Tensor<T>& pv = probs.value();
  if (labels.shape() != pv.shape()) {
    throw ShapeError("focal_loss: labels " + labels.shape().str() + " vs scores " + pv.shape().str());
  }
  if (!(normalizer > 0.0)) throw Error("focal_loss: normalizer must be positive");
  constexpr Acc lo = kProbClamp;
  constexpr Acc hi = 1.0 - kProbClamp;
  Acc total = 0.0;
  for (std::size_t i = 0; i < pv.numel(); ++i) {
    const Acc q = std::clamp<Acc>(pv[i], lo, hi);
    if (labels[i] == T(1)) {
      total += -alpha * std::pow(1.0 - q, gamma) * std::log(q);
    } else if (labels[i] == T(0)) {
      total += -(1.0 - alpha) * std::pow(q, gamma) * std::log(1.0 - q);
    }
  }
  const std::uint32_t ip = probs.id();
  return probs.tape().record(
      "focal_loss", Tensor<T>::scalar(static_cast<T>(total / normalizer)), {probs},
      [ip, labels, alpha, gamma, normalizer](Tape<T>& tape, std::uint32_t self) {
        const Acc g = Acc(tape.grad_view(self)[0]) / normalizer;
        const Tensor<T>& pv = tape.value(ip);
        auto gp = tape.grad_buffer(ip);
        for (std::size_t i = 0; i < pv.numel(); ++i) {
          const Acc p = pv[i];
          if (p < lo || p > hi) continue;
          Acc d = 0.0;
          if (labels[i] == T(1)) {
            d = std::pow(1.0 - p, gamma) / p;
            if (gamma != 0.0) d -= gamma * std::pow(1.0 - p, gamma - 1.0) * std::log(p);
            d *= -alpha;
          } else if (labels[i] == T(0)) {
            d = -std::pow(p, gamma) / (1.0 - p);
            if (gamma != 0.0) d += gamma * std::pow(p, gamma - 1.0) * std::log(1.0 - p);
            d *= -(1.0 - alpha);
          } else {
            continue;
          }
          gp[i] += static_cast<T>(g * d);
        }
      });
}

template <typename T>
Var<T> smooth_l1(Var<T> pred, const Tensor<T>& target, const Tensor<T>& mask, double normalizer) {
  const Tensor<T>& pv = pred.value();
  if (target.shape() != pv.shape() || mask.shape() != pv.shape()) {
    throw ShapeError("smooth_l1: target/mask must match prediction " + pv.shape().str());
  }
  if (!(normalizer > 0.0)) throw Error("smooth_l1: normalizer must be positive");
  Acc total = 0.0;
  for (std::size_t i = 0; i < pv.numel(); ++i) {
    if (mask[i] == T(0)) continue;
    const Acc d = Acc(pv[i]) - Acc(target[i]);
    const Acc ad = std::abs(d);
    total += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
  }
  const std::uint32_t ip = pred.id();
  return pred.tape().record("smooth_l1", Tensor<T>::scalar(static_cast<T>(total / normalizer)), {pred},
                            [ip, target, mask, normalizer](Tape<T>& tape, std::uint32_t self) {
                              const Acc g = Acc(tape.grad_view(self)[0]) / normalizer;
                              const Tensor<T>& pv = tape.value(ip);
                              auto gp = tape.grad_buffer(ip);
                              for (std::size_t i = 0; i < pv.numel(); ++i) {
                                if (mask[i] == T(0)) continue;
                                const Acc d = Acc(pv[i]) - Acc(target[i]);
                                const Acc slope = std::abs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0);
                                gp[i] += static_cast<T>(g * slope);
                              }
                            });
}

template <typename T>
Var<T> cross_entropy(Var<T> probs, const Tensor<T>& onehot) {
  const Tensor<T>& pv = probs.value();
  if (onehot.shape() != pv.shape() || pv.shape().rank() != 2) {
    throw ShapeError("cross_entropy: expected matching (N, K) operands");
  }
  constexpr Acc lo = kProbClamp;
  constexpr Acc hi = 1.0 - kProbClamp;
  const Acc rows = pv.shape()[0];
  Acc total = 0.0;
  for (std::size_t i = 0; i < pv.numel(); ++i) {
    if (onehot[i] != T(0)) total -= Acc(onehot[i]) * std::log(std::clamp<Acc>(pv[i], lo, hi));
  }
  const std::uint32_t ip = probs.id();
  return probs.tape().record("cross_entropy", Tensor<T>::scalar(static_cast<T>(total / rows)), {probs},
                             [ip, onehot, rows](Tape<T>& tape, std::uint32_t self) {
                               const Acc g = Acc(tape.grad_view(self)[0]) / rows;
                               const Tensor<T>& pv = tape.value(ip);
                               auto gp = tape.grad_buffer(ip);
                               for (std::size_t i = 0; i < pv.numel(); ++i) {
                                 const Acc p = pv[i];
                                 if (onehot[i] == T(0) || p < lo || p > hi) continue;
                                 gp[i] += static_cast<T>(-g * Acc(onehot[i]) / p);
                               }
                             });
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  require_rank4(x.shape(), "resize_bilinear");
  const Shape& s = x.shape();
  Tensor<T> out(Shape{s.n(), s.c(), out_h, out_w});
  const Acc scale_y = Acc(s.h()) / out_h;
  const Acc scale_x = Acc(s.w()) / out_w;
  const std::size_t in_plane = static_cast<std::size_t>(s.h()) * s.w();
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  for (int nc = 0; nc < s.n() * s.c(); ++nc) {
    const T* src = x.raw() + static_cast<std::size_t>(nc) * in_plane;
    T* dst = out.raw() + static_cast<std::size_t>(nc) * out_plane;
    for (int y = 0; y < out_h; ++y) {
      const Acc sy = std::clamp<Acc>((y + 0.5) * scale_y - 0.5, 0.0, s.h() - 1);
      const int y0 = static_cast<int>(sy);
      const int y1 = std::min(y0 + 1, s.h() - 1);
      const Acc fy = sy - y0;
      for (int xx = 0; xx < out_w; ++xx) {
        const Acc sx = std::clamp<Acc>((xx + 0.5) * scale_x - 0.5, 0.0, s.w() - 1);
        const int x0 = static_cast<int>(sx);
        const int x1 = std::min(x0 + 1, s.w() - 1);
        const Acc fx = sx - x0;
        const Acc top = (1 - fx) * src[y0 * s.w() + x0] + fx * src[y0 * s.w() + x1];
        const Acc bottom = (1 - fx) * src[y1 * s.w() + x0] + fx * src[y1 * s.w() + x1];
        dst[static_cast<std::size_t>(y) * out_w + xx] = static_cast<T>((1 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

#define MBFUSE_INSTANTIATE_OPS(T)                                                               \
  template Var<T> add(Var<T>, Var<T>);                                                          \
  template Var<T> sub(Var<T>, Var<T>);                                                          \
  template Var<T> mul(Var<T>, Var<T>);                                                          \
  template Var<T> affine(Var<T>, double, double);                                               \
  template Var<T> relu(Var<T>);                                                                 \
  template Var<T> tanh(Var<T>);                                                                 \
  template Var<T> sigmoid(Var<T>);                                                              \
  template Var<T> clamp(Var<T>, double, double);                                                \
  template Var<T> softmax(Var<T>, int);                                                         \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, int, int);                                     \
  template Var<T> maxpool2(Var<T>);                                                             \
  template Var<T> global_avg(Var<T>);                                                           \
  template Var<T> fully_connected(Var<T>, Var<T>, Var<T>);                                      \
  template Var<T> l2_rescale(Var<T>, double, NormAxis);                                         \
  template Var<T> bilinear_sample(Var<T>, Var<T>);                                              \
  template Var<T> concat_channels(std::span<const Var<T>>);                                     \
  template Var<T> slice_channels(Var<T>, int, int);                                             \
  template Var<T> reshape(Var<T>, Shape);                                                       \
  template Var<T> sum(Var<T>);                                                                  \
  template Var<T> mean(Var<T>);                                                                 \
  template Var<T> focal_loss(Var<T>, const Tensor<T>&, double, double, double);                 \
  template Var<T> smooth_l1(Var<T>, const Tensor<T>&, const Tensor<T>&, double);                \
  template Var<T> cross_entropy(Var<T>, const Tensor<T>&);                                      \
  template Tensor<T> resize_bilinear(const Tensor<T>&, int, int);

MBFUSE_INSTANTIATE_OPS(float)
MBFUSE_INSTANTIATE_OPS(double)

#undef MBFUSE_INSTANTIATE_OPS

}  // namespace mbfuse
