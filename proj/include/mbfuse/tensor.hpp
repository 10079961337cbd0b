#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "mbfuse/error.hpp"
#include "mbfuse/rng.hpp"

namespace mbfuse {

/// Extents of a dense tensor of rank 0..4. Rank-4 tensors use the
/// (batch, channel, height, width) convention.
class Shape {
 public:
  static constexpr int kMaxRank = 4;

  Shape() = default;
  Shape(std::initializer_list<int> dims);
  explicit Shape(std::span<const int> dims);

  int rank() const { return rank_; }
  int operator[](int axis) const { return dims_[static_cast<std::size_t>(axis)]; }
  std::size_t numel() const;

  // Rank-4 accessors.
  int n() const { return dims_[0]; }
  int c() const { return dims_[1]; }
  int h() const { return dims_[2]; }
  int w() const { return dims_[3]; }

  std::span<const int> dims() const { return {dims_.data(), static_cast<std::size_t>(rank_)}; }
  std::string str() const;

  friend bool operator==(const Shape& a, const Shape& b) {
    if (a.rank_ != b.rank_) return false;
    for (int i = 0; i < a.rank_; ++i) {
      if (a.dims_[static_cast<std::size_t>(i)] != b.dims_[static_cast<std::size_t>(i)]) return false;
    }
    return true;
  }

 private:
  std::array<int, kMaxRank> dims_{1, 1, 1, 1};
  int rank_ = 0;
};

/// Dense row-major array. Plain value type; differentiation state lives on
/// the Tape, never here.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor full(Shape shape, T value) { return Tensor(shape, value); }
  static Tensor scalar(T value) { return Tensor(Shape{1}, value); }
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);
  static Tensor normal(Shape shape, Rng& rng, double mean, double stddev);

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* raw() { return data_.data(); }
  const T* raw() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int n, int c, int h, int w) { return data_[offset(n, c, h, w)]; }
  const T& at(int n, int c, int h, int w) const { return data_[offset(n, c, h, w)]; }

  // Same data, new extents; element counts must agree.
  Tensor reshaped(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const;

 private:
  std::size_t offset(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * static_cast<std::size_t>(shape_[1]) + static_cast<std::size_t>(c)) *
                static_cast<std::size_t>(shape_[2]) +
            static_cast<std::size_t>(h)) *
               static_cast<std::size_t>(shape_[3]) +
           static_cast<std::size_t>(w);
  }

  Shape shape_;
  std::vector<T> data_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

// MBT1 binary layout: "MBT1", u8 rank, rank x u32 LE dims, f32 LE payload.
// Values are always serialized as 32-bit floats.
template <typename T>
void write_mbt1(std::ostream& out, const Tensor<T>& tensor);
template <typename T>
Tensor<T> read_mbt1(std::istream& in);

template <typename T>
void save_mbt1(const std::string& path, const Tensor<T>& tensor);
template <typename T>
Tensor<T> load_mbt1(const std::string& path);

// Byte size of the MBT1 record for a tensor of this shape.
std::size_t mbt1_record_size(const Shape& shape);

}  // namespace mbfuse
