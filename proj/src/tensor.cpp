#include "mbfuse/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace mbfuse {

Shape::Shape(std::initializer_list<int> dims) : Shape(std::span<const int>(dims.begin(), dims.size())) {}

Shape::Shape(std::span<const int> dims) {
  if (dims.size() > static_cast<std::size_t>(kMaxRank)) {
    throw ShapeError("tensor rank " + std::to_string(dims.size()) + " exceeds 4");
  }
  rank_ = static_cast<int>(dims.size());
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (dims[i] <= 0) throw ShapeError("tensor extents must be positive");
    dims_[i] = dims[i];
  }
}

std::size_t Shape::numel() const {
  std::size_t n = 1;
  for (int i = 0; i < rank_; ++i) n *= static_cast<std::size_t>(dims_[static_cast<std::size_t>(i)]);
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(';
  for (int i = 0; i < rank_; ++i) {
    if (i) os << ',';
    os << dims_[static_cast<std::size_t>(i)];
  }
  os << ')';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape), data_(shape.numel(), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape_.numel()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_.str());
  }
}

template <typename T>
Tensor<T> Tensor<T>::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor out(shape);
  for (auto& v : out.data_) v = static_cast<T>(rng.uniform(lo, hi));
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::normal(Shape shape, Rng& rng, double mean, double stddev) {
  Tensor out(shape);
  for (auto& v : out.data_) v = static_cast<T>(rng.normal(mean, stddev));
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape.numel() != numel()) {
    throw ShapeError("cannot reshape " + shape_.str() + " to " + shape.str());
  }
  return Tensor(shape, data_);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  for (const T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template class Tensor<float>;
template class Tensor<double>;

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char bytes[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw ParseError("MBT1: truncated header");
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

}  // namespace

std::size_t mbt1_record_size(const Shape& shape) {
  return 4 + 1 + 4 * static_cast<std::size_t>(shape.rank()) + 4 * shape.numel();
}

template <typename T>
void write_mbt1(std::ostream& out, const Tensor<T>& tensor) {
  out.write("MBT1", 4);
  const auto rank = static_cast<unsigned char>(tensor.shape().rank());
  out.put(static_cast<char>(rank));
  for (const int d : tensor.shape().dims()) put_u32(out, static_cast<std::uint32_t>(d));
  for (const T v : tensor.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!out) throw Error("MBT1: write failed");
}

template <typename T>
Tensor<T> read_mbt1(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "MBT1", 4) != 0) throw ParseError("MBT1: bad magic");
  const int rank = in.get();
  if (rank == std::char_traits<char>::eof() || rank > Shape::kMaxRank) {
    throw ParseError("MBT1: invalid rank");
  }
  std::vector<int> dims;
  for (int i = 0; i < rank; ++i) dims.push_back(static_cast<int>(get_u32(in)));
  Shape shape(dims);
  std::vector<T> data(shape.numel());
  for (auto& v : data) v = static_cast<T>(std::bit_cast<float>(get_u32(in)));
  return Tensor<T>(shape, std::move(data));
}

template <typename T>
void save_mbt1(const std::string& path, const Tensor<T>& tensor) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path + " for writing");
  write_mbt1(out, tensor);
}

template <typename T>
Tensor<T> load_mbt1(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return read_mbt1<T>(in);
}

template void write_mbt1(std::ostream&, const Tensor<float>&);
template void write_mbt1(std::ostream&, const Tensor<double>&);
template Tensor<float> read_mbt1(std::istream&);
template Tensor<double> read_mbt1(std::istream&);
template void save_mbt1(const std::string&, const Tensor<float>&);
template void save_mbt1(const std::string&, const Tensor<double>&);
template Tensor<float> load_mbt1(const std::string&);
template Tensor<double> load_mbt1(const std::string&);

}  // namespace mbfuse
