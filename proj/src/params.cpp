#include "mbfuse/params.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mbfuse {

template <typename T>
void ParamStore<T>::add(const std::string& name, Tensor<T> value) {
  if (contains(name)) throw Error("duplicate parameter " + name);
  index_.emplace(name, values_.size());
  names_.push_back(name);
  values_.push_back(std::move(value));
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter " + name);
  return values_[it->second];
}

template <typename T>
Tensor<T>& ParamStore<T>::get(const std::string& name) {
  const auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter " + name);
  return values_[it->second];
}

template <typename T>
std::size_t ParamStore<T>::total_elements() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.numel();
  return n;
}

template <typename T>
Var<T> ParamBinding<T>::operator()(const std::string& name) {
  const auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Var<T> v = tape_.leaf(store_.get(name), trainable_);
  bound_.emplace(name, v);
  return v;
}

template <typename T>
void ParamBinding<T>::bind(const std::string& name, Var<T> v) {
  const Tensor<T>& stored = store_.get(name);
  if (!(stored.shape() == v.shape())) throw ShapeError("bind " + name + ": expected " + stored.shape().str());
  if (!bound_.emplace(name, v).second) throw Error("bind " + name + ": already bound");
}

template <typename T>
std::vector<Tensor<T>> ParamBinding<T>::gradients() const {
  std::vector<Tensor<T>> out;
  out.reserve(store_.size());
  for (std::size_t i = 0; i < store_.size(); ++i) {
    const auto it = bound_.find(store_.names()[i]);
    if (it == bound_.end()) {
      out.emplace_back(store_.at(i).shape());
    } else {
      out.push_back(tape_.grad(it->second));
    }
  }
  return out;
}

template <typename T>
Tensor<T> xavier_uniform(Shape shape, Rng& rng) {
  double fan_in = 0.0;
  double fan_out = 0.0;
  if (shape.rank() == 4) {
    const double area = static_cast<double>(shape.h()) * shape.w();
    fan_in = shape.c() * area;
    fan_out = shape.n() * area;
  } else if (shape.rank() == 2) {
    fan_in = shape[1];
    fan_out = shape[0];
  } else {
    throw ShapeError("xavier_uniform: expected a rank-2 or rank-4 weight, got " + shape.str());
  }
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  return Tensor<T>::uniform(shape, rng, -limit, limit);
}

template class ParamStore<float>;
template class ParamStore<double>;
template class ParamBinding<float>;
template class ParamBinding<double>;
template Tensor<float> xavier_uniform(Shape, Rng&);
template Tensor<double> xavier_uniform(Shape, Rng&);

namespace {

std::string dims_string(const Shape& s) {
  std::string out;
  for (int i = 0; i < s.rank(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::string& dir, const ParamStore<float>& store,
                     const std::map<std::string, std::string>& metadata) {
  std::filesystem::create_directories(dir);
  std::ofstream bin(dir + "/params.mbt", std::ios::binary);
  std::ofstream index(dir + "/index.txt");
  if (!bin || !index) throw Error("cannot write checkpoint to " + dir);
  for (const auto& [key, value] : metadata) index << "# " << key << " = " << value << '\n';
  std::size_t offset = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Tensor<float>& t = store.at(i);
    index << store.names()[i] << ' ' << dims_string(t.shape()) << ' ' << offset << '\n';
    write_mbt1(bin, t);
    offset += mbt1_record_size(t.shape());
  }
  if (!bin || !index) throw Error("checkpoint write failed in " + dir);
}

Checkpoint load_checkpoint(const std::string& dir) {
  std::ifstream index(dir + "/index.txt");
  std::ifstream bin(dir + "/params.mbt", std::ios::binary);
  if (!index || !bin) throw Error("cannot open checkpoint " + dir);
  Checkpoint ck;
  std::string line;
  int line_no = 0;
  while (std::getline(index, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find(" = ");
      if (eq == std::string::npos || eq < 2) continue;
      ck.metadata[line.substr(2, eq - 2)] = line.substr(eq + 3);
      continue;
    }
    std::istringstream fields(line);
    std::string name, dims;
    std::size_t offset = 0;
    if (!(fields >> name >> dims >> offset)) {
      throw ParseError(dir + "/index.txt:" + std::to_string(line_no) + ": malformed entry");
    }
    bin.seekg(static_cast<std::streamoff>(offset));
    Tensor<float> t = read_mbt1<float>(bin);
    if (dims_string(t.shape()) != dims) {
      throw ParseError(dir + "/index.txt:" + std::to_string(line_no) + ": shape mismatch for " + name);
    }
    ck.params.add(name, std::move(t));
  }
  return ck;
}

}  // namespace mbfuse
