#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mbfuse/tape.hpp"

namespace mbfuse {

/// Named parameter tensors in registration order.
template <typename T>
class ParamStore {
 public:
  void add(const std::string& name, Tensor<T> value);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);

  std::size_t size() const { return values_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const Tensor<T>& at(std::size_t i) const { return values_[i]; }
  Tensor<T>& at(std::size_t i) { return values_[i]; }
  std::size_t total_elements() const;

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < values_.size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.names_ != b.names_) return false;
    for (std::size_t i = 0; i < a.values_.size(); ++i) {
      if (!(a.values_[i].shape() == b.values_[i].shape())) return false;
      for (std::size_t j = 0; j < a.values_[i].numel(); ++j) {
        if (a.values_[i][j] != b.values_[i][j]) return false;
      }
    }
    return true;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Lazily places parameters on a tape as leaves, once each, and collects
/// their gradients after backward().
template <typename T>
class ParamBinding {
 public:
  ParamBinding(Tape<T>& tape, const ParamStore<T>& store, bool trainable = true)
      : tape_(tape), store_(store), trainable_(trainable) {}

  Var<T> operator()(const std::string& name);

  // Uses `v` for `name` instead of a fresh leaf (gradient checks bind their
  // own leaves this way). Throws if the name is unknown or already bound.
  void bind(const std::string& name, Var<T> v);

  Tape<T>& tape() const { return tape_; }
  const ParamStore<T>& store() const { return store_; }

  // Gradients in store order; parameters not touched this pass get zeros.
  std::vector<Tensor<T>> gradients() const;

 private:
  Tape<T>& tape_;
  const ParamStore<T>& store_;
  bool trainable_;
  std::unordered_map<std::string, Var<T>> bound_;
};

// Xavier-uniform: U(-a, a), a = sqrt(6 / (fan_in + fan_out)). For conv
// weights (C_out, C_in, k, k): fan_in = C_in k^2, fan_out = C_out k^2.
template <typename T>
Tensor<T> xavier_uniform(Shape shape, Rng& rng);

/// Checkpoint directory: `params.mbt` holds the MBT1 records back to back,
/// `index.txt` has one `name dims byte_offset` line per tensor (dims as
/// AxBxC), preceded by `# key = value` metadata lines.
void save_checkpoint(const std::string& dir, const ParamStore<float>& store,
                     const std::map<std::string, std::string>& metadata);

struct Checkpoint {
  ParamStore<float> params;
  std::map<std::string, std::string> metadata;
};

Checkpoint load_checkpoint(const std::string& dir);

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class ParamBinding<float>;
extern template class ParamBinding<double>;

}  // namespace mbfuse
