#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "mbfuse/tensor.hpp"

namespace mbfuse {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
/// tape is alive and has not been cleared.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::uint32_t id() const { return id_; }

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Reverse-mode differentiation record. Nodes are appended in creation order,
/// which is a valid topological order; backward() walks it in reverse, so each
/// node is visited once and fan-out gradients accumulate additively.
///
/// Single writer: one forward/backward pass at a time.
template <typename T>
class Tape {
 public:
  // Propagates the gradient held at node `self` into its inputs' buffers.
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = true) {
    check_finite("leaf", value);
    nodes_.push_back(Node{std::move(value), {}, nullptr, "leaf", requires_grad});
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Appends an op result. `backward` is dropped when no input needs a gradient.
  Var<T> record(const char* op, Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    return record(op, std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(backward));
  }

  Var<T> record(const char* op, Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn backward) {
    check_finite(op, value);
    bool needs_grad = false;
    for (const auto& in : inputs) {
      if (&in.tape() != this) throw Error(std::string(op) + ": operands recorded on different tapes");
      needs_grad = needs_grad || requires_grad(in.id());
    }
    nodes_.push_back(Node{std::move(value), {}, needs_grad ? std::move(backward) : nullptr, op, needs_grad});
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  const Tensor<T>& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  const char* op_name(std::uint32_t id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }

  bool has_grad(std::uint32_t id) const { return !nodes_[id].grad.empty(); }

  // Gradient of the last backward root w.r.t. this node; zeros if it did not
  // contribute.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& node = nodes_[v.id()];
    if (node.grad.empty()) return Tensor<T>(node.value.shape());
    return node.grad;
  }

  // Mutable gradient buffer of a node, allocated (zeroed) on first touch.
  std::span<T> grad_buffer(std::uint32_t id) {
    Node& node = nodes_[id];
    if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
    return node.grad.data();
  }

  std::span<const T> grad_view(std::uint32_t id) const { return nodes_[id].grad.data(); }

  // Number of nodes whose backward function ran in the last backward().
  std::size_t last_backward_visits() const { return last_visits_; }

  void backward(const Var<T>& root) {
    if (&root.tape() != this) throw Error("backward: root belongs to another tape");
    if (root.value().numel() != 1) {
      throw ShapeError("backward: root must be scalar, got " + root.shape().str());
    }
    for (auto& node : nodes_) node.grad = Tensor<T>();
    grad_buffer(root.id())[0] = T(1);
    last_visits_ = 0;
    for (std::uint32_t i = root.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.backward || node.grad.empty()) continue;
      node.backward(*this, i);
      ++last_visits_;
    }
  }

  void clear() {
    nodes_.clear();
    last_visits_ = 0;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    const char* op;
    bool requires_grad;
  };

  static void check_finite(const char* op, const Tensor<T>& value) {
    if (!value.all_finite()) throw NumericError(std::string(op) + ": produced a non-finite value");
  }

  std::vector<Node> nodes_;
  std::size_t last_visits_ = 0;
};

}  // namespace mbfuse
