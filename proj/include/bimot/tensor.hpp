#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared TensorNode. Operations executed
// while a Tape is active (see TapeScope) and touching at least one tensor with
// requires_grad set are recorded in execution order; Tape::backward replays the
// records in reverse. Outside a TapeScope nothing is recorded, which is how
// inference and finite-difference evaluation run.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bimot/errors.hpp"

namespace bimot {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Keeps freed activation buffers in the heap instead of returning them to the OS,
// so each training step does not page-fault its activations back in (glibc only).
void retain_freed_memory();

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  // Empty until a gradient is first accumulated ("absent" gradient).
  std::vector<T> grad;
  bool requires_grad = false;
  std::function<void(TensorNode&)> backward_fn;

  std::vector<T>& grad_storage() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  // Everything but the last axis, flattened.
  std::size_t rows() const;
  std::size_t cols() const { return node_->shape.empty() ? 1 : node_->shape.back(); }

  std::span<T> values() { return node_->value; }
  std::span<const T> values() const { return node_->value; }
  std::vector<double> to_vector() const { return {node_->value.begin(), node_->value.end()}; }
  T item() const;
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  // Copy of the values with no gradient history.
  Tensor detach() const;

  TensorNode<T>& node() const { return *node_; }
  const std::shared_ptr<TensorNode<T>>& node_ptr() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<TensorNode<T>> node) { records_.push_back(std::move(node)); }

  // root must be a single-element tensor. Gradients accumulate into every
  // reachable requires_grad tensor (leaves included).
  void backward(const Tensor<T>& root);

  void clear() { records_.clear(); }
  std::size_t size() const { return records_.size(); }

  static Tape* current();
  // Installs `tape` as the current thread's recording target, returning the previous one.
  static Tape* exchange_current(Tape* tape);

 private:
  std::vector<std::shared_ptr<TensorNode<T>>> records_;
};

/// Makes `tape` the recording target for the current thread until destroyed.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording for the current thread (inference inside a training step).
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

}  // namespace bimot
