#include "bimot/tensor.hpp"

#include <numeric>
#include <sstream>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace bimot {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void retain_freed_memory() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  node_->value.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                     " values");
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  if (node_->shape.size() <= 1) return 1;
  return numel() / cols();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->value);
}

namespace {
template <typename T>
Tape<T>*& current_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace

template <typename T>
Tape<T>* Tape<T>::current() {
  return current_tape<T>();
}

template <typename T>
Tape<T>* Tape<T>::exchange_current(Tape* tape) {
  Tape* prev = current_tape<T>();
  current_tape<T>() = tape;
  return prev;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& root) {
  if (!root.defined() || root.numel() != 1) {
    throw ContractError("backward requires a scalar root, got " +
                        (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  if (!root.requires_grad()) {
    throw ContractError("backward root does not require grad (was it computed on an active tape?)");
  }
  root.node().grad_storage()[0] += T(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    TensorNode<T>& node = **it;
    if (node.backward_fn && !node.grad.empty()) node.backward_fn(node);
  }
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(Tape<T>::exchange_current(&tape)) {}

template <typename T>
TapeScope<T>::~TapeScope() {
  Tape<T>::exchange_current(previous_);
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(Tape<T>::exchange_current(nullptr)) {}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  Tape<T>::exchange_current(previous_);
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;

}  // namespace bimot
