#include "derain/tensor.hpp"

#include <sstream>

namespace derain {

std::string Shape::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
    throw ShapeError("tensor dimensions must be >= 1, got " + shape.str());
  }
  impl_->shape = shape;
  impl_->data.assign(shape.numel(), fill);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
    throw ShapeError("tensor dimensions must be >= 1, got " + shape.str());
  }
  if (values.size() != shape.numel()) {
    throw ShapeError("tensor of shape " + shape.str() + " needs " +
                     std::to_string(shape.numel()) + " values, got " +
                     std::to_string(values.size()));
  }
  impl_->shape = shape;
  impl_->data = std::move(values);
  impl_->requires_grad = requires_grad;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + shape().str());
  }
  return impl_->data[0];
}

template <typename T>
std::vector<T>& Tensor<T>::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor<T>(impl_->shape, impl_->data);
}

template <typename T>
void Tape<T>::record(Tensor<T> output, Backward fn) {
  entries_.push_back({std::move(output), std::move(fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " +
                     loss.shape().str());
  }
  Tensor<T> seed = loss;
  seed.grad_buffer()[0] += T(1);
  visited_ = 0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    // Outputs that never received a gradient contribute nothing upstream.
    if (!it->output.has_grad()) continue;
    it->fn();
    ++visited_;
  }
}

template <typename T>
Tape<T>*& detail::tape_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
Tape<T>* active_tape() {
  return detail::tape_slot<T>();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(detail::tape_slot<T>()) {
  detail::tape_slot<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  detail::tape_slot<T>() = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(detail::tape_slot<T>()) {
  detail::tape_slot<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  detail::tape_slot<T>() = previous_;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template class NoGradScope<float>;
template class NoGradScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();
template Tape<float>*& detail::tape_slot<float>();
template Tape<double>*& detail::tape_slot<double>();

}  // namespace derain
