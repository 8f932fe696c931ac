#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace derain {

/// Raised when tensor shapes do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid scalar parameters (negative stride, scale < 1, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Four-axis shape. Images are (batch, channels, height, width); conv
/// weights reuse the same layout as (out, in, kh, kw).
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense row-major 4-D tensor handle.
///
/// Copies share storage. Operations never modify their inputs; they allocate
/// fresh outputs, so a tensor's values are fixed once produced. Parameters
/// are the exception: the optimizer writes them in place through
/// mutable_data().
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false);
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  const T* ptr() const { return impl_->data.data(); }

  T at(int n, int c, int h, int w) const { return impl_->data[index(n, c, h, w)]; }
  T& at(int n, int c, int h, int w) { return impl_->data[index(n, c, h, w)]; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated as zeros on first access. Gradients are
  /// autodiff bookkeeping on the shared storage, so const handles can
  /// accumulate into them.
  std::vector<T>& grad_buffer() const;
  void zero_grad() const { impl_->grad.clear(); }

  /// Deep copy without gradient or tape history.
  Tensor clone() const;
  /// Same values and shape, converted to another scalar type.
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(impl_->data.begin(), impl_->data.end());
    return Tensor<U>(impl_->shape, std::move(out));
  }

  std::size_t index(int n, int c, int h, int w) const {
    const Shape& s = impl_->shape;
    return ((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w;
  }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of differentiable operations executed while a tape is
/// active on the current thread. backward() replays it once, in reverse.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void()>;

  void record(Tensor<T> output, Backward fn);
  /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
  /// loss must hold a single element.
  void backward(const Tensor<T>& loss);
  std::size_t size() const { return entries_.size(); }
  /// Number of entries whose backward ran during the last backward().
  std::size_t visited() const { return visited_; }
  void clear() { entries_.clear(); }

 private:
  struct Entry {
    Tensor<T> output;
    Backward fn;
  };
  std::vector<Entry> entries_;
  std::size_t visited_ = 0;
};

/// Active tape for the current thread, or nullptr when not recording.
template <typename T>
Tape<T>* active_tape();

/// RAII activation of a tape on the current thread. Nested scopes restore
/// the previous tape on exit.
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

/// Suspends recording on the current thread (inference, metrics).
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

namespace detail {

template <typename T>
Tape<T>*& tape_slot();

/// True when an op with these inputs must be recorded.
template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const Tensor<T>* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Marks `out` as differentiable and records its backward closure.
template <typename T>
void record(Tensor<T>& out, typename Tape<T>::Backward fn) {
  out.set_requires_grad(true);
  active_tape<T>()->record(out, std::move(fn));
}

/// Adds `values` into the gradient of `t` when t participates in autodiff.
template <typename T>
void accumulate(const Tensor<T>& t, std::span<const T> values) {
  if (!t.requires_grad()) return;
  auto& g = t.grad_buffer();
  for (std::size_t i = 0; i < values.size(); ++i) g[i] += values[i];
}

}  // namespace detail

}  // namespace derain
