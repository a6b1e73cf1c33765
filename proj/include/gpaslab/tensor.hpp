#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// Recording model: a Tape is installed for the duration of one forward/
// backward pass (TapeScope). Operations whose inputs require gradients
// append a backward closure to the active tape; Tape::backward replays the
// closures in reverse creation order, accumulating into per-tensor grad
// buffers. Tensors and tapes are confined to a single thread; independent
// tapes on different threads share nothing.
//
// Broadcasting is restricted to scalar (1-element) against tensor. All
// value arithmetic goes through the runtime-dispatched kernels.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gpaslab/kernels.hpp"

namespace gpaslab::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i)
    out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

[[noreturn]] inline void shape_fail(const char* op, const Shape& a,
                                    const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) +
                   " and " + shape_str(b));
}

template <class T>
class Tape;

template <class T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  const Tape<T>* tape = nullptr;  // tape that produced this tensor, if any

  std::size_t size() const { return value.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData<T>> d) : d_(std::move(d)) {}

  static Tensor zeros(Shape s) {
    auto d = std::make_shared<TensorData<T>>();
    d->value.assign(numel(s), T(0));
    d->shape = std::move(s);
    return Tensor(std::move(d));
  }
  static Tensor full(Shape s, T v) {
    auto t = zeros(std::move(s));
    for (auto& x : t.values()) x = v;
    return t;
  }
  static Tensor scalar(T v) { return full({1}, v); }
  static Tensor from(Shape s, std::vector<T> vals) {
    if (numel(s) != vals.size())
      throw ShapeError("Tensor::from: shape " + shape_str(s) + " needs " +
                       std::to_string(numel(s)) + " values, got " +
                       std::to_string(vals.size()));
    auto d = std::make_shared<TensorData<T>>();
    d->shape = std::move(s);
    d->value = std::move(vals);
    return Tensor(std::move(d));
  }

  // Marks this tensor as a trainable leaf.
  Tensor& set_requires_grad(bool rg = true) {
    d_->requires_grad = rg;
    if (rg) d_->ensure_grad();
    return *this;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  std::size_t size() const { return d_->size(); }
  bool requires_grad() const { return d_->requires_grad; }
  std::vector<T>& values() { return d_->value; }
  const std::vector<T>& values() const { return d_->value; }
  std::vector<T>& grad() { return d_->grad; }
  const std::vector<T>& grad() const { return d_->grad; }
  T item() const {
    if (size() != 1)
      throw ShapeError("item: tensor has " + std::to_string(size()) +
                       " elements");
    return d_->value[0];
  }
  void zero_grad() {
    for (auto& g : d_->grad) g = T(0);
  }

  std::shared_ptr<TensorData<T>> data() const { return d_; }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<TensorData<T>> out, std::function<void()> fn) {
    outs_.push_back(std::move(out));
    nodes_.push_back(std::move(fn));
  }

  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss)=1 and propagates through all recorded nodes in
  // reverse creation order. Raises NonFiniteError if any intermediate
  // gradient contains NaN/Inf.
  void backward(Tensor<T> loss) {
    if (loss.size() != 1)
      throw ShapeError("backward: loss must be scalar, got " +
                       shape_str(loss.shape()));
    if (loss.data()->tape != this)
      throw std::runtime_error(
          "backward: loss is not attached to this tape");
    loss.data()->ensure_grad();
    loss.grad()[0] = T(1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      for (T g : outs_[i]->grad)
        if (!std::isfinite(double(g)))
          throw NonFiniteError("backward: non-finite gradient encountered");
      nodes_[i]();
    }
  }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<TensorData<T>>> outs_;
};

namespace detail {
template <class T>
inline Tape<T>*& current_tape() {
  thread_local Tape<T>* t = nullptr;
  return t;
}
template <class T>
inline bool& grad_enabled() {
  thread_local bool on = true;
  return on;
}
}  // namespace detail

// Installs a tape for the enclosing scope.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& t) : prev_(detail::current_tape<T>()) {
    detail::current_tape<T>() = &t;
  }
  ~TapeScope() { detail::current_tape<T>() = prev_; }

 private:
  Tape<T>* prev_;
};

// Disables recording for the enclosing scope (evaluation mode).
template <class T>
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled<T>()) {
    detail::grad_enabled<T>() = false;
  }
  ~NoGradGuard() { detail::grad_enabled<T>() = prev_; }

 private:
  bool prev_;
};

namespace detail {

template <class T>
bool tracing(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled<T>() || current_tape<T>() == nullptr) return false;
  for (auto* t : inputs)
    if ((*t).requires_grad()) return true;
  return false;
}

// Prepares `out` for recording and appends the node.
template <class T>
void record(Tensor<T>& out, std::function<void()> fn) {
  out.data()->requires_grad = true;
  out.data()->ensure_grad();
  out.data()->tape = current_tape<T>();
  current_tape<T>()->record(out.data(), std::move(fn));
}

}  // namespace detail

}  // namespace gpaslab::ad
