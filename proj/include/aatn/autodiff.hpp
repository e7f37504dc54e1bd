#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "aatn/tensor.hpp"

namespace aatn {

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(int axis) const { return value().dim(axis); }
  bool requires_grad() const;

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only record of operations for reverse-mode differentiation.
/// Rebuilt for every forward pass; inputs always precede their consumers.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> variable(Tensor<T> value);

  /// Records an op. `fn` is dropped when no input requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn);

  /// Reverse sweep from a scalar loss. Gradients accumulate on the tape.
  void backward(const Var<T>& loss);

  /// Gradient of `v` from the last backward(); zeros if `v` was unreachable.
  Tensor<T> grad(const Var<T>& v) const;

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Accumulation buffer for node `id`; allocated on first use.
  Tensor<T>& grad_buffer(std::size_t id);

  /// Smallest distance of any non-differentiable op input to its kink
  /// (relu, leaky_relu, clamp). Finite-difference checks use it to reject
  /// instances where a perturbation could cross a kink.
  double kink_margin() const { return kink_margin_; }
  void note_kink_distance(double d) {
    if (d < kink_margin_) kink_margin_ = d;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
  double kink_margin_ = std::numeric_limits<double>::infinity();
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

enum class UnaryKind { relu, leaky_relu, sigmoid, exp, log, neg, sqrt, square };

inline constexpr double kLeakyReluSlope = 0.01;
inline constexpr double kMaskedLogit = -1e9;

// Linear algebra and shape ops.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T>
Var<T> permute(const Var<T>& x, std::vector<std::size_t> axes);
/// Swaps the last two axes.
template <typename T>
Var<T> transpose(const Var<T>& x);
/// Index `index` along axis 0, dropping that axis.
template <typename T>
Var<T> select(const Var<T>& x, std::size_t index);

// Elementwise ops with numpy-style broadcasting.
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& x, T factor);
template <typename T>
Var<T> add_scalar(const Var<T>& x, T offset);
template <typename T>
Var<T> apply_unary(UnaryKind kind, const Var<T>& x);
template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi);
/// Identity forward, negated gradient backward.
template <typename T>
Var<T> gradient_reversal(const Var<T>& x);

// Reductions.
template <typename T>
Var<T> sum(const Var<T>& x);
template <typename T>
Var<T> sum(const Var<T>& x, int axis, bool keepdim = false);
template <typename T>
Var<T> mean(const Var<T>& x);

// Neural-net building blocks.
template <typename T>
Var<T> softmax(const Var<T>& x, int axis);
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5));
/// Rows of `table` gathered by id; result shape = ids_shape + [table.cols].
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids, const Shape& ids_shape);
/// Mean cross-entropy of row-wise softmax(logits) against integer labels.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> labels);

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& x) { return apply_unary(UnaryKind::neg, x); }

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace aatn
