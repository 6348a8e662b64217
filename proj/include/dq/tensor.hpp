// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors of 64-bit reals with tape-based reverse-mode
// differentiation.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dq/errors.hpp"

namespace dq {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  bool leaf = true;

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};
}  // namespace detail

/// A shared handle to a dense array. Copies alias the same storage; use
/// `clone()` for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data_->values.size(); }

  std::span<const double> values() const { return data_->values; }
  // Direct write access; only initializers and optimizers should use this.
  std::span<double> mutable_values() { return data_->values; }

  double item() const;
  double at(std::size_t i, std::size_t j) const;

  bool requires_grad() const { return data_ && data_->requires_grad; }
  void set_requires_grad(bool on);
  bool is_leaf() const { return data_->leaf; }

  bool has_grad() const { return data_ && !data_->grad.empty(); }
  std::span<const double> grad() const { return data_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  /// Deep copy of the values, detached from any tape, no gradient.
  Tensor clone() const;
  /// Same values, not tracked; shares nothing with the original.
  Tensor detach() const { return clone(); }

  detail::TensorData* impl() const { return data_.get(); }
  const std::shared_ptr<detail::TensorData>& handle() const { return data_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorData> data) : data_(std::move(data)) {}
  std::shared_ptr<detail::TensorData> data_;

  friend Tensor make_tensor(std::shared_ptr<detail::TensorData>);
};

Tensor make_tensor(std::shared_ptr<detail::TensorData> data);

/// Linear record of executed operations. Backward closures are replayed in
/// exact reverse order of recording.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  void record(BackwardFn fn) { nodes_.push_back(std::move(fn)); }
  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

 private:
  friend void backward(const Tensor& loss, Tape& tape);
  std::vector<BackwardFn> nodes_;
};

/// Makes `tape` the recording target for operations on this thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Seeds d(loss)/d(loss) = 1 and runs the tape backwards. Leaf gradients
/// accumulate; call zero_grad() between steps.
void backward(const Tensor& loss, Tape& tape);

// ---------------------------------------------------------------------------
// Operations. All of them record a backward rule when a tape is active and
// at least one operand requires a gradient.

Tensor matmul(const Tensor& a, const Tensor& b);
/// x[T×in]·w[in×out] + bias[out], bias broadcast over rows.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor square(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);

enum class Activation { Gelu, Relu };
Tensor activate(const Tensor& a, Activation kind);

Tensor softmax(const Tensor& z, int axis = -1);
Tensor log_softmax(const Tensor& z, int axis = -1);

/// Normalizes the last axis; eps = 1e-5.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
inline constexpr double kLayerNormEps = 1e-5;

Tensor transpose(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Rows `ids` of `table` stacked into a [len(ids) × d] tensor.
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// mean((a-b)^2)
Tensor mse(const Tensor& a, const Tensor& b);

/// Scaled dot-product multi-head attention over rows; q is [Tq×d], k and v
/// [Tk×d]. `causal` masks keys j > i (requires Tq == Tk).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads, bool causal);

}  // namespace dq
