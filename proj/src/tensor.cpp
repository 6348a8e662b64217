// SPDX-License-Identifier: Apache-2.0

#include "dq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace dq {

using detail::TensorData;
using DataPtr = std::shared_ptr<TensorData>;

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

namespace {

thread_local Tape* g_active_tape = nullptr;

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one extent");
  for (auto e : shape)
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

DataPtr new_data(Shape shape, bool tracked) {
  auto d = std::make_shared<TensorData>();
  d->values.assign(shape_numel(shape), 0.0);
  d->shape = std::move(shape);
  d->requires_grad = tracked;
  d->leaf = !tracked;
  return d;
}

void record(Tape::BackwardFn fn) { g_active_tape->record(std::move(fn)); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw DimensionError(std::string(op) + ": axis out of range");
  return static_cast<std::size_t>(ax);
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Elementwise unary op with derivative computed from (input, output).
template <class Fwd, class Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  const bool track = tracking({&a});
  auto out = new_data(a.shape(), track);
  const auto x = a.values();
  for (std::size_t i = 0; i < x.size(); ++i) out->values[i] = fwd(x[i]);
  if (track) {
    record([A = a.handle(), O = out, deriv] {
      if (O->grad.empty() || !A->requires_grad) return;
      A->ensure_grad();
      for (std::size_t i = 0; i < O->values.size(); ++i)
        A->grad[i] += O->grad[i] * deriv(A->values[i], O->values[i]);
    });
  }
  return make_tensor(out);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor make_tensor(std::shared_ptr<detail::TensorData> data) { return Tensor(std::move(data)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  auto d = std::make_shared<TensorData>();
  d->values.assign(shape_numel(shape), value);
  d->shape = std::move(shape);
  d->requires_grad = requires_grad;
  return Tensor(d);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (shape_numel(shape) != values.size())
    throw DimensionError("value count " + std::to_string(values.size()) + " does not fill shape " +
                         shape_str(shape));
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  d->requires_grad = requires_grad;
  return Tensor(d);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return data_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
  return data_->values[0];
}

double Tensor::at(std::size_t i, std::size_t j) const { return data_->values[i * data_->shape[1] + j]; }

void Tensor::set_requires_grad(bool on) {
  if (!data_->leaf) throw ContractError("requires_grad can only be toggled on leaf tensors");
  data_->requires_grad = on;
}

std::span<double> Tensor::mutable_grad() {
  data_->ensure_grad();
  return data_->grad;
}

void Tensor::zero_grad() {
  if (!data_->grad.empty()) std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  if (!data_) return Tensor{};
  auto d = std::make_shared<TensorData>();
  d->shape = data_->shape;
  d->values = data_->values;
  return Tensor(d);
}

// ---------------------------------------------------------------------------
// Tape

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss, Tape& tape) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward requires a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  if (!loss.requires_grad()) return;
  auto* L = loss.impl();
  L->ensure_grad();
  L->grad[0] = 1.0;
  for (auto it = tape.nodes_.rbegin(); it != tape.nodes_.rend(); ++it) (*it)();
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const bool track = tracking({&a, &b});
  auto out = new_data({m, n}, track);
  const double* A = a.values().data();
  const double* B = b.values().data();
  double* C = out->values.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  if (track) {
    record([Ad = a.handle(), Bd = b.handle(), O = out, m, k, n] {
      if (O->grad.empty()) return;
      const double* dC = O->grad.data();
      if (Ad->requires_grad) {
        Ad->ensure_grad();
        // dA = dC · Bᵀ
        std::vector<double> bt(n * k);
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = Bd->values[p * n + j];
        double* dA = Ad->grad.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = dC[i * n + j];
            const double* btrow = bt.data() + j * k;
            double* darow = dA + i * k;
            for (std::size_t p = 0; p < k; ++p) darow[p] += g * btrow[p];
          }
      }
      if (Bd->requires_grad) {
        Bd->ensure_grad();
        // dB = Aᵀ · dC
        double* dB = Bd->grad.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = Ad->values[i * k + p];
            const double* dcrow = dC + i * n;
            double* dbrow = dB + p * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += aip * dcrow[j];
          }
      }
    });
  }
  return make_tensor(out);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k)
    throw DimensionError("linear: inner extents differ, " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  if (bias.numel() != n)
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match output width " + std::to_string(n));
  const bool track = tracking({&x, &w, &bias});
  auto out = new_data({m, n}, track);
  const double* X = x.values().data();
  const double* W = w.values().data();
  const double* bv = bias.values().data();
  double* Y = out->values.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* yrow = Y + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double xip = X[i * k + p];
      const double* wrow = W + p * n;
      for (std::size_t j = 0; j < n; ++j) yrow[j] += xip * wrow[j];
    }
    for (std::size_t j = 0; j < n; ++j) yrow[j] += bv[j];
  }
  if (track) {
    record([Xd = x.handle(), Wd = w.handle(), Bd = bias.handle(), O = out, m, k, n] {
      if (O->grad.empty()) return;
      const double* dY = O->grad.data();
      if (Xd->requires_grad) {
        Xd->ensure_grad();
        std::vector<double> wt(n * k);
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) wt[j * k + p] = Wd->values[p * n + j];
        double* dX = Xd->grad.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = dY[i * n + j];
            const double* wtrow = wt.data() + j * k;
            double* dxrow = dX + i * k;
            for (std::size_t p = 0; p < k; ++p) dxrow[p] += g * wtrow[p];
          }
      }
      if (Wd->requires_grad) {
        Wd->ensure_grad();
        double* dW = Wd->grad.data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double xip = Xd->values[i * k + p];
            const double* dyrow = dY + i * n;
            double* dwrow = dW + p * n;
            for (std::size_t j = 0; j < n; ++j) dwrow[j] += xip * dyrow[j];
          }
      }
      if (Bd->requires_grad) {
        Bd->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) Bd->grad[j] += dY[i * n + j];
      }
    });
  }
  return make_tensor(out);
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool track = tracking({&a, &b});
  auto out = new_data(a.shape(), track);
  const auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) out->values[i] = x[i] + y[i];
  if (track) {
    record([A = a.handle(), B = b.handle(), O = out] {
      if (O->grad.empty()) return;
      for (auto* P : {A.get(), B.get()}) {
        if (!P->requires_grad) continue;
        P->ensure_grad();
        for (std::size_t i = 0; i < O->grad.size(); ++i) P->grad[i] += O->grad[i];
      }
    });
  }
  return make_tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const bool track = tracking({&a, &b});
  auto out = new_data(a.shape(), track);
  const auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) out->values[i] = x[i] - y[i];
  if (track) {
    record([A = a.handle(), B = b.handle(), O = out] {
      if (O->grad.empty()) return;
      if (A->requires_grad) {
        A->ensure_grad();
        for (std::size_t i = 0; i < O->grad.size(); ++i) A->grad[i] += O->grad[i];
      }
      if (B->requires_grad) {
        B->ensure_grad();
        for (std::size_t i = 0; i < O->grad.size(); ++i) B->grad[i] -= O->grad[i];
      }
    });
  }
  return make_tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool track = tracking({&a, &b});
  auto out = new_data(a.shape(), track);
  const auto x = a.values(), y = b.values();
  for (std::size_t i = 0; i < x.size(); ++i) out->values[i] = x[i] * y[i];
  if (track) {
    record([A = a.handle(), B = b.handle(), O = out] {
      if (O->grad.empty()) return;
      if (A->requires_grad) {
        A->ensure_grad();
        for (std::size_t i = 0; i < O->grad.size(); ++i) A->grad[i] += O->grad[i] * B->values[i];
      }
      if (B->requires_grad) {
        B->ensure_grad();
        for (std::size_t i = 0; i < O->grad.size(); ++i) B->grad[i] += O->grad[i] * A->values[i];
      }
    });
  }
  return make_tensor(out);
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor log(const Tensor& a) {
  for (double x : a.values())
    if (!(x > 0.0)) throw std::domain_error("log: non-positive input");
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x); });
}

Tensor activate(const Tensor& a, Activation kind) { return kind == Activation::Gelu ? gelu(a) : relu(a); }

// ---------------------------------------------------------------------------
// Normalizations

Tensor softmax(const Tensor& z, int axis) {
  const std::size_t ax = normalize_axis(axis, z.rank(), "softmax");
  const auto s = split_axis(z.shape(), ax);
  const bool track = tracking({&z});
  auto out = new_data(z.shape(), track);
  const auto x = z.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, x[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double e = std::exp(x[base + j * s.inner] - mx);
        out->values[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) out->values[base + j * s.inner] /= total;
    }
  if (track) {
    record([Z = z.handle(), O = out, s] {
      if (O->grad.empty() || !Z->requires_grad) return;
      Z->ensure_grad();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < s.extent; ++j) {
            const std::size_t idx = base + j * s.inner;
            dot += O->grad[idx] * O->values[idx];
          }
          for (std::size_t j = 0; j < s.extent; ++j) {
            const std::size_t idx = base + j * s.inner;
            Z->grad[idx] += O->values[idx] * (O->grad[idx] - dot);
          }
        }
    });
  }
  return make_tensor(out);
}

Tensor log_softmax(const Tensor& z, int axis) {
  const std::size_t ax = normalize_axis(axis, z.rank(), "log_softmax");
  const auto s = split_axis(z.shape(), ax);
  const bool track = tracking({&z});
  auto out = new_data(z.shape(), track);
  const auto x = z.values();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, x[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) total += std::exp(x[base + j * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t j = 0; j < s.extent; ++j) out->values[base + j * s.inner] = x[base + j * s.inner] - lse;
    }
  if (track) {
    record([Z = z.handle(), O = out, s] {
      if (O->grad.empty() || !Z->requires_grad) return;
      Z->ensure_grad();
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          double gsum = 0.0;
          for (std::size_t j = 0; j < s.extent; ++j) gsum += O->grad[base + j * s.inner];
          for (std::size_t j = 0; j < s.extent; ++j) {
            const std::size_t idx = base + j * s.inner;
            Z->grad[idx] += O->grad[idx] - std::exp(O->values[idx]) * gsum;
          }
        }
    });
  }
  return make_tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d)
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) + " elements");
  const std::size_t rows = x.numel() / d;
  const bool track = tracking({&x, &gain, &bias});
  auto out = new_data(x.shape(), track);
  // Saved per-row statistics for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  const auto xv = x.values();
  const auto g = gain.values();
  const auto b = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * rs;
      (*xhat)[r * d + c] = h;
      out->values[r * d + c] = h * g[c] + b[c];
    }
  }
  if (track) {
    record([X = x.handle(), G = gain.handle(), B = bias.handle(), O = out, xhat, rstd, rows, d] {
      if (O->grad.empty()) return;
      const auto& dy = O->grad;
      if (X->requires_grad) {
        X->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            const double dh = dy[r * d + c] * G->values[c];
            mean_dh += dh;
            mean_dh_h += dh * (*xhat)[r * d + c];
          }
          mean_dh /= static_cast<double>(d);
          mean_dh_h /= static_cast<double>(d);
          for (std::size_t c = 0; c < d; ++c) {
            const double dh = dy[r * d + c] * G->values[c];
            X->grad[r * d + c] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + c] * mean_dh_h);
          }
        }
      }
      if (G->requires_grad) {
        G->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < d; ++c) G->grad[c] += dy[r * d + c] * (*xhat)[r * d + c];
      }
      if (B->requires_grad) {
        B->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < d; ++c) B->grad[c] += dy[r * d + c];
      }
    });
  }
  return make_tensor(out);
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const bool track = tracking({&a});
  auto out = new_data({n, m}, track);
  const auto x = a.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out->values[j * m + i] = x[i * n + j];
  if (track) {
    record([A = a.handle(), O = out, m, n] {
      if (O->grad.empty() || !A->requires_grad) return;
      A->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) A->grad[i * n + j] += O->grad[j * m + i];
    });
  }
  return make_tensor(out);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const std::size_t ax = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < out_shape.size(); ++i)
      if (i != ax && p.shape()[i] != parts[0].shape()[i])
        throw DimensionError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    out_shape[ax] += p.shape()[ax];
  }
  bool track = false;
  for (const auto& p : parts) track = track || tracking({&p});
  const auto s = split_axis(out_shape, ax);
  auto out = new_data(out_shape, track);
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.shape()[ax] * s.inner;
    const auto x = p.values();
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(x.data() + o * chunk, chunk, out->values.data() + o * s.extent * s.inner + offset * s.inner);
    offset += p.shape()[ax];
  }
  if (track) {
    std::vector<DataPtr> handles;
    for (const auto& p : parts) handles.push_back(p.handle());
    record([handles, offsets, O = out, s, ax] {
      if (O->grad.empty()) return;
      for (std::size_t n = 0; n < handles.size(); ++n) {
        auto& P = *handles[n];
        if (!P.requires_grad) continue;
        P.ensure_grad();
        const std::size_t chunk = P.shape[ax] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* src = O->grad.data() + o * s.extent * s.inner + offsets[n] * s.inner;
          double* dst = P.grad.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return make_tensor(out);
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding_lookup");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding_lookup: empty id list");
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) + " outside table of " +
                              std::to_string(vocab) + " rows");
  const bool track = tracking({&table});
  auto out = new_data({ids.size(), d}, track);
  const auto x = table.values();
  for (std::size_t t = 0; t < ids.size(); ++t)
    std::copy_n(x.data() + static_cast<std::size_t>(ids[t]) * d, d, out->values.data() + t * d);
  if (track) {
    record([T = table.handle(), O = out, idv = std::vector<int>(ids.begin(), ids.end()), d] {
      if (O->grad.empty() || !T->requires_grad) return;
      T->ensure_grad();
      for (std::size_t t = 0; t < idv.size(); ++t) {
        double* dst = T->grad.data() + static_cast<std::size_t>(idv[t]) * d;
        for (std::size_t c = 0; c < d; ++c) dst[c] += O->grad[t * d + c];
      }
    });
  }
  return make_tensor(out);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  const bool track = tracking({&a});
  auto out = new_data({1}, track);
  double total = 0.0;
  for (double x : a.values()) total += x;
  out->values[0] = total;
  if (track) {
    record([A = a.handle(), O = out] {
      if (O->grad.empty() || !A->requires_grad) return;
      A->ensure_grad();
      const double g = O->grad[0];
      for (auto& v : A->grad) v += g;
    });
  }
  return make_tensor(out);
}

Tensor mean(const Tensor& a) {
  const bool track = tracking({&a});
  auto out = new_data({1}, track);
  double total = 0.0;
  for (double x : a.values()) total += x;
  const double n = static_cast<double>(a.numel());
  out->values[0] = total / n;
  if (track) {
    record([A = a.handle(), O = out, n] {
      if (O->grad.empty() || !A->requires_grad) return;
      A->ensure_grad();
      const double g = O->grad[0] / n;
      for (auto& v : A->grad) v += g;
    });
  }
  return make_tensor(out);
}

Tensor mse(const Tensor& a, const Tensor& b) { return mean(square(sub(a, b))); }

// ---------------------------------------------------------------------------
// Attention

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads, bool causal) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const std::size_t tq = q.dim(0), tk = k.dim(0), d = q.dim(1);
  if (k.dim(1) != d || v.dim(1) != d || v.dim(0) != tk)
    throw DimensionError("attention: q/k/v mismatch " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()));
  if (n_heads == 0 || d % n_heads != 0) throw DimensionError("attention: width not divisible by head count");
  if (causal && tq != tk) throw DimensionError("attention: causal mask needs equal query/key lengths");
  const std::size_t dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool track = tracking({&q, &k, &v});
  auto out = new_data({tq, d}, track);
  // probs[h][i][j]
  auto probs = std::make_shared<std::vector<double>>(n_heads * tq * tk, 0.0);
  const double* Q = q.values().data();
  const double* K = k.values().data();
  const double* V = v.values().data();
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t c0 = h * dh;
    for (std::size_t i = 0; i < tq; ++i) {
      double* p = probs->data() + (h * tq + i) * tk;
      const std::size_t jmax = causal ? i + 1 : tk;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < jmax; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += Q[i * d + c0 + c] * K[j * d + c0 + c];
        p[j] = s * sc;
        mx = std::max(mx, p[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < jmax; ++j) {
        p[j] = std::exp(p[j] - mx);
        total += p[j];
      }
      for (std::size_t j = 0; j < jmax; ++j) p[j] /= total;
      double* orow = out->values.data() + i * d + c0;
      for (std::size_t j = 0; j < jmax; ++j) {
        const double pj = p[j];
        const double* vrow = V + j * d + c0;
        for (std::size_t c = 0; c < dh; ++c) orow[c] += pj * vrow[c];
      }
    }
  }
  if (track) {
    record([Qd = q.handle(), Kd = k.handle(), Vd = v.handle(), O = out, probs, n_heads, tq, tk, d, dh, sc, causal] {
      if (O->grad.empty()) return;
      const double* dO = O->grad.data();
      if (Qd->requires_grad) Qd->ensure_grad();
      if (Kd->requires_grad) Kd->ensure_grad();
      if (Vd->requires_grad) Vd->ensure_grad();
      std::vector<double> dp(tk);
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t c0 = h * dh;
        for (std::size_t i = 0; i < tq; ++i) {
          const double* p = probs->data() + (h * tq + i) * tk;
          const std::size_t jmax = causal ? i + 1 : tk;
          const double* dorow = dO + i * d + c0;
          double dot = 0.0;
          for (std::size_t j = 0; j < jmax; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) s += dorow[c] * Vd->values[j * d + c0 + c];
            dp[j] = s;
            dot += s * p[j];
          }
          if (Vd->requires_grad)
            for (std::size_t j = 0; j < jmax; ++j) {
              double* dvrow = Vd->grad.data() + j * d + c0;
              for (std::size_t c = 0; c < dh; ++c) dvrow[c] += p[j] * dorow[c];
            }
          for (std::size_t j = 0; j < jmax; ++j) {
            const double ds = p[j] * (dp[j] - dot) * sc;
            if (Qd->requires_grad) {
              double* dqrow = Qd->grad.data() + i * d + c0;
              for (std::size_t c = 0; c < dh; ++c) dqrow[c] += ds * Kd->values[j * d + c0 + c];
            }
            if (Kd->requires_grad) {
              double* dkrow = Kd->grad.data() + j * d + c0;
              for (std::size_t c = 0; c < dh; ++c) dkrow[c] += ds * Qd->values[i * d + c0 + c];
            }
          }
        }
      }
    });
  }
  return make_tensor(out);
}

}  // namespace dq
