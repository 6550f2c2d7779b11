// Copyright 2026 The modepth Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense float64 tensors with a reverse-mode tape.
//
// Ops record themselves on the thread's active Tape (see Tape::Scope) when
// at least one input requires a gradient. With no active tape every op is a
// plain forward computation, which is what evaluation and decoding use.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mod {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

/// Multiply-accumulate counter bumped by matmul-like kernels. The flops
/// module cross-checks its analytic counts against it.
inline std::uint64_t& mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches it
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->data.assign(numel(shape), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (numel(shape) != values.size()) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + to_string(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor scalar(double v) { return from({}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t rows() const { return impl_->shape.at(0); }
  std::size_t cols() const { return impl_->shape.at(1); }

  std::span<const double> data() const { return impl_->data; }
  /// Direct write access; only meant for leaves (parameters, inputs).
  std::span<double> mutable_data() { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + to_string(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  const detail::ImplPtr& impl() const { return impl_; }

 private:
  explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}
  friend class Tape;
  template <class F>
  friend Tensor make_result(Shape, std::vector<double>, std::initializer_list<Tensor>, F&&);

  detail::ImplPtr impl_;
};

/// Ordered record of differentiable operations for one forward pass.
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Makes `tape` the recording target for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape) : previous_(active()) { active() = &tape; }
    ~Scope() { active() = previous_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* previous_;
  };

  /// Temporarily disables recording (forward-only evaluation).
  class Pause {
   public:
    Pause() : previous_(active()) { active() = nullptr; }
    ~Pause() { active() = previous_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape* previous_;
  };

  static Tape*& active() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  void record(detail::ImplPtr output, BackwardFn fn) {
    if (consumed_) throw ContractError("recording onto a tape that already ran backward");
    entries_.push_back({std::move(output), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse.
  void backward(const Tensor& loss) {
    if (consumed_) throw ContractError("backward already ran on this tape; re-record the forward pass");
    if (!loss.defined() || loss.size() != 1) throw ContractError("backward requires a scalar loss");
    if (!loss.requires_grad()) throw ContractError("loss is not connected to any trainable tensor");
    consumed_ = true;
    loss.impl()->grad_buffer()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // not on a path to the loss
      it->backward();
    }
    entries_.clear();
  }

  void clear() {
    entries_.clear();
    consumed_ = false;
  }

 private:
  struct Entry {
    detail::ImplPtr output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
};

namespace detail {

inline void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

inline bool any_requires_grad(std::initializer_list<Tensor> inputs) {
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + " expects a rank-2 tensor, got " + to_string(t.shape()));
}

// C[m×n] (+)= A[m×k]·B[k×n]; each output element sums over k in ascending order.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×n] (+)= A[m×k]·B[n×k]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] += s;
    }
  }
}

// C[k×n] (+)= A[m×k]ᵀ·B[m×n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < m; ++p) {
    const double* arow = a + p * k;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline void validate_increasing(std::span<const std::size_t> idx, std::size_t limit, const char* op) {
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= limit) {
      throw IndexError(std::string(op) + ": index " + std::to_string(idx[j]) + " out of range [0," +
                       std::to_string(limit) + ")");
    }
    if (j > 0 && idx[j] <= idx[j - 1]) throw IndexError(std::string(op) + ": indices must be strictly increasing");
  }
}

}  // namespace detail

/// Builds an op result and, when recording, registers `backward` (called
/// as backward(out_grad) after the output gradient is populated).
template <class F>
Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs, F&& backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  Tape* tape = Tape::active();
  if (tape != nullptr && detail::any_requires_grad(inputs)) {
    out.impl_->requires_grad = true;
    std::weak_ptr<detail::TensorImpl> weak = out.impl_;
    tape->record(out.impl_, [weak, fn = std::forward<F>(backward)]() mutable {
      if (auto o = weak.lock()) fn(std::span<const double>(o->grad));
    });
  }
  return out;
}

namespace detail {

// Accumulates into an input's grad only if it participates in autodiff.
inline double* grad_of(const Tensor& t) {
  if (!t.requires_grad()) return nullptr;
  return t.impl()->grad_buffer().data();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  mac_counter() += m * k * n;
  detail::check_finite(out, "matmul");
  return make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) {
    if (double* ga = detail::grad_of(a)) detail::gemm_nt(g.data(), b.data().data(), ga, m, n, k);
    if (double* gb = detail::grad_of(b)) detail::gemm_tn(a.data().data(), g.data(), gb, m, k, n);
  });
}

/// a[m×k] · b[n×k]ᵀ without materializing the transpose.
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_bt");
  detail::require_rank2(b, "matmul_bt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError("matmul_bt: inner extents differ, " + to_string(a.shape()) + " x " + to_string(b.shape()) + "^T");
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  mac_counter() += m * k * n;
  detail::check_finite(out, "matmul_bt");
  return make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) {
    if (double* ga = detail::grad_of(a)) detail::gemm_nn(g.data(), b.data().data(), ga, m, n, k);
    if (double* gb = detail::grad_of(b)) detail::gemm_tn(g.data(), a.data().data(), gb, m, n, k);
  });
}

// ---------------------------------------------------------------------------
// Elementwise and reductions

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  detail::check_finite(out, "add");
  return make_result(a.shape(), std::move(out), {a, b}, [a, b](std::span<const double> g) {
    if (double* ga = detail::grad_of(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (double* gb = detail::grad_of(b))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a[i];
  detail::check_finite(out, "scale");
  return make_result(a.shape(), std::move(out), {a}, [a, c](std::span<const double> g) {
    if (double* ga = detail::grad_of(a))
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

/// x[m×n] + bias[n] broadcast over rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& bias) {
  detail::require_rank2(x, "add_rowvec");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.size() != n) throw ShapeError("add_rowvec: bias length " + std::to_string(bias.size()) + " != " + std::to_string(n));
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
  detail::check_finite(out, "add_rowvec");
  return make_result(x.shape(), std::move(out), {x, bias}, [x, bias, m, n](std::span<const double> g) {
    if (double* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    if (double* gb = detail::grad_of(bias))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
  });
}

/// Scales row i of x[m×n] by s[i]; s has m elements.
inline Tensor mul_rows(const Tensor& x, const Tensor& s) {
  detail::require_rank2(x, "mul_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (s.size() != m) throw ShapeError("mul_rows: " + std::to_string(s.size()) + " scales for " + std::to_string(m) + " rows");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = s[i] * x[i * n + j];
  detail::check_finite(out, "mul_rows");
  return make_result(x.shape(), std::move(out), {x, s}, [x, s, m, n](std::span<const double> g) {
    if (double* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += s[i] * g[i * n + j];
    if (double* gs = detail::grad_of(s))
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += x[i * n + j] * g[i * n + j];
        gs[i] += acc;
      }
  });
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  auto y = std::make_shared<std::vector<double>>(out);
  return make_result(x.shape(), std::move(out), {x}, [x, y](std::span<const double> g) {
    if (double* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*y)[i] * (1.0 - (*y)[i]);
  });
}

inline double gelu_value(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_derivative(double x) {
  constexpr double k = 0.7978845608028654;
  const double u = k * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

/// tanh-approximated GELU.
inline Tensor gelu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gelu_value(x[i]);
  detail::check_finite(out, "gelu");
  return make_result(x.shape(), std::move(out), {x}, [x](std::span<const double> g) {
    if (double* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_derivative(x[i]);
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, {x}, [x](std::span<const double> g) {
    if (double* gx = detail::grad_of(x))
      for (std::size_t i = 0; i < x.size(); ++i) gx[i] += g[0];
  });
}

/// New leaf holding a copy of x's values; gradients stop here.
inline Tensor detach(const Tensor& x) { return Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end())); }

/// Numerically stable softmax along `axis` (negative counts from the back).
inline Tensor softmax(const Tensor& x, int axis = -1) {
  const int r = static_cast<int>(x.rank());
  const int ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + to_string(x.shape()));
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= s[i];
  for (int i = ax + 1; i < r; ++i) inner *= s[i];
  const std::size_t n = s[ax];
  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += (out[base + j * inner] = std::exp(x[base + j * inner] - mx));
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  auto y = std::make_shared<std::vector<double>>(out);
  return make_result(x.shape(), std::move(out), {x}, [x, y, outer, inner, n](std::span<const double> g) {
    double* gx = detail::grad_of(x);
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * (*y)[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = base + j * inner;
          gx[k] += (*y)[k] * (g[k] - dot);
        }
      }
  });
}

/// Row-wise layer normalization over the last axis of x[...×d].
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  if (x.rank() == 0) throw ShapeError("layer_norm on a scalar");
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d) throw ShapeError("layer_norm: affine parameters do not match width " + std::to_string(d));
  const std::size_t rows = d == 0 ? 0 : x.size() / d;
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * is;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
  detail::check_finite(out, "layer_norm");
  return make_result(x.shape(), std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std, rows, d](std::span<const double> g) {
    double* gx = detail::grad_of(x);
    double* gg = detail::grad_of(gain);
    double* gb = detail::grad_of(bias);
    std::vector<double> dh(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * d;
      const double* hr = xhat->data() + r * d;
      if (gg)
        for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * hr[j];
      if (gb)
        for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
      if (!gx) continue;
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dh[j] = gr[j] * gain[j];
        mean_dh += dh[j];
        mean_dh_h += dh[j] * hr[j];
      }
      mean_dh /= static_cast<double>(d);
      mean_dh_h /= static_cast<double>(d);
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += (*inv_std)[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
    }
  });
}

// ---------------------------------------------------------------------------
// Row selection

/// Rows of table[V×d] at ids (repeats allowed).
inline Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  detail::require_rank2(table, "embedding");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= v) throw IndexError("embedding: id " + std::to_string(ids[i]) + " >= vocabulary " + std::to_string(v));
    std::copy_n(table.data().data() + ids[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> keep(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), {table}, [table, keep, d](std::span<const double> g) {
    if (double* gt = detail::grad_of(table))
      for (std::size_t i = 0; i < keep.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) gt[keep[i] * d + j] += g[i * d + j];
  });
}

/// Rows idx (strictly increasing) of x[S×d].
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  detail::require_rank2(x, "gather_rows");
  detail::validate_increasing(idx, x.rows(), "gather_rows");
  const std::size_t d = x.cols();
  std::vector<double> out(idx.size() * d);
  for (std::size_t j = 0; j < idx.size(); ++j) std::copy_n(x.data().data() + idx[j] * d, d, out.data() + j * d);
  std::vector<std::size_t> keep(idx.begin(), idx.end());
  return make_result({idx.size(), d}, std::move(out), {x}, [x, keep, d](std::span<const double> g) {
    if (double* gx = detail::grad_of(x))
      for (std::size_t j = 0; j < keep.size(); ++j)
        for (std::size_t c = 0; c < d; ++c) gx[keep[j] * d + c] += g[j * d + c];
  });
}

/// Copy of base with rows[j] added onto row idx[j]; other rows untouched.
inline Tensor scatter_rows_add(const Tensor& base, std::span<const std::size_t> idx, const Tensor& rows) {
  detail::require_rank2(base, "scatter_rows_add");
  detail::require_rank2(rows, "scatter_rows_add");
  detail::validate_increasing(idx, base.rows(), "scatter_rows_add");
  const std::size_t d = base.cols();
  if (rows.rows() != idx.size() || rows.cols() != d) {
    throw ShapeError("scatter_rows_add: rows " + to_string(rows.shape()) + " for " + std::to_string(idx.size()) +
                     " indices into " + to_string(base.shape()));
  }
  std::vector<double> out(base.data().begin(), base.data().end());
  for (std::size_t j = 0; j < idx.size(); ++j)
    for (std::size_t c = 0; c < d; ++c) out[idx[j] * d + c] += rows[j * d + c];
  detail::check_finite(out, "scatter_rows_add");
  std::vector<std::size_t> keep(idx.begin(), idx.end());
  return make_result(base.shape(), std::move(out), {base, rows}, [base, rows, keep, d](std::span<const double> g) {
    if (double* gb = detail::grad_of(base))
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    if (double* gr = detail::grad_of(rows))
      for (std::size_t j = 0; j < keep.size(); ++j)
        for (std::size_t c = 0; c < d; ++c) gr[j * d + c] += g[keep[j] * d + c];
  });
}

/// Elements idx of a flat tensor, as a column [C×1].
inline Tensor take(const Tensor& x, std::span<const std::size_t> idx) {
  std::vector<double> out(idx.size());
  for (std::size_t j = 0; j < idx.size(); ++j) {
    if (idx[j] >= x.size()) throw IndexError("take: index out of range");
    out[j] = x[idx[j]];
  }
  std::vector<std::size_t> keep(idx.begin(), idx.end());
  return make_result({idx.size(), 1}, std::move(out), {x}, [x, keep](std::span<const double> g) {
    if (double* gx = detail::grad_of(x))
      for (std::size_t j = 0; j < keep.size(); ++j) gx[keep[j]] += g[j];
  });
}

// ---------------------------------------------------------------------------
// Attention kernels

/// Rotary position encoding on x[N×d] split into heads, using the given
/// absolute positions (one per row). Pairs dimension i with i + head_dim/2.
inline Tensor rotary(const Tensor& x, std::span<const std::size_t> positions, std::size_t n_heads, double base = 10000.0) {
  detail::require_rank2(x, "rotary");
  const std::size_t n = x.rows(), d = x.cols();
  if (positions.size() != n) throw ShapeError("rotary: one position per row required");
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) throw ShapeError("rotary: head width must be even");
  const std::size_t hd = d / n_heads, half = hd / 2;
  auto cs = std::make_shared<std::vector<double>>(n * half * 2);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < half; ++i) {
      const double theta = static_cast<double>(positions[r]) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      (*cs)[(r * half + i) * 2] = std::cos(theta);
      (*cs)[(r * half + i) * 2 + 1] = std::sin(theta);
    }
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t a = r * d + h * hd + i, b = a + half;
        const double c = (*cs)[(r * half + i) * 2], s = (*cs)[(r * half + i) * 2 + 1];
        out[a] = x[a] * c - x[b] * s;
        out[b] = x[a] * s + x[b] * c;
      }
  return make_result(x.shape(), std::move(out), {x}, [x, cs, n, d, n_heads, hd, half](std::span<const double> g) {
    double* gx = detail::grad_of(x);
    if (!gx) return;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t h = 0; h < n_heads; ++h)
        for (std::size_t i = 0; i < half; ++i) {
          const std::size_t a = r * d + h * hd + i, b = a + half;
          const double c = (*cs)[(r * half + i) * 2], s = (*cs)[(r * half + i) * 2 + 1];
          gx[a] += g[a] * c + g[b] * s;
          gx[b] += -g[a] * s + g[b] * c;
        }
  });
}

/// A contiguous run of rows [begin, begin + length) belonging to one sequence.
struct Segment {
  std::size_t begin = 0;
  std::size_t length = 0;
};

/// Multi-head scaled dot-product attention over q,k,v[N×d]. Rows attend
/// only within their segment and only to rows whose position is <= their
/// own. The full score matrix of each segment is computed (static shape);
/// masked entries are zeroed after the softmax.
inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const std::size_t> positions,
                               std::span<const Segment> segments, std::size_t n_heads) {
  detail::require_rank2(q, "causal_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) throw ShapeError("causal_attention: q/k/v shapes differ");
  const std::size_t n = q.rows(), d = q.cols();
  if (positions.size() != n) throw ShapeError("causal_attention: one position per row required");
  if (n_heads == 0 || d % n_heads != 0) throw ShapeError("causal_attention: width not divisible by heads");
  const std::size_t hd = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::size_t covered = 0;
  for (const auto& s : segments) {
    if (s.begin != covered) throw ShapeError("causal_attention: segments must tile the rows in order");
    covered += s.length;
    for (std::size_t i = s.begin + 1; i < s.begin + s.length; ++i)
      if (positions[i] <= positions[i - 1]) throw ContractError("causal_attention: positions must be strictly increasing");
  }
  if (covered != n) throw ShapeError("causal_attention: segments do not cover all rows");

  // probs holds, per segment and head, the C×C attention matrix.
  auto probs = std::make_shared<std::vector<double>>();
  std::size_t total = 0;
  for (const auto& s : segments) total += s.length * s.length * n_heads;
  probs->resize(total);
  std::vector<double> out(n * d, 0.0);
  std::size_t off = 0;
  for (const auto& s : segments) {
    const std::size_t c = s.length;
    for (std::size_t h = 0; h < n_heads; ++h) {
      double* p = probs->data() + off;
      for (std::size_t i = 0; i < c; ++i) {
        const double* qi = q.data().data() + (s.begin + i) * d + h * hd;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < c; ++j) {
          const double* kj = k.data().data() + (s.begin + j) * d + h * hd;
          double acc = 0.0;
          for (std::size_t t = 0; t < hd; ++t) acc += qi[t] * kj[t];
          p[i * c + j] = acc * inv_sqrt;
          if (positions[s.begin + j] <= positions[s.begin + i]) mx = std::max(mx, p[i * c + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          const bool visible = positions[s.begin + j] <= positions[s.begin + i];
          p[i * c + j] = visible ? std::exp(p[i * c + j] - mx) : 0.0;
          z += p[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) p[i * c + j] /= z;
        double* oi = out.data() + (s.begin + i) * d + h * hd;
        for (std::size_t j = 0; j < c; ++j) {
          const double pij = p[i * c + j];
          const double* vj = v.data().data() + (s.begin + j) * d + h * hd;
          for (std::size_t t = 0; t < hd; ++t) oi[t] += pij * vj[t];
        }
      }
      off += c * c;
    }
    mac_counter() += 2 * c * c * d;
  }
  detail::check_finite(out, "causal_attention");
  std::vector<Segment> segs(segments.begin(), segments.end());
  return make_result(q.shape(), std::move(out), {q, k, v}, [q, k, v, probs, segs, n_heads, d, hd, inv_sqrt](std::span<const double> g) {
    double* gq = detail::grad_of(q);
    double* gk = detail::grad_of(k);
    double* gv = detail::grad_of(v);
    std::size_t off = 0;
    std::vector<double> ds;
    for (const auto& s : segs) {
      const std::size_t c = s.length;
      ds.assign(c * c, 0.0);
      for (std::size_t h = 0; h < n_heads; ++h) {
        const double* p = probs->data() + off;
        for (std::size_t i = 0; i < c; ++i) {
          const double* gi = g.data() + (s.begin + i) * d + h * hd;
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            const double* vj = v.data().data() + (s.begin + j) * d + h * hd;
            double dp = 0.0;
            for (std::size_t t = 0; t < hd; ++t) dp += gi[t] * vj[t];
            ds[i * c + j] = dp;
            dot += dp * p[i * c + j];
            if (gv) {
              double* gvj = gv + (s.begin + j) * d + h * hd;
              for (std::size_t t = 0; t < hd; ++t) gvj[t] += p[i * c + j] * gi[t];
            }
          }
          for (std::size_t j = 0; j < c; ++j) ds[i * c + j] = p[i * c + j] * (ds[i * c + j] - dot) * inv_sqrt;
        }
        for (std::size_t i = 0; i < c; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const double w = ds[i * c + j];
            if (w == 0.0) continue;
            const std::size_t ri = (s.begin + i) * d + h * hd, rj = (s.begin + j) * d + h * hd;
            if (gq)
              for (std::size_t t = 0; t < hd; ++t) gq[ri + t] += w * k[rj + t];
            if (gk)
              for (std::size_t t = 0; t < hd; ++t) gk[rj + t] += w * q[ri + t];
          }
        off += c * c;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

/// Mean negative log-likelihood of targets under row-wise softmax(logits).
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  detail::require_rank2(logits, "cross_entropy");
  const std::size_t n = logits.rows(), v = logits.cols();
  if (targets.size() != n) throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(n) + " rows");
  if (n == 0) throw ShapeError("cross_entropy: empty batch");
  auto probs = std::make_shared<std::vector<double>>(n * v);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= v) throw IndexError("cross_entropy: target " + std::to_string(targets[i]) + " >= vocabulary " + std::to_string(v));
    const double* z = logits.data().data() + i * v;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, z[j]);
    double se = 0.0;
    for (std::size_t j = 0; j < v; ++j) se += ((*probs)[i * v + j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] /= se;
    total += (std::log(se) + mx) - z[targets[i]];
  }
  const double loss = total / static_cast<double>(n);
  std::vector<std::size_t> keep(targets.begin(), targets.end());
  return make_result({}, {loss}, {logits}, [logits, probs, keep, n, v](std::span<const double> g) {
    double* gl = detail::grad_of(logits);
    if (!gl) return;
    const double s = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < v; ++j) gl[i * v + j] += s * (*probs)[i * v + j];
      gl[i * v + keep[i]] -= s;
    }
  });
}

/// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
inline Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  const std::size_t n = logits.size();
  if (targets.size() != n) throw ShapeError("bce_with_logits: target count mismatch");
  if (n == 0) throw ShapeError("bce_with_logits: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = logits[i];
    total += std::max(r, 0.0) - r * targets[i] + std::log1p(std::exp(-std::abs(r)));
  }
  std::vector<double> keep(targets.begin(), targets.end());
  return make_result({}, {total / static_cast<double>(n)}, {logits}, [logits, keep, n](std::span<const double> g) {
    double* gl = detail::grad_of(logits);
    if (!gl) return;
    const double s = g[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) gl[i] += s * (1.0 / (1.0 + std::exp(-logits[i])) - keep[i]);
  });
}

}  // namespace mod
