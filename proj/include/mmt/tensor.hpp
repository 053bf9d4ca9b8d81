#pragma once

// Dense row-major tensors plus a reverse-mode autodiff tape.
//
// Forward functions compute values eagerly and, when the tape is recording
// and some input requires gradients, push a node holding the matching
// backward rule. backward() replays the nodes in exact reverse execution
// order and accumulates into .grad, so fan-out adds up on its own.
//
// There is no implicit broadcasting. The only shape-bending operations are
// the explicit ones below (add_row, scale_rows, repeat_row, ...); everything
// else requires identical shapes and throws ShapeError otherwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mmt/error.hpp"

namespace mmt {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(s));
    n *= d;
  }
  return n;
}

// Toggle for per-op finiteness checks. Off by default; tests and the
// gradient checker switch it on.
inline bool& finite_checks() {
  static bool enabled = false;
  return enabled;
}

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until ensure_grad(); same length as values after
  bool requires_grad = false;

  Tensor() = default;

  Tensor(Shape s, T fill, bool rg = false)
      : shape(std::move(s)), values(static_cast<std::size_t>(shape_numel(shape)), fill), requires_grad(rg) {}

  Tensor(Shape s, std::vector<T> vals, bool rg = false)
      : shape(std::move(s)), values(std::move(vals)), requires_grad(rg) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    }
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(values.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  int rows() const {
    if (rank() != 2) throw ShapeError("rows(): tensor is not a matrix, shape " + shape_str(shape));
    return shape[0];
  }
  int cols() const {
    if (rank() != 2) throw ShapeError("cols(): tensor is not a matrix, shape " + shape_str(shape));
    return shape[1];
  }

  T& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols() + c]; }
  const T& at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols() + c]; }

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), T(0));
  }
  void zero_grad() {
    grad.assign(values.size(), T(0));
  }
};

template <class T>
using TensorPtr = std::shared_ptr<Tensor<T>>;

template <class T>
TensorPtr<T> tensor(Shape s, T fill = T(0), bool requires_grad = false) {
  return std::make_shared<Tensor<T>>(std::move(s), fill, requires_grad);
}

template <class T>
TensorPtr<T> tensor(Shape s, std::vector<T> vals, bool requires_grad = false) {
  return std::make_shared<Tensor<T>>(std::move(s), std::move(vals), requires_grad);
}

template <class T>
TensorPtr<T> scalar_tensor(T v) {
  return tensor<T>({1}, std::vector<T>{v});
}

template <class T>
void check_finite(const Tensor<T>& t, const char* where) {
  if (!finite_checks()) return;
  for (std::size_t i = 0; i < t.values.size(); ++i) {
    if (!std::isfinite(static_cast<double>(t.values[i]))) {
      throw NumericError(std::string(where) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

template <class T>
void check_finite_grad(const Tensor<T>& t, const char* where) {
  if (!finite_checks()) return;
  for (std::size_t i = 0; i < t.grad.size(); ++i) {
    if (!std::isfinite(static_cast<double>(t.grad[i]))) {
      throw NumericError(std::string(where) + ": non-finite gradient at flat index " + std::to_string(i));
    }
  }
}

// Records one node per differentiable op, in execution order. A tape belongs
// to one forward/backward pass on one thread; make a fresh one per step.
template <class T>
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<TensorPtr<T>> inputs;
    TensorPtr<T> output;
    std::function<void()> backprop;
  };

  bool recording = true;

  void record(const char* op, std::vector<TensorPtr<T>> inputs, TensorPtr<T> output,
              std::function<void()> backprop) {
    if (!recording || !output->requires_grad) return;
    nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backprop)});
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() {
    nodes_.clear();
    backward_done_ = false;
  }

  bool backward_done() const { return backward_done_; }
  void mark_backward_done() { backward_done_ = true; }

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const TensorPtr<T>*> xs) {
  for (const auto* x : xs) {
    if ((*x)->requires_grad) return true;
  }
  return false;
}

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
  }
}

template <class T>
void require_matrix(const char* op, const Tensor<T>& a) {
  if (a.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(a.shape));
  }
}

// C[m x n] += A[m x k] * B[k x n]
template <class T>
void gemm_nn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T aip = arow[p];
      if (aip == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[m x n] += A[m x k] * B[n x k]^T
template <class T>
void gemm_nt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
template <class T>
void gemm_tn_acc(const T* a, const T* b, T* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    const T* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T aip = arow[p];
      if (aip == T(0)) continue;
      T* crow = c + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core operations. Each returns a fresh tensor and registers its backward
// rule on the tape.
// ---------------------------------------------------------------------------

// Standard matrix product a[m x k] * b[k x n].
template <class T>
TensorPtr<T> matmul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::require_matrix("matmul", *a);
  detail::require_matrix("matmul", *b);
  if (a->cols() != b->rows()) {
    throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a->shape) + " * " +
                     shape_str(b->shape));
  }
  const int m = a->rows(), k = a->cols(), n = b->cols();
  auto out = tensor<T>({m, n});
  detail::gemm_nn_acc(a->values.data(), b->values.data(), out->values.data(), m, k, n);
  out->requires_grad = a->requires_grad || b->requires_grad;
  check_finite(*out, "matmul");
  tape.record("matmul", {a, b}, out, [a, b, out, m, k, n] {
    if (a->requires_grad) {
      a->ensure_grad();
      detail::gemm_nt_acc(out->grad.data(), b->values.data(), a->grad.data(), m, n, k);
    }
    if (b->requires_grad) {
      b->ensure_grad();
      detail::gemm_tn_acc(a->values.data(), out->grad.data(), b->grad.data(), m, k, n);
    }
  });
  return out;
}

// y[B x out] = x[B x in] * W^T for W stored [out x in]. All learned affine
// maps go through this so parameter matrices keep the out-by-in orientation.
template <class T>
TensorPtr<T> linear(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& w) {
  detail::require_matrix("linear", *x);
  detail::require_matrix("linear", *w);
  if (x->cols() != w->cols()) {
    throw ShapeError("linear: input width " + shape_str(x->shape) + " does not match weight " +
                     shape_str(w->shape));
  }
  const int m = x->rows(), k = x->cols(), n = w->rows();
  auto out = tensor<T>({m, n});
  detail::gemm_nt_acc(x->values.data(), w->values.data(), out->values.data(), m, k, n);
  out->requires_grad = x->requires_grad || w->requires_grad;
  check_finite(*out, "linear");
  tape.record("linear", {x, w}, out, [x, w, out, m, k, n] {
    if (x->requires_grad) {
      x->ensure_grad();
      detail::gemm_nn_acc(out->grad.data(), w->values.data(), x->grad.data(), m, n, k);
    }
    if (w->requires_grad) {
      w->ensure_grad();
      detail::gemm_tn_acc(out->grad.data(), x->values.data(), w->grad.data(), m, n, k);
    }
  });
  return out;
}

template <class T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::require_same_shape("add", *a, *b);
  auto out = tensor<T>(a->shape);
  for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] = a->values[i] + b->values[i];
  out->requires_grad = a->requires_grad || b->requires_grad;
  check_finite(*out, "add");
  tape.record("add", {a, b}, out, [a, b, out] {
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i];
    }
  });
  return out;
}

template <class T>
TensorPtr<T> sub(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::require_same_shape("sub", *a, *b);
  auto out = tensor<T>(a->shape);
  for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] = a->values[i] - b->values[i];
  out->requires_grad = a->requires_grad || b->requires_grad;
  check_finite(*out, "sub");
  tape.record("sub", {a, b}, out, [a, b, out] {
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] -= out->grad[i];
    }
  });
  return out;
}

// Hadamard product.
template <class T>
TensorPtr<T> mul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  detail::require_same_shape("mul", *a, *b);
  auto out = tensor<T>(a->shape);
  for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] = a->values[i] * b->values[i];
  out->requires_grad = a->requires_grad || b->requires_grad;
  check_finite(*out, "mul");
  tape.record("mul", {a, b}, out, [a, b, out] {
    if (a->requires_grad) {
      a->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * b->values[i];
    }
    if (b->requires_grad) {
      b->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i] * a->values[i];
    }
  });
  return out;
}

// Explicit bias-row broadcast: y[r, c] = x[r, c] + bias[c].
template <class T>
TensorPtr<T> add_row(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& bias) {
  detail::require_matrix("add_row", *x);
  if (bias->rank() != 1 || bias->shape[0] != x->cols()) {
    throw ShapeError("add_row: bias " + shape_str(bias->shape) + " does not match matrix " +
                     shape_str(x->shape));
  }
  const int m = x->rows(), n = x->cols();
  auto out = tensor<T>({m, n});
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < n; ++c) out->at(r, c) = x->at(r, c) + bias->values[c];
  }
  out->requires_grad = x->requires_grad || bias->requires_grad;
  check_finite(*out, "add_row");
  tape.record("add_row", {x, bias}, out, [x, bias, out, m, n] {
    if (x->requires_grad) {
      x->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i];
    }
    if (bias->requires_grad) {
      bias->ensure_grad();
      for (int r = 0; r < m; ++r) {
        for (int c = 0; c < n; ++c) bias->grad[c] += out->grad[static_cast<std::size_t>(r) * n + c];
      }
    }
  });
  return out;
}

// Row scaling: y[r, c] = x[r, c] * s[r]. Used for masking and for applying
// attention weights; s may be a plain [B] vector or a [B x 1] column.
template <class T>
TensorPtr<T> scale_rows(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& s) {
  detail::require_matrix("scale_rows", *x);
  const int m = x->rows(), n = x->cols();
  const bool col = s->rank() == 2 && s->shape[1] == 1 && s->shape[0] == m;
  if (!col && !(s->rank() == 1 && s->shape[0] == m)) {
    throw ShapeError("scale_rows: scale " + shape_str(s->shape) + " does not match matrix " +
                     shape_str(x->shape));
  }
  auto out = tensor<T>({m, n});
  for (int r = 0; r < m; ++r) {
    const T sr = s->values[r];
    for (int c = 0; c < n; ++c) out->at(r, c) = x->at(r, c) * sr;
  }
  out->requires_grad = x->requires_grad || s->requires_grad;
  check_finite(*out, "scale_rows");
  tape.record("scale_rows", {x, s}, out, [x, s, out, m, n] {
    if (x->requires_grad) {
      x->ensure_grad();
      for (int r = 0; r < m; ++r) {
        const T sr = s->values[r];
        for (int c = 0; c < n; ++c) x->grad[static_cast<std::size_t>(r) * n + c] +=
            out->grad[static_cast<std::size_t>(r) * n + c] * sr;
      }
    }
    if (s->requires_grad) {
      s->ensure_grad();
      for (int r = 0; r < m; ++r) {
        T acc = T(0);
        for (int c = 0; c < n; ++c) acc += out->grad[static_cast<std::size_t>(r) * n + c] *
            x->values[static_cast<std::size_t>(r) * n + c];
        s->grad[r] += acc;
      }
    }
  });
  return out;
}

// Multiplication by a compile-time-known constant.
template <class T>
TensorPtr<T> scale_const(Tape<T>& tape, const TensorPtr<T>& x, T c) {
  auto out = tensor<T>(x->shape);
  for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] = x->values[i] * c;
  out->requires_grad = x->requires_grad;
  check_finite(*out, "scale_const");
  tape.record("scale_const", {x}, out, [x, out, c] {
    if (x->requires_grad) {
      x->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i] * c;
    }
  });
  return out;
}

template <class T>
TensorPtr<T> tanh(Tape<T>& tape, const TensorPtr<T>& x) {
  auto out = tensor<T>(x->shape);
  for (std::size_t i = 0; i < out->values.size(); ++i) out->values[i] = std::tanh(x->values[i]);
  out->requires_grad = x->requires_grad;
  check_finite(*out, "tanh");
  tape.record("tanh", {x}, out, [x, out] {
    if (x->requires_grad) {
      x->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) {
        const T y = out->values[i];
        x->grad[i] += out->grad[i] * (T(1) - y * y);
      }
    }
  });
  return out;
}

template <class T>
TensorPtr<T> sigmoid(Tape<T>& tape, const TensorPtr<T>& x) {
  auto out = tensor<T>(x->shape);
  for (std::size_t i = 0; i < out->values.size(); ++i) {
    const T v = x->values[i];
    out->values[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                               : std::exp(v) / (T(1) + std::exp(v));
  }
  out->requires_grad = x->requires_grad;
  check_finite(*out, "sigmoid");
  tape.record("sigmoid", {x}, out, [x, out] {
    if (x->requires_grad) {
      x->ensure_grad();
      for (std::size_t i = 0; i < out->grad.size(); ++i) {
        const T y = out->values[i];
        x->grad[i] += out->grad[i] * y * (T(1) - y);
      }
    }
  });
  return out;
}

namespace detail {

template <class T>
void softmax_fill_row(const T* x, T* y, int n) {
  T mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  T sum = T(0);
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    sum += y[i];
  }
  for (int i = 0; i < n; ++i) y[i] /= sum;
}

}  // namespace detail

// Row-wise softmax with max subtraction. Accepts a vector (treated as one
// row) or a matrix.
template <class T>
TensorPtr<T> softmax_rows(Tape<T>& tape, const TensorPtr<T>& x) {
  if (x->rank() != 1 && x->rank() != 2) {
    throw ShapeError("softmax_rows: expected vector or matrix, got " + shape_str(x->shape));
  }
  const int m = x->rank() == 2 ? x->shape[0] : 1;
  const int n = x->rank() == 2 ? x->shape[1] : x->shape[0];
  auto out = tensor<T>(x->shape);
  for (int r = 0; r < m; ++r) {
    detail::softmax_fill_row(x->values.data() + static_cast<std::size_t>(r) * n,
                             out->values.data() + static_cast<std::size_t>(r) * n, n);
  }
  out->requires_grad = x->requires_grad;
  check_finite(*out, "softmax_rows");
  tape.record("softmax_rows", {x}, out, [x, out, m, n] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int r = 0; r < m; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * n;
      T dot = T(0);
      for (int i = 0; i < n; ++i) dot += out->grad[off + i] * out->values[off + i];
      for (int i = 0; i < n; ++i) {
        x->grad[off + i] += out->values[off + i] * (out->grad[off + i] - dot);
      }
    }
  });
  return out;
}

// Softmax over the unmasked entries of each row; masked entries get weight
// exactly 0. mask holds {0,1} constants of the same shape. A fully masked
// row is degenerate.
template <class T>
TensorPtr<T> masked_softmax_rows(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& mask) {
  detail::require_matrix("masked_softmax_rows", *x);
  detail::require_same_shape("masked_softmax_rows", *x, *mask);
  const int m = x->rows(), n = x->cols();
  auto out = tensor<T>({m, n});
  for (int r = 0; r < m; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * n;
    T mx = -std::numeric_limits<T>::infinity();
    for (int i = 0; i < n; ++i) {
      if (mask->values[off + i] != T(0)) mx = std::max(mx, x->values[off + i]);
    }
    if (!(mx > -std::numeric_limits<T>::infinity())) {
      throw DegenerateError("masked_softmax_rows: row " + std::to_string(r) + " is fully masked");
    }
    T sum = T(0);
    for (int i = 0; i < n; ++i) {
      if (mask->values[off + i] != T(0)) {
        out->values[off + i] = std::exp(x->values[off + i] - mx);
        sum += out->values[off + i];
      }
    }
    for (int i = 0; i < n; ++i) {
      if (mask->values[off + i] != T(0)) out->values[off + i] /= sum;
    }
  }
  out->requires_grad = x->requires_grad;
  check_finite(*out, "masked_softmax_rows");
  tape.record("masked_softmax_rows", {x, mask}, out, [x, out, m, n] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int r = 0; r < m; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * n;
      T dot = T(0);
      for (int i = 0; i < n; ++i) dot += out->grad[off + i] * out->values[off + i];
      for (int i = 0; i < n; ++i) {
        x->grad[off + i] += out->values[off + i] * (out->grad[off + i] - dot);
      }
    }
  });
  return out;
}

// Numerically stable log softmax per row.
template <class T>
TensorPtr<T> log_softmax_rows(Tape<T>& tape, const TensorPtr<T>& x) {
  detail::require_matrix("log_softmax_rows", *x);
  const int m = x->rows(), n = x->cols();
  auto out = tensor<T>({m, n});
  for (int r = 0; r < m; ++r) {
    const std::size_t off = static_cast<std::size_t>(r) * n;
    T mx = x->values[off];
    for (int i = 1; i < n; ++i) mx = std::max(mx, x->values[off + i]);
    T sum = T(0);
    for (int i = 0; i < n; ++i) sum += std::exp(x->values[off + i] - mx);
    const T lse = mx + std::log(sum);
    for (int i = 0; i < n; ++i) out->values[off + i] = x->values[off + i] - lse;
  }
  out->requires_grad = x->requires_grad;
  check_finite(*out, "log_softmax_rows");
  tape.record("log_softmax_rows", {x}, out, [x, out, m, n] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int r = 0; r < m; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * n;
      T gsum = T(0);
      for (int i = 0; i < n; ++i) gsum += out->grad[off + i];
      for (int i = 0; i < n; ++i) {
        x->grad[off + i] += out->grad[off + i] - std::exp(out->values[off + i]) * gsum;
      }
    }
  });
  return out;
}

// Mean of the rows of h[N x d] whose mask entry is 1. mask is a {0,1} vector
// of length N and does not receive gradients.
template <class T>
TensorPtr<T> masked_mean(Tape<T>& tape, const TensorPtr<T>& h, const TensorPtr<T>& mask) {
  detail::require_matrix("masked_mean", *h);
  if (mask->rank() != 1 || mask->shape[0] != h->rows()) {
    throw ShapeError("masked_mean: mask " + shape_str(mask->shape) + " does not match states " +
                     shape_str(h->shape));
  }
  const int n = h->rows(), d = h->cols();
  T count = T(0);
  for (int i = 0; i < n; ++i) {
    const T m = mask->values[i];
    if (m != T(0) && m != T(1)) {
      throw ContractError("masked_mean: mask entries must be 0 or 1");
    }
    count += m;
  }
  if (count == T(0)) throw DegenerateError("masked_mean: mask selects no rows");
  auto out = tensor<T>({d});
  for (int i = 0; i < n; ++i) {
    if (mask->values[i] == T(0)) continue;
    for (int c = 0; c < d; ++c) out->values[c] += h->at(i, c);
  }
  for (int c = 0; c < d; ++c) out->values[c] /= count;
  out->requires_grad = h->requires_grad;
  check_finite(*out, "masked_mean");
  tape.record("masked_mean", {h, mask}, out, [h, mask, out, n, d, count] {
    if (!h->requires_grad) return;
    h->ensure_grad();
    for (int i = 0; i < n; ++i) {
      if (mask->values[i] == T(0)) continue;
      for (int c = 0; c < d; ++c) h->grad[static_cast<std::size_t>(i) * d + c] += out->grad[c] / count;
    }
  });
  return out;
}

// Embedding lookup: gathers rows of table[V x d] by id. Backward scatters
// into the table rows.
template <class T>
TensorPtr<T> lookup_rows(Tape<T>& tape, const TensorPtr<T>& table, const std::vector<int>& ids) {
  detail::require_matrix("lookup_rows", *table);
  const int v = table->rows(), d = table->cols();
  const int b = static_cast<int>(ids.size());
  if (b == 0) throw ContractError("lookup_rows: empty id list");
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw ContractError("lookup_rows: id " + std::to_string(id) + " outside table with " +
                          std::to_string(v) + " rows");
    }
  }
  auto out = tensor<T>({b, d});
  for (int r = 0; r < b; ++r) {
    const T* src = table->values.data() + static_cast<std::size_t>(ids[r]) * d;
    std::copy(src, src + d, out->values.data() + static_cast<std::size_t>(r) * d);
  }
  out->requires_grad = table->requires_grad;
  tape.record("lookup_rows", {table}, out, [table, out, ids, b, d] {
    if (!table->requires_grad) return;
    table->ensure_grad();
    for (int r = 0; r < b; ++r) {
      T* dst = table->grad.data() + static_cast<std::size_t>(ids[r]) * d;
      const T* src = out->grad.data() + static_cast<std::size_t>(r) * d;
      for (int c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
  return out;
}

// Per-row column gather: y[r] = x[r, ids[r]].
template <class T>
TensorPtr<T> pick_cols(Tape<T>& tape, const TensorPtr<T>& x, const std::vector<int>& ids) {
  detail::require_matrix("pick_cols", *x);
  const int m = x->rows(), n = x->cols();
  if (static_cast<int>(ids.size()) != m) {
    throw ShapeError("pick_cols: need one index per row, got " + std::to_string(ids.size()) +
                     " for " + shape_str(x->shape));
  }
  for (int id : ids) {
    if (id < 0 || id >= n) {
      throw ContractError("pick_cols: column " + std::to_string(id) + " outside width " +
                          std::to_string(n));
    }
  }
  auto out = tensor<T>({m});
  for (int r = 0; r < m; ++r) out->values[r] = x->at(r, ids[r]);
  out->requires_grad = x->requires_grad;
  tape.record("pick_cols", {x}, out, [x, out, ids, m, n] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int r = 0; r < m; ++r) x->grad[static_cast<std::size_t>(r) * n + ids[r]] += out->grad[r];
  });
  return out;
}

// Column j of a matrix as a vector.
template <class T>
TensorPtr<T> slice_col(Tape<T>& tape, const TensorPtr<T>& x, int j) {
  detail::require_matrix("slice_col", *x);
  const int m = x->rows(), n = x->cols();
  if (j < 0 || j >= n) throw ShapeError("slice_col: column " + std::to_string(j) + " outside " + shape_str(x->shape));
  auto out = tensor<T>({m});
  for (int r = 0; r < m; ++r) out->values[r] = x->at(r, j);
  out->requires_grad = x->requires_grad;
  tape.record("slice_col", {x}, out, [x, out, j, m, n] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int r = 0; r < m; ++r) x->grad[static_cast<std::size_t>(r) * n + j] += out->grad[r];
  });
  return out;
}

// Horizontal concatenation of matrices with equal row counts.
template <class T>
TensorPtr<T> concat_cols(Tape<T>& tape, const std::vector<TensorPtr<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  const int m = parts[0]->rows();
  int total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::require_matrix("concat_cols", *p);
    if (p->rows() != m) {
      throw ShapeError("concat_cols: row counts differ, " + shape_str(parts[0]->shape) + " vs " +
                       shape_str(p->shape));
    }
    total += p->cols();
    rg = rg || p->requires_grad;
  }
  auto out = tensor<T>({m, total});
  int col0 = 0;
  for (const auto& p : parts) {
    const int w = p->cols();
    for (int r = 0; r < m; ++r) {
      std::copy(p->values.data() + static_cast<std::size_t>(r) * w,
                p->values.data() + static_cast<std::size_t>(r) * w + w,
                out->values.data() + static_cast<std::size_t>(r) * total + col0);
    }
    col0 += w;
  }
  out->requires_grad = rg;
  tape.record("concat_cols", parts, out, [parts, out, m, total] {
    int c0 = 0;
    for (const auto& p : parts) {
      const int w = p->cols();
      if (p->requires_grad) {
        p->ensure_grad();
        for (int r = 0; r < m; ++r) {
          const T* src = out->grad.data() + static_cast<std::size_t>(r) * total + c0;
          T* dst = p->grad.data() + static_cast<std::size_t>(r) * w;
          for (int c = 0; c < w; ++c) dst[c] += src[c];
        }
      }
      c0 += w;
    }
  });
  return out;
}

// Repeats a vector v[n] as every row of a [b x n] matrix.
template <class T>
TensorPtr<T> repeat_row(Tape<T>& tape, const TensorPtr<T>& v, int b) {
  if (v->rank() != 1) throw ShapeError("repeat_row: expected a vector, got " + shape_str(v->shape));
  if (b <= 0) throw ContractError("repeat_row: row count must be positive");
  const int n = v->shape[0];
  auto out = tensor<T>({b, n});
  for (int r = 0; r < b; ++r) {
    std::copy(v->values.begin(), v->values.end(),
              out->values.begin() + static_cast<std::size_t>(r) * n);
  }
  out->requires_grad = v->requires_grad;
  tape.record("repeat_row", {v}, out, [v, out, b, n] {
    if (!v->requires_grad) return;
    v->ensure_grad();
    for (int r = 0; r < b; ++r) {
      for (int c = 0; c < n; ++c) v->grad[c] += out->grad[static_cast<std::size_t>(r) * n + c];
    }
  });
  return out;
}

// Sum of all elements, as a rank-1 scalar.
template <class T>
TensorPtr<T> sum_all(Tape<T>& tape, const TensorPtr<T>& x) {
  auto out = tensor<T>({1});
  T acc = T(0);
  for (const T v : x->values) acc += v;
  out->values[0] = acc;
  out->requires_grad = x->requires_grad;
  check_finite(*out, "sum_all");
  tape.record("sum_all", {x}, out, [x, out] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    const T g = out->grad[0];
    for (std::size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += g;
  });
  return out;
}

// Rescales every row of x to unit L2 norm. A (near-)zero row is degenerate
// because the direction is undefined.
template <class T>
TensorPtr<T> l2_normalize_rows(Tape<T>& tape, const TensorPtr<T>& x) {
  detail::require_matrix("l2_normalize_rows", *x);
  const int m = x->rows(), n = x->cols();
  auto out = tensor<T>({m, n});
  auto norms = std::make_shared<std::vector<T>>(m);
  for (int r = 0; r < m; ++r) {
    T sq = T(0);
    for (int c = 0; c < n; ++c) sq += x->at(r, c) * x->at(r, c);
    const T norm = std::sqrt(sq);
    if (!(norm > T(1e-30))) {
      throw DegenerateError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
    }
    (*norms)[r] = norm;
    for (int c = 0; c < n; ++c) out->at(r, c) = x->at(r, c) / norm;
  }
  out->requires_grad = x->requires_grad;
  check_finite(*out, "l2_normalize_rows");
  tape.record("l2_normalize_rows", {x}, out, [x, out, norms, m, n] {
    if (!x->requires_grad) return;
    x->ensure_grad();
    for (int r = 0; r < m; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * n;
      T dot = T(0);
      for (int c = 0; c < n; ++c) dot += out->grad[off + c] * out->values[off + c];
      for (int c = 0; c < n; ++c) {
        x->grad[off + c] += (out->grad[off + c] - out->values[off + c] * dot) / (*norms)[r];
      }
    }
  });
  return out;
}

// Runs the tape backward from a scalar loss. Gradients accumulate into the
// .grad buffers of every tensor reachable from the loss; leaves that were
// never touched keep whatever (typically zeroed) grad they had.
template <class T>
void backward(Tape<T>& tape, const TensorPtr<T>& loss) {
  if (loss->numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss->shape));
  }
  if (tape.backward_done()) {
    throw ContractError("backward: tape already traversed; use a fresh tape per pass");
  }
  bool found = false;
  for (auto it = tape.nodes().rbegin(); it != tape.nodes().rend(); ++it) {
    if (it->output == loss) {
      found = true;
      break;
    }
  }
  if (!found) throw ContractError("backward: loss was not produced on this tape");
  for (const auto& node : tape.nodes()) node.output->ensure_grad();
  loss->grad[0] = T(1);
  const auto& nodes = tape.nodes();
  for (std::size_t i = nodes.size(); i-- > 0;) {
    nodes[i].backprop();
    if (finite_checks()) {
      for (const auto& in : nodes[i].inputs) check_finite_grad(*in, nodes[i].op);
    }
  }
  tape.mark_backward_done();
}

}  // namespace mmt
