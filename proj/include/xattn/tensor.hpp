#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "xattn/rng.hpp"

#if defined(__GNUC__) || defined(__clang__)
#define XATTN_RESTRICT __restrict__
#else
#define XATTN_RESTRICT
#endif

namespace xattn {

enum class Mode { kTrain, kEval };

using Shape = std::vector<int>;

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

struct ParamError : std::invalid_argument {
  explicit ParamError(const std::string& what) : std::invalid_argument(what) {}
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

// Thread-local switch controlling whether ops record the backward graph.
// Each model instance lives on one worker, so thread-local scope is enough.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool v) { flag() = v; }

 private:
  static bool& flag() {
    thread_local bool f = true;
    return f;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev); }
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;  // null for leaves
};

template <typename T>
class GradTape;

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode<T>>();
    const auto count = numel_of(shape);
    n->shape = std::move(shape);
    n->data.assign(static_cast<size_t>(count), T(0));
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(static_cast<size_t>(count), T(0));
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (numel_of(shape) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("from_data: " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->data.size(), T(0));
    return Tensor(std::move(n));
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::vector<T>& data() { return node_->data; }
  const std::vector<T>& data() const { return node_->data; }

  std::vector<T>& grad() {
    if (!node_->requires_grad) throw std::logic_error("grad on tensor without requires_grad");
    return node_->grad;
  }
  const std::vector<T>& grad() const {
    if (!node_->requires_grad) throw std::logic_error("grad on tensor without requires_grad");
    return node_->grad;
  }

  bool requires_grad() const { return node_->requires_grad; }

  T value() const {
    if (numel() != 1) throw ShapeError("value() on non-scalar tensor " + shape_str(shape()));
    return node_->data[0];
  }

  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  void backward();

  std::shared_ptr<TensorNode<T>>& node() { return node_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of the executed graph. Reverse topological replay applies the
// chain rule exactly once per node; the record (closures and parent links) is
// released afterwards.
template <typename T>
class GradTape {
 public:
  void collect(const std::shared_ptr<TensorNode<T>>& root) {
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    std::unordered_set<TensorNode<T>*> seen;
    std::unordered_set<TensorNode<T>*> done;
    keep_.push_back(root);
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        TensorNode<T>* p = node->parents[next].get();
        keep_.push_back(node->parents[next]);
        ++next;
        if (!seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        if (!done.count(node)) {
          done.insert(node);
          order_.push_back(node);
        }
        stack.pop_back();
      }
    }
  }

  void run_and_clear() {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      TensorNode<T>* n = *it;
      if (n->backward && n->requires_grad) n->backward(*n);
    }
    for (TensorNode<T>* n : order_) {
      n->backward = nullptr;
      n->parents.clear();
    }
  }

 private:
  std::vector<TensorNode<T>*> order_;
  std::vector<std::shared_ptr<TensorNode<T>>> keep_;
};

template <typename T>
void Tensor<T>::backward() {
  if (numel() != 1) throw ShapeError("backward() requires a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) throw std::logic_error("backward() on tensor without requires_grad");
  GradTape<T> tape;
  tape.collect(node_);
  node_->grad[0] += T(1);
  tape.run_and_clear();
}

namespace detail {

// Hand-rolled GEMM kernels. Each output element accumulates over k in a fixed
// order that does not depend on the number of rows, so per-sample results are
// bit-identical whether computed batched or singly.

// C += A[m,k] * B[k,n]
template <typename T>
void gemm_acc(const T* XATTN_RESTRICT a, const T* XATTN_RESTRICT b, T* XATTN_RESTRICT c, int m,
              int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* ci = c + static_cast<std::int64_t>(i) * n;
    const T* ai = a + static_cast<std::int64_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + static_cast<std::int64_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C = A[m,k] * B[k,n]
template <typename T>
void gemm(const T* a, const T* b, T* c, int m, int k, int n) {
  std::fill(c, c + static_cast<std::int64_t>(m) * n, T(0));
  gemm_acc(a, b, c, m, k, n);
}

// C += A[m,k] * B[n,k]^T. The dot product runs over fixed lanes so the
// compiler can vectorize without reassociating a single serial chain; the
// summation order is a function of k alone.
template <typename T>
void gemm_acc_nt(const T* XATTN_RESTRICT a, const T* XATTN_RESTRICT b, T* XATTN_RESTRICT c,
                 int m, int k, int n) {
  constexpr int kLanes = 16;
  const int k_main = k - k % kLanes;
  for (int i = 0; i < m; ++i) {
    const T* ai = a + static_cast<std::int64_t>(i) * k;
    T* ci = c + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* bj = b + static_cast<std::int64_t>(j) * k;
      T acc[kLanes] = {};
      for (int p = 0; p < k_main; p += kLanes)
        for (int l = 0; l < kLanes; ++l) acc[l] += ai[p + l] * bj[p + l];
      T tail = 0;
      for (int p = k_main; p < k; ++p) tail += ai[p] * bj[p];
      T s = tail;
      for (int l = 0; l < kLanes; ++l) s += acc[l];
      ci[j] += s;
    }
  }
}

// C = A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int m, int k, int n) {
  std::fill(c, c + static_cast<std::int64_t>(m) * n, T(0));
  gemm_acc_nt(a, b, c, m, k, n);
}

// C += A[k,m]^T * B[k,n]
template <typename T>
void gemm_acc_tn(const T* XATTN_RESTRICT a, const T* XATTN_RESTRICT b, T* XATTN_RESTRICT c,
                 int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const T* ap = a + static_cast<std::int64_t>(p) * m;
    const T* bp = b + static_cast<std::int64_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = ap[i];
      T* ci = c + static_cast<std::int64_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <typename T>
Tensor<T> make_op(Shape shape, std::vector<std::shared_ptr<TensorNode<T>>> parents,
                  std::function<void(TensorNode<T>&)> backward) {
  auto n = std::make_shared<TensorNode<T>>();
  const auto count = numel_of(shape);
  n->shape = std::move(shape);
  n->data.resize(static_cast<size_t>(count));
  bool rg = false;
  if (GradMode::enabled())
    for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->grad.assign(static_cast<size_t>(count), T(0));
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

inline std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<size_t>(i)] = acc;
    acc *= s[static_cast<size_t>(i)];
  }
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto an = a.node(), bn = b.node();
  auto out = detail::make_op<T>(
      {m, n}, {an, bn}, [an, bn, m, k, n](TensorNode<T>& self) {
        if (an->requires_grad)
          detail::gemm_acc_nt(self.grad.data(), bn->data.data(), an->grad.data(), m, n, k);
        if (bn->requires_grad)
          detail::gemm_acc_tn(an->data.data(), self.grad.data(), bn->grad.data(), k, m, n);
      });
  detail::gemm(an->data.data(), bn->data.data(), out.data().data(), m, k, n);
  return out;
}

// Batched matmul over leading dim: a[B,m,k] x b[B,k,n] (or b[B,n,k] when
// trans_b), one GEMM per batch entry.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0))
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int B = a.dim(0), m = a.dim(1), k = a.dim(2);
  const int n = trans_b ? b.dim(1) : b.dim(2);
  if ((trans_b ? b.dim(2) : b.dim(1)) != k)
    throw ShapeError("bmm: inner dims disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  auto an = a.node(), bn = b.node();
  auto out = detail::make_op<T>(
      {B, m, n}, {an, bn}, [an, bn, B, m, k, n, trans_b](TensorNode<T>& self) {
        for (int i = 0; i < B; ++i) {
          const T* A = an->data.data() + static_cast<std::int64_t>(i) * m * k;
          const T* Bm = bn->data.data() + static_cast<std::int64_t>(i) * k * n;
          const T* dC = self.grad.data() + static_cast<std::int64_t>(i) * m * n;
          if (!trans_b) {
            if (an->requires_grad)
              detail::gemm_acc_nt(dC, Bm, an->grad.data() + static_cast<std::int64_t>(i) * m * k,
                                  m, n, k);
            if (bn->requires_grad)
              detail::gemm_acc_tn(A, dC, bn->grad.data() + static_cast<std::int64_t>(i) * k * n,
                                  k, m, n);
          } else {
            // C = A * B^T with B[n,k]: dA += dC*B ; dB += dC^T*A
            if (an->requires_grad)
              detail::gemm_acc(dC, Bm, an->grad.data() + static_cast<std::int64_t>(i) * m * k, m,
                               n, k);
            if (bn->requires_grad)
              detail::gemm_acc_tn(dC, A, bn->grad.data() + static_cast<std::int64_t>(i) * n * k,
                                  n, m, k);
          }
        }
      });
  for (int i = 0; i < B; ++i) {
    const T* A = an->data.data() + static_cast<std::int64_t>(i) * m * k;
    const T* Bm = bn->data.data() + static_cast<std::int64_t>(i) * k * n;
    T* C = out.data().data() + static_cast<std::int64_t>(i) * m * n;
    if (trans_b)
      detail::gemm_nt(A, Bm, C, m, k, n);
    else
      detail::gemm(A, Bm, C, m, k, n);
  }
  return out;
}

// x[..., k] * w[k, n] -> [..., n]; leading dims are flattened into rows.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
  if (x.ndim() < 1 || w.ndim() != 2 || x.dim(x.ndim() - 1) != w.dim(0))
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                     shape_str(w.shape()));
  const int k = w.dim(0), n = w.dim(1);
  const int rows = static_cast<int>(x.numel() / k);
  Shape out_shape = x.shape();
  out_shape.back() = n;
  auto xn = x.node(), wn = w.node();
  auto out = detail::make_op<T>(
      std::move(out_shape), {xn, wn}, [xn, wn, rows, k, n](TensorNode<T>& self) {
        if (xn->requires_grad)
          detail::gemm_acc_nt(self.grad.data(), wn->data.data(), xn->grad.data(), rows, n, k);
        if (wn->requires_grad)
          detail::gemm_acc_tn(xn->data.data(), self.grad.data(), wn->grad.data(), k, rows, n);
      });
  detail::gemm(xn->data.data(), wn->data.data(), out.data().data(), rows, k, n);
  return out;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.ndim() != 1 || x.dim(x.ndim() - 1) != b.dim(0))
    throw ShapeError("add_bias: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const int n = b.dim(0);
  const std::int64_t rows = x.numel() / n;
  auto xn = x.node(), bn = b.node();
  auto out = detail::make_op<T>(
      x.shape(), {xn, bn}, [xn, bn, rows, n](TensorNode<T>& self) {
        if (xn->requires_grad)
          for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
        if (bn->requires_grad)
          for (std::int64_t r = 0; r < rows; ++r)
            for (int j = 0; j < n; ++j) bn->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(r * n + j)];
      });
  for (std::int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < n; ++j)
      out.data()[static_cast<size_t>(r * n + j)] =
          xn->data[static_cast<size_t>(r * n + j)] + bn->data[static_cast<size_t>(j)];
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  auto an = a.node(), bn = b.node();
  auto out = detail::make_op<T>(a.shape(), {an, bn}, [an, bn](TensorNode<T>& self) {
    if (an->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    if (bn->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
  });
  for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = an->data[i] + bn->data[i];
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, double c) {
  auto xn = x.node();
  const T cv = static_cast<T>(c);
  auto out = detail::make_op<T>(x.shape(), {xn}, [xn, cv](TensorNode<T>& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * cv;
  });
  for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = xn->data[i] * cv;
  return out;
}

// Multiply by a learnable scalar (shape [1]) parameter.
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: scalar expected, got " + shape_str(s.shape()));
  auto xn = x.node(), sn = s.node();
  auto out = detail::make_op<T>(x.shape(), {xn, sn}, [xn, sn](TensorNode<T>& self) {
    const T sv = sn->data[0];
    if (xn->requires_grad)
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * sv;
    if (sn->requires_grad) {
      T acc = 0;
      for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xn->data[i];
      sn->grad[0] += acc;
    }
  });
  const T sv = sn->data[0];
  for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = xn->data[i] * sv;
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  auto xn = x.node();
  auto out = detail::make_op<T>(x.shape(), {xn}, [xn](TensorNode<T>& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (xn->data[i] > T(0)) xn->grad[i] += self.grad[i];
  });
  for (size_t i = 0; i < out.data().size(); ++i)
    out.data()[i] = xn->data[i] > T(0) ? xn->data[i] : T(0);
  return out;
}

// tanh-approximation GELU; the forward tanh values are kept for backward.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  auto xn = x.node();
  const bool needs_grad = GradMode::enabled() && xn->requires_grad;
  auto tanh_cache = needs_grad ? std::make_shared<std::vector<T>>(x.data().size())
                               : std::shared_ptr<std::vector<T>>();
  auto out = detail::make_op<T>(x.shape(), {xn}, [xn, tanh_cache](TensorNode<T>& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double v = static_cast<double>(xn->data[i]);
      const double th = static_cast<double>((*tanh_cache)[i]);
      const double sech2 = 1.0 - th * th;
      const double d = 0.5 * (1.0 + th) + 0.5 * v * sech2 * kC * (1.0 + 3.0 * kA * v * v);
      xn->grad[i] += self.grad[i] * static_cast<T>(d);
    }
  });
  for (size_t i = 0; i < out.data().size(); ++i) {
    const double v = static_cast<double>(xn->data[i]);
    const double th = std::tanh(kC * (v + kA * v * v * v));
    if (needs_grad) (*tanh_cache)[i] = static_cast<T>(th);
    out.data()[i] = static_cast<T>(0.5 * v * (1.0 + th));
  }
  return out;
}

// Normalizes the last axis to zero mean / unit variance, then applies the
// elementwise affine (gain, bias).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps = 1e-5) {
  const int n = x.dim(x.ndim() - 1);
  if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != n || bias.dim(0) != n)
    throw ShapeError("layer_norm: affine shape mismatch with " + shape_str(x.shape()));
  if (eps <= 0) throw ParamError("layer_norm: eps must be positive");
  const std::int64_t rows = x.numel() / n;
  auto xn = x.node(), gn = gain.node(), bn = bias.node();

  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(rows * n));
  auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));

  auto out = detail::make_op<T>(
      x.shape(), {xn, gn, bn}, [xn, gn, bn, xhat, invstd, rows, n](TensorNode<T>& self) {
        for (std::int64_t r = 0; r < rows; ++r) {
          const size_t off = static_cast<size_t>(r * n);
          const T istd = (*invstd)[static_cast<size_t>(r)];
          T mean_dy = 0, mean_dyxh = 0;
          for (int j = 0; j < n; ++j) {
            const T dy = self.grad[off + static_cast<size_t>(j)] * gn->data[static_cast<size_t>(j)];
            mean_dy += dy;
            mean_dyxh += dy * (*xhat)[off + static_cast<size_t>(j)];
          }
          mean_dy /= static_cast<T>(n);
          mean_dyxh /= static_cast<T>(n);
          for (int j = 0; j < n; ++j) {
            const size_t i = off + static_cast<size_t>(j);
            const T dy = self.grad[i] * gn->data[static_cast<size_t>(j)];
            if (xn->requires_grad)
              xn->grad[i] += istd * (dy - mean_dy - (*xhat)[i] * mean_dyxh);
            if (gn->requires_grad)
              gn->grad[static_cast<size_t>(j)] += self.grad[i] * (*xhat)[i];
            if (bn->requires_grad) bn->grad[static_cast<size_t>(j)] += self.grad[i];
          }
        }
      });

  for (std::int64_t r = 0; r < rows; ++r) {
    const size_t off = static_cast<size_t>(r * n);
    T mean = 0;
    for (int j = 0; j < n; ++j) mean += xn->data[off + static_cast<size_t>(j)];
    mean /= static_cast<T>(n);
    T var = 0;
    for (int j = 0; j < n; ++j) {
      const T d = xn->data[off + static_cast<size_t>(j)] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T istd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + eps));
    (*invstd)[static_cast<size_t>(r)] = istd;
    for (int j = 0; j < n; ++j) {
      const size_t i = off + static_cast<size_t>(j);
      const T xh = (xn->data[i] - mean) * istd;
      (*xhat)[i] = xh;
      out.data()[i] = gn->data[static_cast<size_t>(j)] * xh + bn->data[static_cast<size_t>(j)];
    }
  }
  return out;
}

// Inverted dropout; eval mode and p == 0 return the input tensor unchanged.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ParamError("dropout: p must be in [0,1), got " + std::to_string(p));
  if (mode == Mode::kEval || p == 0.0) return x;
  auto xn = x.node();
  auto mask = std::make_shared<std::vector<std::uint8_t>>(x.data().size());
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  for (size_t i = 0; i < mask->size(); ++i) (*mask)[i] = rng.uniform() < p ? 0 : 1;
  auto out = detail::make_op<T>(x.shape(), {xn}, [xn, mask, scale](TensorNode<T>& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      if ((*mask)[i]) xn->grad[i] += self.grad[i] * scale;
  });
  for (size_t i = 0; i < out.data().size(); ++i)
    out.data()[i] = (*mask)[i] ? xn->data[i] * scale : T(0);
  return out;
}

// Numerically stabilized softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (axis < 0) axis += x.ndim();
  if (axis < 0 || axis >= x.ndim())
    throw ShapeError("softmax: bad axis for shape " + shape_str(x.shape()));
  const int n = x.dim(axis);
  std::int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  auto xn = x.node();

  auto out = detail::make_op<T>(
      x.shape(), {xn}, [xn, n, inner, outer](TensorNode<T>& self) {
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            T dot = 0;
            for (int j = 0; j < n; ++j) {
              const size_t i = static_cast<size_t>(base + j * inner);
              dot += self.grad[i] * self.data[i];
            }
            for (int j = 0; j < n; ++j) {
              const size_t i = static_cast<size_t>(base + j * inner);
              xn->grad[i] += self.data[i] * (self.grad[i] - dot);
            }
          }
      });

  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      T mx = xn->data[static_cast<size_t>(base)];
      for (int j = 1; j < n; ++j)
        mx = std::max(mx, xn->data[static_cast<size_t>(base + j * inner)]);
      T sum = 0;
      for (int j = 0; j < n; ++j) {
        const size_t i = static_cast<size_t>(base + j * inner);
        const T e = static_cast<T>(std::exp(static_cast<double>(xn->data[i] - mx)));
        out.data()[i] = e;
        sum += e;
      }
      for (int j = 0; j < n; ++j) out.data()[static_cast<size_t>(base + j * inner)] /= sum;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto xn = x.node();
  auto out = detail::make_op<T>(std::move(shape), {xn}, [xn](TensorNode<T>& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
  out.data() = xn->data;
  return out;
}

namespace detail {

// dst[i] = src[src_index(i)] walked with an odometer over the output shape,
// so no per-element division is needed.
template <typename T, bool kAccumulateToSrc>
void permute_copy(const Shape& out_shape, const std::vector<std::int64_t>& src_strides,
                  const T* src, T* dst) {
  const int nd = static_cast<int>(out_shape.size());
  std::vector<std::int64_t> idx(static_cast<size_t>(nd), 0);
  std::int64_t src_off = 0;
  const std::int64_t total = numel_of(out_shape);
  for (std::int64_t i = 0; i < total; ++i) {
    if constexpr (kAccumulateToSrc)
      dst[src_off] += src[i];
    else
      dst[i] = src[src_off];
    for (int d = nd - 1; d >= 0; --d) {
      src_off += src_strides[static_cast<size_t>(d)];
      if (++idx[static_cast<size_t>(d)] < out_shape[static_cast<size_t>(d)]) break;
      src_off -= src_strides[static_cast<size_t>(d)] * out_shape[static_cast<size_t>(d)];
      idx[static_cast<size_t>(d)] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  if (static_cast<int>(perm.size()) != x.ndim())
    throw ShapeError("permute: rank mismatch for " + shape_str(x.shape()));
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = x.dim(perm[i]);
  const auto in_strides = detail::row_major_strides(x.shape());
  // stride in the input for each output axis
  std::vector<std::int64_t> map(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) map[i] = in_strides[static_cast<size_t>(perm[i])];

  auto xn = x.node();
  auto out = detail::make_op<T>(out_shape, {xn}, [xn, out_shape, map](TensorNode<T>& self) {
    detail::permute_copy<T, true>(out_shape, map, self.grad.data(), xn->grad.data());
  });
  detail::permute_copy<T, false>(out_shape, map, xn->data.data(), out.data().data());
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis < 0) axis += parts[0].ndim();
  const int nd = parts[0].ndim();
  if (axis < 0 || axis >= nd) throw ShapeError("concat: bad axis");
  Shape out_shape = parts[0].shape();
  int axis_total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < nd; ++d)
      if (d != axis && p.dim(d) != out_shape[static_cast<size_t>(d)])
        throw ShapeError("concat: non-axis dims disagree: " + shape_str(out_shape) + " vs " +
                         shape_str(p.shape()));
    axis_total += p.dim(axis);
  }
  out_shape[static_cast<size_t>(axis)] = axis_total;

  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
  for (int d = axis + 1; d < nd; ++d) inner *= out_shape[static_cast<size_t>(d)];

  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::vector<int> widths;
  for (const auto& p : parts) {
    parents.push_back(p.node());
    widths.push_back(p.dim(axis));
  }

  auto out = detail::make_op<T>(
      out_shape, parents,
      [parents, widths, outer, inner, axis_total](TensorNode<T>& self) {
        std::int64_t offset = 0;
        for (size_t pi = 0; pi < parents.size(); ++pi) {
          auto& p = parents[pi];
          const std::int64_t w = widths[pi] * inner;
          if (p->requires_grad)
            for (std::int64_t o = 0; o < outer; ++o) {
              const T* src = self.grad.data() + o * axis_total * inner + offset;
              T* dst = p->grad.data() + o * w;
              for (std::int64_t i = 0; i < w; ++i) dst[i] += src[i];
            }
          offset += w;
        }
      });

  std::int64_t offset = 0;
  for (size_t pi = 0; pi < parents.size(); ++pi) {
    auto& p = parents[pi];
    const std::int64_t w = widths[pi] * inner;
    for (std::int64_t o = 0; o < outer; ++o) {
      const T* src = p->data.data() + o * w;
      T* dst = out.data().data() + o * axis_total * inner + offset;
      std::copy(src, src + w, dst);
    }
    offset += w;
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, int start, int len) {
  if (axis < 0) axis += x.ndim();
  if (axis < 0 || axis >= x.ndim() || start < 0 || len <= 0 || start + len > x.dim(axis))
    throw ShapeError("slice: bad range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") on axis " + std::to_string(axis) + " of " +
                     shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.ndim(); ++d) inner *= x.dim(d);
  const std::int64_t in_w = static_cast<std::int64_t>(x.dim(axis)) * inner;
  const std::int64_t out_w = static_cast<std::int64_t>(len) * inner;
  const std::int64_t off = static_cast<std::int64_t>(start) * inner;

  auto xn = x.node();
  auto out = detail::make_op<T>(out_shape, {xn}, [xn, outer, in_w, out_w, off](TensorNode<T>& self) {
    for (std::int64_t o = 0; o < outer; ++o) {
      T* dst = xn->grad.data() + o * in_w + off;
      const T* src = self.grad.data() + o * out_w;
      for (std::int64_t i = 0; i < out_w; ++i) dst[i] += src[i];
    }
  });
  for (std::int64_t o = 0; o < outer; ++o) {
    const T* src = xn->data.data() + o * in_w + off;
    std::copy(src, src + out_w, out.data().data() + o * out_w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  auto xn = x.node();
  const std::int64_t n = x.numel();
  auto out = detail::make_op<T>({1}, {xn}, [xn, n](TensorNode<T>& self) {
    const T g = self.grad[0] / static_cast<T>(n);
    for (auto& v : xn->grad) v += g;
  });
  T acc = 0;
  for (const auto& v : xn->data) acc += v;
  out.data()[0] = acc / static_cast<T>(n);
  return out;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis) {
  if (axis < 0) axis += x.ndim();
  if (axis < 0 || axis >= x.ndim())
    throw ShapeError("mean_axis: bad axis for " + shape_str(x.shape()));
  const int n = x.dim(axis);
  Shape out_shape;
  for (int d = 0; d < x.ndim(); ++d)
    if (d != axis) out_shape.push_back(x.dim(d));
  if (out_shape.empty()) out_shape.push_back(1);
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.ndim(); ++d) inner *= x.dim(d);

  auto xn = x.node();
  auto out = detail::make_op<T>(out_shape, {xn}, [xn, outer, inner, n](TensorNode<T>& self) {
    for (std::int64_t o = 0; o < outer; ++o)
      for (int j = 0; j < n; ++j)
        for (std::int64_t i = 0; i < inner; ++i)
          xn->grad[static_cast<size_t>((o * n + j) * inner + i)] +=
              self.grad[static_cast<size_t>(o * inner + i)] / static_cast<T>(n);
  });
  std::fill(out.data().begin(), out.data().end(), T(0));
  for (std::int64_t o = 0; o < outer; ++o)
    for (int j = 0; j < n; ++j)
      for (std::int64_t i = 0; i < inner; ++i)
        out.data()[static_cast<size_t>(o * inner + i)] +=
            xn->data[static_cast<size_t>((o * n + j) * inner + i)] / static_cast<T>(n);
  return out;
}

template <typename T>
Tensor<T> abs_sum(const Tensor<T>& x) {
  auto xn = x.node();
  auto out = detail::make_op<T>({1}, {xn}, [xn](TensorNode<T>& self) {
    const T g = self.grad[0];
    for (size_t i = 0; i < xn->data.size(); ++i) {
      const T v = xn->data[i];
      if (v > T(0))
        xn->grad[i] += g;
      else if (v < T(0))
        xn->grad[i] -= g;
    }
  });
  T acc = 0;
  for (const auto& v : xn->data) acc += v >= T(0) ? v : -v;
  out.data()[0] = acc;
  return out;
}

// ---------------------------------------------------------------------------
// Convolution (valid padding) and grid pooling
// ---------------------------------------------------------------------------

namespace detail {

// Shared column matrix for the whole batch: col[ck, b*map], sample i owning
// the column block [i*map, (i+1)*map). One GEMM then serves all samples while
// each output element keeps a row-count-independent accumulation order.
template <typename T>
void im2col(const T* x, int ci, int h, int w, int kh, int kw, int stride, int oh, int ow,
            T* col, std::int64_t row_stride) {
  for (int c = 0; c < ci; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        T* dst = col + ((static_cast<std::int64_t>(c) * kh + ky) * kw + kx) * row_stride;
        for (int oy = 0; oy < oh; ++oy) {
          const T* src = x + (static_cast<std::int64_t>(c) * h + (oy * stride + ky)) * w + kx;
          for (int ox = 0; ox < ow; ++ox) dst[oy * ow + ox] = src[ox * stride];
        }
      }
}

template <typename T>
void col2im_acc(const T* col, int ci, int h, int w, int kh, int kw, int stride, int oh, int ow,
                T* x, std::int64_t row_stride) {
  for (int c = 0; c < ci; ++c)
    for (int ky = 0; ky < kh; ++ky)
      for (int kx = 0; kx < kw; ++kx) {
        const T* src = col + ((static_cast<std::int64_t>(c) * kh + ky) * kw + kx) * row_stride;
        for (int oy = 0; oy < oh; ++oy) {
          T* dst = x + (static_cast<std::int64_t>(c) * h + (oy * stride + ky)) * w + kx;
          for (int ox = 0; ox < ow; ++ox) dst[ox * stride] += src[oy * ow + ox];
        }
      }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride) {
  if (x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(1))
    throw ShapeError("conv2d: incompatible shapes " + shape_str(x.shape()) + " * " +
                     shape_str(w.shape()));
  const int b = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (bias.ndim() != 1 || bias.dim(0) != co)
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()));
  if (h < kh || wd < kw || stride < 1)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) + " does not fit input " +
                     shape_str(x.shape()));
  const int oh = (h - kh) / stride + 1;
  const int ow = (wd - kw) / stride + 1;
  const int ck = ci * kh * kw;
  const std::int64_t map = static_cast<std::int64_t>(oh) * ow;
  const std::int64_t cols_w = static_cast<std::int64_t>(b) * map;  // col row stride

  auto xn = x.node(), wn = w.node(), bn = bias.node();
  auto cols = std::make_shared<std::vector<T>>(static_cast<size_t>(ck) * cols_w);
  for (int i = 0; i < b; ++i)
    detail::im2col(xn->data.data() + static_cast<std::int64_t>(i) * ci * h * wd, ci, h, wd, kh,
                   kw, stride, oh, ow, cols->data() + static_cast<std::int64_t>(i) * map, cols_w);

  auto out = detail::make_op<T>(
      {b, co, oh, ow}, {xn, wn, bn},
      [xn, wn, bn, cols, b, ci, h, wd, co, kh, kw, stride, oh, ow, ck, map,
       cols_w](TensorNode<T>& self) {
        // regroup dOut [b,co,map] -> [co, b*map]
        std::vector<T> dout_mat(static_cast<size_t>(co) * cols_w);
        for (int i = 0; i < b; ++i)
          for (int c = 0; c < co; ++c)
            std::copy(self.grad.data() + (static_cast<std::int64_t>(i) * co + c) * map,
                      self.grad.data() + (static_cast<std::int64_t>(i) * co + c + 1) * map,
                      dout_mat.data() + c * cols_w + static_cast<std::int64_t>(i) * map);
        if (wn->requires_grad)
          detail::gemm_acc_nt(dout_mat.data(), cols->data(), wn->grad.data(), co,
                              static_cast<int>(cols_w), ck);
        if (bn->requires_grad)
          for (int c = 0; c < co; ++c) {
            T acc = 0;
            const T* row = dout_mat.data() + c * cols_w;
            for (std::int64_t j = 0; j < cols_w; ++j) acc += row[j];
            bn->grad[static_cast<size_t>(c)] += acc;
          }
        if (xn->requires_grad) {
          std::vector<T> dcol(static_cast<size_t>(ck) * cols_w, T(0));
          detail::gemm_acc_tn(wn->data.data(), dout_mat.data(), dcol.data(), ck, co,
                              static_cast<int>(cols_w));
          for (int i = 0; i < b; ++i)
            detail::col2im_acc(dcol.data() + static_cast<std::int64_t>(i) * map, ci, h, wd, kh,
                               kw, stride, oh, ow,
                               xn->grad.data() + static_cast<std::int64_t>(i) * ci * h * wd,
                               cols_w);
        }
      });

  // out_mat [co, b*map] = W . col, then scatter back to [b, co, map] + bias
  std::vector<T> out_mat(static_cast<size_t>(co) * cols_w);
  detail::gemm(wn->data.data(), cols->data(), out_mat.data(), co, ck, static_cast<int>(cols_w));
  for (int i = 0; i < b; ++i)
    for (int c = 0; c < co; ++c) {
      const T bv = bn->data[static_cast<size_t>(c)];
      const T* src = out_mat.data() + c * cols_w + static_cast<std::int64_t>(i) * map;
      T* dst = out.data().data() + (static_cast<std::int64_t>(i) * co + c) * map;
      for (std::int64_t j = 0; j < map; ++j) dst[j] = src[j] + bv;
    }
  if (!out.requires_grad()) cols->clear();
  return out;
}

// Average-pools the spatial map into a gh x gw grid of tokens: [b,c,h,w] ->
// [b, gh*gw, c]. Region boundaries split h and w as evenly as possible.
template <typename T>
Tensor<T> grid_pool(const Tensor<T>& x, int gh, int gw) {
  if (x.ndim() != 4) throw ShapeError("grid_pool: expected 4-d input, got " + shape_str(x.shape()));
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gh < 1 || gw < 1 || gh > h || gw > w)
    throw ShapeError("grid_pool: grid " + std::to_string(gh) + "x" + std::to_string(gw) +
                     " does not fit " + shape_str(x.shape()));
  auto bound = [](int size, int parts, int i) { return (size * i) / parts; };
  auto xn = x.node();
  auto out = detail::make_op<T>(
      {b, gh * gw, c}, {xn}, [xn, b, c, h, w, gh, gw, bound](TensorNode<T>& self) {
        for (int i = 0; i < b; ++i)
          for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
              const int y0 = bound(h, gh, gy), y1 = bound(h, gh, gy + 1);
              const int x0 = bound(w, gw, gx), x1 = bound(w, gw, gx + 1);
              const T inv = static_cast<T>(1.0 / ((y1 - y0) * (x1 - x0)));
              for (int ch = 0; ch < c; ++ch) {
                const T g =
                    self.grad[static_cast<size_t>((static_cast<std::int64_t>(i) * gh * gw +
                                                   gy * gw + gx) * c + ch)] * inv;
                for (int y = y0; y < y1; ++y)
                  for (int xx = x0; xx < x1; ++xx)
                    xn->grad[static_cast<size_t>(((static_cast<std::int64_t>(i) * c + ch) * h + y) * w + xx)] += g;
              }
            }
      });
  for (int i = 0; i < b; ++i)
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        const int y0 = bound(h, gh, gy), y1 = bound(h, gh, gy + 1);
        const int x0 = bound(w, gw, gx), x1 = bound(w, gw, gx + 1);
        const T inv = static_cast<T>(1.0 / ((y1 - y0) * (x1 - x0)));
        for (int ch = 0; ch < c; ++ch) {
          T acc = 0;
          for (int y = y0; y < y1; ++y)
            for (int xx = x0; xx < x1; ++xx)
              acc += xn->data[static_cast<size_t>(((static_cast<std::int64_t>(i) * c + ch) * h + y) * w + xx)];
          out.data()[static_cast<size_t>((static_cast<std::int64_t>(i) * gh * gw + gy * gw + gx) * c + ch)] =
              acc * inv;
        }
      }
  return out;
}

}  // namespace xattn
