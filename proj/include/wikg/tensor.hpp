#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "wikg/common.hpp"

namespace wikg {

template <typename T>
class Tape;

namespace detail {

// 64-byte aligned buffers keep Eigen's vectorized kernels on the same code
// path for every allocation, which makes runs bit-reproducible.
template <typename T>
struct AlignedDeleter {
  void operator()(T* p) const noexcept { ::operator delete[](p, std::align_val_t{64}); }
};

template <typename T>
using AlignedBuf = std::unique_ptr<T[], AlignedDeleter<T>>;

template <typename T>
AlignedBuf<T> aligned_alloc_n(std::size_t n) {
  return AlignedBuf<T>(static_cast<T*>(::operator new[](n * sizeof(T), std::align_val_t{64})));
}

}  // namespace detail

/// Dense row-major tensor (1 to 3 dims). A Tensor is a cheap shared handle;
/// values are written once by the producing op and, for leaves and
/// parameters, via set_values()/mutable_values() between steps. Gradients
/// live in a lazily allocated same-shape buffer filled by Tape::backward.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill_n(t.n_->value.get(), t.n_->numel, T(0));
    return t;
  }

  /// Uninitialized storage for op kernels that overwrite every element.
  static Tensor empty(std::vector<std::size_t> shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor from(std::vector<std::size_t> shape, std::vector<T> values,
                     bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    if (values.size() != t.n_->numel)
      throw shape_error("value count " + std::to_string(values.size()) +
                        " does not match shape product " + std::to_string(t.n_->numel));
    std::copy(values.begin(), values.end(), t.n_->value.get());
    return t;
  }

  /// 1xN row vector.
  static Tensor row(std::vector<T> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return from({1, n}, std::move(values), requires_grad);
  }

  static Tensor scalar(T v) { return from({1, 1}, {v}); }

  static Tensor full(std::vector<std::size_t> shape, T v) {
    Tensor t(std::move(shape), false);
    std::fill_n(t.n_->value.get(), t.n_->numel, v);
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<std::size_t>& shape() const { return n_->shape; }
  std::size_t ndim() const { return n_->shape.size(); }
  std::size_t size() const { return n_->numel; }

  std::size_t rows() const { return n_->shape[0]; }
  std::size_t cols() const { return n_->shape.size() > 1 ? n_->shape[1] : 1; }

  std::span<const T> values() const { return {n_->value.get(), n_->numel}; }
  std::span<T> mutable_values() { return {n_->value.get(), n_->numel}; }
  void set_values(std::span<const T> v) {
    if (v.size() != n_->numel) throw shape_error("set_values: size mismatch");
    std::copy(v.begin(), v.end(), n_->value.get());
  }

  T at(std::size_t i, std::size_t j) const { return n_->value[i * cols() + j]; }
  T at(std::size_t i, std::size_t j, std::size_t k) const {
    return n_->value[(i * n_->shape[1] + j) * n_->shape[2] + k];
  }

  /// Value of a 1x1 tensor.
  T item() const {
    if (size() != 1) throw shape_error("item: tensor is not scalar");
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool rg) { n_->requires_grad = rg; }

  bool has_grad() const { return static_cast<bool>(n_->grad); }
  void ensure_grad() {
    if (!n_->grad) {
      n_->grad = detail::aligned_alloc_n<T>(n_->numel);
      std::fill_n(n_->grad.get(), n_->numel, T(0));
    }
  }
  std::span<const T> grad() const {
    return n_->grad ? std::span<const T>{n_->grad.get(), n_->numel} : std::span<const T>{};
  }
  std::span<T> grad_span() { return n_->grad ? std::span<T>{n_->grad.get(), n_->numel} : std::span<T>{}; }
  void add_grad(std::size_t i, T v) { n_->grad[i] += v; }
  void zero_grad() {
    if (n_->grad) std::fill_n(n_->grad.get(), n_->numel, T(0));
  }

  bool same_node(const Tensor& o) const { return n_ == o.n_; }

 private:
  struct Node {
    std::vector<std::size_t> shape;
    std::size_t numel = 0;
    detail::AlignedBuf<T> value;
    detail::AlignedBuf<T> grad;  // lazy, zero-initialized on first use
    bool requires_grad = false;
  };

  Tensor(std::vector<std::size_t> shape, bool requires_grad) {
    if (shape.empty() || shape.size() > 3) {
      throw shape_error("tensor rank must be 1..3, got " + std::to_string(shape.size()));
    }
    std::size_t numel = 1;
    for (auto d : shape) {
      if (d == 0) throw shape_error("zero-sized dimension");
      numel *= d;
    }
    n_ = std::make_shared<Node>();
    n_->shape = std::move(shape);
    n_->numel = numel;
    n_->value = detail::aligned_alloc_n<T>(numel);
    n_->requires_grad = requires_grad;
  }

  std::shared_ptr<Node> n_;
};

/// Reverse-mode tape. Constructing a Tape makes it the active recorder for
/// the current thread (RAII; the previous one is restored on destruction).
/// Ops append their backward rule in forward order, so the list is
/// topologically sorted and backward() is a single reverse sweep that visits
/// each recorded node exactly once. A tape is single-threaded; independent
/// tapes on different threads do not share state.
template <typename T>
class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  /// Temporarily disables recording (eval mode, finite-difference loops).
  struct NoGrad {
    NoGrad() : saved(active_) { active_ = nullptr; }
    ~NoGrad() { active_ = saved; }
    Tape* saved;
  };

  void record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return ops_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays recorded ops in reverse.
  /// Gradients accumulate, so shared operands receive the sum of all paths.
  void backward(Tensor<T> loss) {
    if (loss.size() != 1) throw shape_error("backward: root must be scalar");
    if (replayed_) throw error("backward: tape already replayed");
    replayed_ = true;
    loss.ensure_grad();
    loss.add_grad(0, T(1));
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> ops_;
  Tape* prev_ = nullptr;
  bool replayed_ = false;
  inline static thread_local Tape* active_ = nullptr;
};

namespace detail {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EArr = Eigen::Array<T, Eigen::Dynamic, 1>;

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
void require_2d(const Tensor<T>& x, const char* op) {
  if (x.ndim() != 2) throw shape_error(std::string(op) + ": expected a 2-d tensor");
}

// Resolves broadcast of b onto a's 2-d shape: equal, 1xN (per column),
// Mx1 (per row) or 1x1 (scalar).
template <typename T>
void require_broadcastable(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require_2d(a, op);
  require_2d(b, op);
  const bool ok = (b.rows() == a.rows() || b.rows() == 1) &&
                  (b.cols() == a.cols() || b.cols() == 1);
  if (!ok) {
    throw shape_error(std::string(op) + ": cannot broadcast " + std::to_string(b.rows()) +
                      "x" + std::to_string(b.cols()) + " onto " + std::to_string(a.rows()) +
                      "x" + std::to_string(a.cols()));
  }
}

template <typename T, typename Fwd, typename DfA, typename DfB>
Tensor<T> broadcast_binary(const Tensor<T>& a, const Tensor<T>& b, const char* name,
                           Fwd fwd, DfA df_a, DfB df_b) {
  require_broadcastable(a, b, name);
  const std::size_t m = a.rows(), n = a.cols();
  const std::size_t bi_stride = (b.rows() == 1) ? 0 : b.cols();
  const std::size_t bj_stride = (b.cols() == 1) ? 0 : 1;

  auto out = Tensor<T>::empty({m, n});
  T* ov = out.mutable_values().data();
  const T* av = a.values().data();
  const T* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* brow = bv + i * bi_stride;
    for (std::size_t j = 0; j < n; ++j) {
      ov[i * n + j] = fwd(av[i * n + j], brow[j * bj_stride]);
    }
  }

  if (recording<T>({&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record([ac, bc, oc, m, n, bi_stride, bj_stride, df_a, df_b]() mutable {
      if (!oc.has_grad()) return;
      const T* g = oc.grad().data();
      const T* av2 = ac.values().data();
      const T* bv2 = bc.values().data();
      if (ac.requires_grad()) {
        ac.ensure_grad();
        T* ga = ac.grad_span().data();
        for (std::size_t i = 0; i < m; ++i) {
          const T* brow = bv2 + i * bi_stride;
          for (std::size_t j = 0; j < n; ++j)
            ga[i * n + j] += g[i * n + j] * df_a(av2[i * n + j], brow[j * bj_stride]);
        }
      }
      if (bc.requires_grad()) {
        bc.ensure_grad();
        T* gb = bc.grad_span().data();
        for (std::size_t i = 0; i < m; ++i) {
          const T* brow = bv2 + i * bi_stride;
          T* gbrow = gb + i * bi_stride;
          for (std::size_t j = 0; j < n; ++j)
            gbrow[j * bj_stride] += g[i * n + j] * df_b(av2[i * n + j], brow[j * bj_stride]);
        }
      }
    });
  }
  return out;
}

template <typename T, typename Fwd, typename Df>
Tensor<T> unary_elementwise(const Tensor<T>& x, const char* /*name*/, Fwd fwd, Df df) {
  auto out = Tensor<T>::empty(x.shape());
  T* ov = out.mutable_values().data();
  const T* xv = x.values().data();
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) ov[i] = fwd(xv[i]);

  if (recording<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record([xc, oc, n, df]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      const T* xv2 = xc.values().data();
      const T* yv = oc.values().data();
      T* gx = xc.grad_span().data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * df(xv2[i], yv[i]);
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / broadcast ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> subtract(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary(
      a, b, "subtract", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

/// Elementwise product; b may be 1xN, Mx1 or 1x1 (broadcast).
template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::broadcast_binary(
      a, b, "hadamard", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& x, T c) {
  return detail::unary_elementwise(
      x, "scalar_mul", [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x) {
  auto out = Tensor<T>::empty(x.shape());
  {
    Eigen::Map<const detail::EArr<T>> in(x.values().data(), static_cast<Eigen::Index>(x.size()));
    Eigen::Map<detail::EArr<T>> ov(out.mutable_values().data(),
                                   static_cast<Eigen::Index>(x.size()));
    ov = in.tanh();
  }
  if (detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    const std::size_t n = x.size();
    Tape<T>::active()->record([xc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      const T* y = oc.values().data();
      T* gx = xc.grad_span().data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  if (!(slope > T(0) && slope < T(1))) throw param_error("leaky_relu: slope must be in (0,1)");
  return detail::unary_elementwise(
      x, "leaky_relu", [slope](T v) { return v > T(0) ? v : slope * v; },
      [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> sigmoid_op(const Tensor<T>& x) {
  auto out = Tensor<T>::empty(x.shape());
  {
    Eigen::Map<const detail::EArr<T>> in(x.values().data(), static_cast<Eigen::Index>(x.size()));
    Eigen::Map<detail::EArr<T>> ov(out.mutable_values().data(),
                                   static_cast<Eigen::Index>(x.size()));
    ov = T(1) / (T(1) + (-in).exp());
  }
  if (detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    const std::size_t n = x.size();
    Tape<T>::active()->record([xc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      const T* y = oc.values().data();
      T* gx = xc.grad_span().data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

/// Elementwise square root. The derivative at exactly 0 is taken as 0 (the
/// correct subgradient for the self-distance edges, which are identically 0).
template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& x) {
  for (T v : x.values()) {
    if (v < T(0)) throw param_error("sqrt: negative input");
  }
  return detail::unary_elementwise(
      x, "sqrt", [](T v) { return std::sqrt(v); },
      [](T, T y) { return y > T(0) ? T(1) / (T(2) * y) : T(0); });
}

template <typename T>
Tensor<T> reciprocal(const Tensor<T>& x) {
  for (T v : x.values()) {
    if (v == T(0)) throw param_error("reciprocal: zero input");
  }
  return detail::unary_elementwise(
      x, "reciprocal", [](T v) { return T(1) / v; }, [](T, T y) { return -y * y; });
}

/// Custom differentiable elementwise op: fwd computes the value, dfdx its
/// derivative given (x, y). Extension point for ops not shipped here.
template <typename T>
Tensor<T> unary_map(const Tensor<T>& x, std::function<T(T)> fwd,
                    std::function<T(T, T)> dfdx) {
  return detail::unary_elementwise(
      x, "unary_map", [&fwd](T v) { return fwd(v); },
      [dfdx](T v, T y) { return dfdx(v, y); });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw shape_error("matmul: inner dimensions disagree (" + std::to_string(k) + " vs " +
                      std::to_string(b.rows()) + ")");
  }
  auto out = Tensor<T>::empty({m, n});
  {
    Eigen::Map<const detail::EMat<T>> A(a.values().data(), m, k);
    Eigen::Map<const detail::EMat<T>> B(b.values().data(), k, n);
    Eigen::Map<detail::EMat<T>> C(out.mutable_values().data(), m, n);
    C.noalias() = A * B;
  }
  if (detail::recording<T>({&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record([ac, bc, oc, m, k, n]() mutable {
      if (!oc.has_grad()) return;
      Eigen::Map<const detail::EMat<T>> G(oc.grad().data(), m, n);
      if (ac.requires_grad()) {
        ac.ensure_grad();
        Eigen::Map<const detail::EMat<T>> B(bc.values().data(), k, n);
        Eigen::Map<detail::EMat<T>> GA(ac.grad_span().data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (bc.requires_grad()) {
        bc.ensure_grad();
        Eigen::Map<const detail::EMat<T>> A(ac.values().data(), m, k);
        Eigen::Map<detail::EMat<T>> GB(bc.grad_span().data(), k, n);
        GB.noalias() += A.transpose() * G;
      }
    });
  }
  return out;
}

/// C = a * b^T without materializing the transpose (b is NxK, C is MxN).
/// Semantically identical to matmul(a, transpose(b)).
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "matmul_nt");
  detail::require_2d(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw shape_error("matmul_nt: inner dimensions disagree (" + std::to_string(k) + " vs " +
                      std::to_string(b.cols()) + ")");
  }
  auto out = Tensor<T>::empty({m, n});
  {
    Eigen::Map<const detail::EMat<T>> A(a.values().data(), m, k);
    Eigen::Map<const detail::EMat<T>> B(b.values().data(), n, k);
    Eigen::Map<detail::EMat<T>> C(out.mutable_values().data(), m, n);
    C.noalias() = A * B.transpose();
  }
  if (detail::recording<T>({&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record([ac, bc, oc, m, k, n]() mutable {
      if (!oc.has_grad()) return;
      Eigen::Map<const detail::EMat<T>> G(oc.grad().data(), m, n);
      if (ac.requires_grad()) {
        ac.ensure_grad();
        Eigen::Map<const detail::EMat<T>> B(bc.values().data(), n, k);
        Eigen::Map<detail::EMat<T>> GA(ac.grad_span().data(), m, k);
        GA.noalias() += G * B;
      }
      if (bc.requires_grad()) {
        bc.ensure_grad();
        Eigen::Map<const detail::EMat<T>> A(ac.values().data(), m, k);
        Eigen::Map<detail::EMat<T>> GB(bc.grad_span().data(), n, k);
        GB.noalias() += G.transpose() * A;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  detail::require_2d(x, "transpose");
  const std::size_t m = x.rows(), n = x.cols();
  auto out = Tensor<T>::empty({n, m});
  T* ov = out.mutable_values().data();
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j * m + i] = xv[i * n + j];
  if (detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record([xc, oc, m, n]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      T* gx = xc.grad_span().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

/// Same data, new shape (row-major order preserved). Gradients flow 1:1.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<std::size_t> shape) {
  auto out = Tensor<T>::empty(std::move(shape));
  if (out.size() != x.size()) throw shape_error("reshape: element count changed");
  std::copy_n(x.values().data(), x.size(), out.mutable_values().data());
  if (detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    const std::size_t n = x.size();
    Tape<T>::active()->record([xc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      T* gx = xc.grad_span().data();
      for (std::size_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return out;
}

/// Rows of x selected by idx (duplicates allowed); backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::int64_t> idx) {
  detail::require_2d(x, "gather_rows");
  const std::size_t n = x.cols(), m = idx.size();
  if (m == 0) throw shape_error("gather_rows: empty index list");
  for (auto i : idx) {
    if (i < 0 || static_cast<std::size_t>(i) >= x.rows())
      throw param_error("gather_rows: index " + std::to_string(i) + " out of range");
  }
  auto out = Tensor<T>::empty({m, n});
  T* ov = out.mutable_values().data();
  const T* xv = x.values().data();
  for (std::size_t r = 0; r < m; ++r) {
    std::memcpy(ov + r * n, xv + static_cast<std::size_t>(idx[r]) * n, n * sizeof(T));
  }
  if (detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    std::vector<std::int64_t> idx_copy(idx.begin(), idx.end());
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record([xc, oc, idx_copy = std::move(idx_copy), n]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      T* gx = xc.grad_span().data();
      for (std::size_t r = 0; r < idx_copy.size(); ++r) {
        T* dst = gx + static_cast<std::size_t>(idx_copy[r]) * n;
        const T* src = g + r * n;
        for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_2d(a, "concat_rows");
  detail::require_2d(b, "concat_rows");
  if (a.cols() != b.cols()) throw shape_error("concat_rows: column counts differ");
  const std::size_t n = a.cols(), ma = a.rows(), mb = b.rows();
  auto out = Tensor<T>::empty({ma + mb, n});
  T* ov = out.mutable_values().data();
  std::memcpy(ov, a.values().data(), ma * n * sizeof(T));
  std::memcpy(ov + ma * n, b.values().data(), mb * n * sizeof(T));
  if (detail::recording<T>({&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::active()->record([ac, bc, oc, ma, mb, n]() mutable {
      if (!oc.has_grad()) return;
      const T* g = oc.grad().data();
      if (ac.requires_grad()) {
        ac.ensure_grad();
        T* ga = ac.grad_span().data();
        for (std::size_t i = 0; i < ma * n; ++i) ga[i] += g[i];
      }
      if (bc.requires_grad()) {
        bc.ensure_grad();
        T* gb = bc.grad_span().data();
        for (std::size_t i = 0; i < mb * n; ++i) gb[i] += g[ma * n + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Column-wise mean: MxN -> 1xN.
template <typename T>
Tensor<T> reduce_mean_rows(const Tensor<T>& x) {
  detail::require_2d(x, "reduce_mean_rows");
  const std::size_t m = x.rows(), n = x.cols();
  auto out = Tensor<T>::zeros({1, n});
  T* ov = out.mutable_values().data();
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) ov[j] += xv[i * n + j];
  const T inv = T(1) / static_cast<T>(m);
  for (std::size_t j = 0; j < n; ++j) ov[j] *= inv;
  if (detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record([xc, oc, m, n, inv]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      T* gx = xc.grad_span().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j] * inv;
    });
  }
  return out;
}

/// Column-wise max: MxN -> 1xN. Gradient routes to the argmax element;
/// ties go to the lowest row index.
template <typename T>
Tensor<T> reduce_max_rows(const Tensor<T>& x) {
  detail::require_2d(x, "reduce_max_rows");
  const std::size_t m = x.rows(), n = x.cols();
  auto out = Tensor<T>::empty({1, n});
  std::vector<std::size_t> argmax(n, 0);
  T* ov = out.mutable_values().data();
  const T* xv = x.values().data();
  for (std::size_t j = 0; j < n; ++j) {
    T best = xv[j];
    std::size_t bi = 0;
    for (std::size_t i = 1; i < m; ++i) {
      if (xv[i * n + j] > best) {
        best = xv[i * n + j];
        bi = i;
      }
    }
    ov[j] = best;
    argmax[j] = bi;
  }
  if (detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record([xc, oc, argmax = std::move(argmax), n]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      T* gx = xc.grad_span().data();
      for (std::size_t j = 0; j < n; ++j) gx[argmax[j] * n + j] += g[j];
    });
  }
  return out;
}

/// Row-wise sum: MxN -> Mx1.
template <typename T>
Tensor<T> rowwise_sum(const Tensor<T>& x) {
  detail::require_2d(x, "rowwise_sum");
  const std::size_t m = x.rows(), n = x.cols();
  auto out = Tensor<T>::empty({m, 1});
  T* ov = out.mutable_values().data();
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < n; ++j) s += xv[i * n + j];
    ov[i] = s;
  }
  if (detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record([xc, oc, m, n]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      T* gx = xc.grad_span().data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i];
    });
  }
  return out;
}

/// Sums consecutive groups of `group` rows: (G*group)xN -> GxN.
template <typename T>
Tensor<T> sum_row_groups(const Tensor<T>& x, std::size_t group) {
  detail::require_2d(x, "sum_row_groups");
  if (group == 0 || x.rows() % group != 0)
    throw shape_error("sum_row_groups: row count not divisible by group size");
  const std::size_t gcount = x.rows() / group, n = x.cols();
  auto out = Tensor<T>::zeros({gcount, n});
  T* ov = out.mutable_values().data();
  const T* xv = x.values().data();
  for (std::size_t gi = 0; gi < gcount; ++gi)
    for (std::size_t r = 0; r < group; ++r)
      for (std::size_t j = 0; j < n; ++j) ov[gi * n + j] += xv[(gi * group + r) * n + j];
  if (detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record([xc, oc, gcount, group, n]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      T* gx = xc.grad_span().data();
      for (std::size_t gi = 0; gi < gcount; ++gi)
        for (std::size_t r = 0; r < group; ++r)
          for (std::size_t j = 0; j < n; ++j) gx[(gi * group + r) * n + j] += g[gi * n + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax / selection / loss
// ---------------------------------------------------------------------------

/// Numerically-stable softmax over each row (max subtraction).
template <typename T>
Tensor<T> row_softmax(const Tensor<T>& x) {
  detail::require_2d(x, "row_softmax");
  const std::size_t m = x.rows(), n = x.cols();
  auto out = Tensor<T>::empty({m, n});
  T* ov = out.mutable_values().data();
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    T mx = xv[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xv[i * n + j]);
    T denom = T(0);
    for (std::size_t j = 0; j < n; ++j) {
      const T e = std::exp(xv[i * n + j] - mx);
      ov[i * n + j] = e;
      denom += e;
    }
    const T inv = T(1) / denom;
    for (std::size_t j = 0; j < n; ++j) ov[i * n + j] *= inv;
  }
  if (detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record([xc, oc, m, n]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      const T* y = oc.values().data();
      T* gx = xc.grad_span().data();
      for (std::size_t i = 0; i < m; ++i) {
        T dot = T(0);
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
struct TopK {
  Tensor<T> values;     // MxK, descending per row, on the tape
  IndexMatrix indices;  // MxK column indices, not differentiable
};

/// Per-row k largest values in descending order; ties break toward the
/// lower column index. Backward scatters into the selected positions only.
template <typename T>
TopK<T> topk_rows(const Tensor<T>& x, std::size_t k) {
  detail::require_2d(x, "topk_rows");
  const std::size_t m = x.rows(), n = x.cols();
  if (k < 1 || k > n)
    throw param_error("topk_rows: k=" + std::to_string(k) + " out of range [1," +
                      std::to_string(n) + "]");
  TopK<T> res;
  res.values = Tensor<T>::empty({m, k});
  res.indices = IndexMatrix(m, k);
  T* vv = res.values.mutable_values().data();
  const T* xv = x.values().data();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        const T va = xv[i * n + a], vb = xv[i * n + b];
                        if (va != vb) return va > vb;
                        return a < b;
                      });
    for (std::size_t j = 0; j < k; ++j) {
      vv[i * k + j] = xv[i * n + order[j]];
      res.indices.at(i, j) = static_cast<std::int64_t>(order[j]);
    }
  }
  if (detail::recording<T>({&x})) {
    res.values.set_requires_grad(true);
    Tensor<T> xc = x, oc = res.values;
    IndexMatrix idx = res.indices;
    Tape<T>::active()->record([xc, oc, idx = std::move(idx), n, k]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      T* gx = xc.grad_span().data();
      for (std::size_t i = 0; i < idx.rows; ++i)
        for (std::size_t j = 0; j < k; ++j)
          gx[i * n + static_cast<std::size_t>(idx.at(i, j))] += g[i * k + j];
    });
  }
  return res;
}

/// Per-row entry selection: out[i][j] = x[i][idx(i,j)]. Backward scatters
/// into the selected positions only (same rule as topk_rows).
template <typename T>
Tensor<T> gather_entries(const Tensor<T>& x, const IndexMatrix& idx) {
  detail::require_2d(x, "gather_entries");
  if (idx.rows != x.rows()) throw shape_error("gather_entries: row count mismatch");
  const std::size_t m = x.rows(), n = x.cols(), k = idx.cols;
  for (auto v : idx.data) {
    if (v < 0 || static_cast<std::size_t>(v) >= n)
      throw param_error("gather_entries: column index out of range");
  }
  auto out = Tensor<T>::empty({m, k});
  T* ov = out.mutable_values().data();
  const T* xv = x.values().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j)
      ov[i * k + j] = xv[i * n + static_cast<std::size_t>(idx.at(i, j))];
  if (detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    IndexMatrix ic = idx;
    Tape<T>::active()->record([xc, oc, ic = std::move(ic), n, k]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      T* gx = xc.grad_span().data();
      for (std::size_t i = 0; i < ic.rows; ++i)
        for (std::size_t j = 0; j < k; ++j)
          gx[i * n + static_cast<std::size_t>(ic.at(i, j))] += g[i * k + j];
    });
  }
  return out;
}

/// -log softmax(logits)[label], computed with a fused log-sum-exp.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t label) {
  detail::require_2d(logits, "cross_entropy");
  if (logits.rows() != 1) throw shape_error("cross_entropy: logits must be 1xC");
  const std::size_t c = logits.cols();
  if (label >= c)
    throw param_error("cross_entropy: label " + std::to_string(label) + " out of range [0," +
                      std::to_string(c) + ")");
  const auto lv = logits.values();
  T mx = lv[0];
  for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, lv[j]);
  T sum = T(0);
  for (std::size_t j = 0; j < c; ++j) sum += std::exp(lv[j] - mx);
  const T lse = mx + std::log(sum);
  auto out = Tensor<T>::from({1, 1}, {lse - lv[label]});
  if (detail::recording<T>({&logits})) {
    out.set_requires_grad(true);
    Tensor<T> lc = logits, oc = out;
    Tape<T>::active()->record([lc, oc, label, c, mx, sum]() mutable {
      if (!oc.has_grad()) return;
      lc.ensure_grad();
      const T g = oc.grad()[0];
      const T* lv2 = lc.values().data();
      T* gx = lc.grad_span().data();
      for (std::size_t j = 0; j < c; ++j) {
        const T p = std::exp(lv2[j] - mx) / sum;
        gx[j] += g * (p - (j == label ? T(1) : T(0)));
      }
    });
  }
  return out;
}

/// Inverted dropout: keeps elements with probability 1-p and scales them by
/// 1/(1-p), so eval needs no rescale. Identity when train is false or p==0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, T p, bool train, Rng& rng) {
  if (!(p >= T(0) && p < T(1))) throw param_error("dropout: p must be in [0,1)");
  if (!train || p == T(0)) return x;
  const T scale = T(1) / (T(1) - p);
  auto out = Tensor<T>::empty(x.shape());
  T* ov = out.mutable_values().data();
  const T* xv = x.values().data();
  const std::size_t count = x.size();
  std::vector<T> mask(count);
  for (std::size_t i = 0; i < count; ++i) {
    mask[i] = (rng.uniform() >= static_cast<double>(p)) ? scale : T(0);
    ov[i] = xv[i] * mask[i];
  }
  if (detail::recording<T>({&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    Tape<T>::active()->record([xc, oc, count, mask = std::move(mask)]() mutable {
      if (!oc.has_grad()) return;
      xc.ensure_grad();
      const T* g = oc.grad().data();
      T* gx = xc.grad_span().data();
      for (std::size_t i = 0; i < count; ++i) gx[i] += g[i] * mask[i];
    });
  }
  return out;
}

}  // namespace wikg
