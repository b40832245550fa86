#pragma once

// Dense row-major tensor with reverse-mode automatic differentiation.
//
// The engine provides exactly the operations the network needs: batched
// matmul, conv2d, softmax, broadcasting elementwise arithmetic, reductions,
// data-movement ops (reshape/permute/concat/slice/pad/roll), resamplers
// (average pool, pixel shuffle) and patch unfold/fold. Executed ops are
// recorded on a thread-local tape; backward() walks the tape in reverse
// order exactly once, accumulating (summing) gradients into every reachable
// leaf that requires them.
//
// TensorT<double> is the verification default; TensorT<float> is the opt-in
// single-precision fast path.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <random>
#include <set>
#include <vector>

#include "canm/common.hpp"

namespace canm {

enum class DType : uint8_t { f64 = 0, f32 = 1 };

template <typename T>
struct TensorImplT {
  std::vector<size_t> shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::unique_ptr<std::vector<T>> grad;  // lazily allocated, same length as data
};

namespace autodiff {

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
inline bool grad_enabled() { return grad_enabled_flag(); }

template <typename T>
struct TapeEntryT {
  std::shared_ptr<TensorImplT<T>> out;
  std::function<void()> backward;
};

// Topologically ordered record of executed operations. One graph per thread;
// independent forward/backward passes on different threads share nothing.
template <typename T>
class GraphT {
 public:
  static GraphT& tls() {
    thread_local GraphT g;
    return g;
  }
  void clear() { entries.clear(); }
  size_t size() const { return entries.size(); }

  std::vector<TapeEntryT<T>> entries;
};

}  // namespace autodiff

/// Disables gradient recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(autodiff::grad_enabled_flag()) { autodiff::grad_enabled_flag() = false; }
  ~NoGradGuard() { autodiff::grad_enabled_flag() = prev_; }

 private:
  bool prev_;
};

namespace detail {

inline size_t numel_of(const std::vector<size_t>& shape) {
  size_t n = 1;
  for (size_t d : shape) n *= d;
  return n;
}

inline std::vector<size_t> strides_of(const std::vector<size_t>& shape) {
  std::vector<size_t> s(shape.size());
  size_t acc = 1;
  for (size_t i = shape.size(); i-- > 0;) {
    s[i] = acc;
    acc *= shape[i];
  }
  return s;
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  for (T x : v) {
    if (!std::isfinite(static_cast<double>(x)))
      throw ValueError(std::string(op) + ": non-finite value in result");
  }
}

}  // namespace detail

// ============================================================================
// Tensor
// ============================================================================

template <typename T>
class TensorT {
 public:
  using value_type = T;
  using Impl = TensorImplT<T>;

  TensorT() = default;

  static TensorT zeros(std::vector<size_t> shape) {
    return from_vector(shape, std::vector<T>(detail::numel_of(shape), T(0)));
  }
  static TensorT ones(std::vector<size_t> shape) {
    return from_vector(shape, std::vector<T>(detail::numel_of(shape), T(1)));
  }
  static TensorT full(std::vector<size_t> shape, T v) {
    return from_vector(shape, std::vector<T>(detail::numel_of(shape), v));
  }
  static TensorT scalar(T v) { return full({1}, v); }

  static TensorT from_vector(std::vector<size_t> shape, std::vector<T> data) {
    if (detail::numel_of(shape) != data.size())
      throw ShapeError("from_vector: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    TensorT t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  static TensorT uniform(std::vector<size_t> shape, std::mt19937_64& gen, T lo = T(0), T hi = T(1)) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    std::vector<T> d(detail::numel_of(shape));
    for (auto& x : d) x = static_cast<T>(dist(gen));
    return from_vector(std::move(shape), std::move(d));
  }

  static TensorT randn(std::vector<size_t> shape, std::mt19937_64& gen, T stddev = T(1)) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    std::vector<T> d(detail::numel_of(shape));
    for (auto& x : d) x = static_cast<T>(dist(gen));
    return from_vector(std::move(shape), std::move(d));
  }

  // Normal(0, stddev) resampled until within 2 standard deviations.
  static TensorT trunc_normal(std::vector<size_t> shape, std::mt19937_64& gen, T stddev) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    std::vector<T> d(detail::numel_of(shape));
    for (auto& x : d) {
      double v = dist(gen);
      while (std::abs(v) > 2.0 * static_cast<double>(stddev)) v = dist(gen);
      x = static_cast<T>(v);
    }
    return from_vector(std::move(shape), std::move(d));
  }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<size_t>& shape() const { return impl_->shape; }
  size_t ndim() const { return impl_->shape.size(); }
  size_t numel() const { return impl_->data.size(); }
  size_t size(size_t i) const { return impl_->shape.at(i); }

  const T* data() const { return impl_->data.data(); }
  T* data() { return impl_->data.data(); }
  const std::vector<T>& vec() const { return impl_->data; }
  std::vector<T>& vec() { return impl_->data; }

  T item() const {
    if (numel() != 1) throw UsageError("item(): tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
  }

  /// Deep copy, detached from the graph.
  TensorT clone() const {
    TensorT t = from_vector(impl_->shape, impl_->data);
    return t;
  }
  /// Copy that does not require gradients (detached view of the values).
  TensorT detach() const { return clone(); }

  TensorT& set_requires_grad(bool b) {
    impl_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }

  bool has_grad() const { return impl_ && impl_->grad != nullptr; }
  const std::vector<T>& grad() const {
    if (!has_grad()) throw UsageError("grad(): no gradient present");
    return *impl_->grad;
  }
  std::vector<T>& grad_mut() {
    if (!has_grad()) throw UsageError("grad(): no gradient present");
    return *impl_->grad;
  }
  /// Explicit zeroing; gradient accumulation across backward calls is
  /// summation until cleared here.
  void zero_grad() { impl_->grad.reset(); }

  /// Reverse-mode sweep from this scalar. Leaves with requires_grad
  /// accumulate dSelf/dLeaf.
  void backward() const;

  std::shared_ptr<Impl> impl() const { return impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

namespace detail {

template <typename T>
void ensure_grad(TensorImplT<T>& impl) {
  if (!impl.grad) impl.grad = std::make_unique<std::vector<T>>(impl.data.size(), T(0));
}

}  // namespace detail

// Records an op on the tape. grad_fn captures what it needs (input impls,
// saved values) and reads out->grad when invoked.
template <typename T>
void record_op(const TensorT<T>& out, std::function<void()> grad_fn) {
  auto& g = autodiff::GraphT<T>::tls();
  g.entries.push_back({out.impl(), std::move(grad_fn)});
}

template <typename T>
void TensorT<T>::backward() const {
  if (!impl_) throw UsageError("backward: undefined tensor");
  if (numel() != 1) throw UsageError("backward: tensor is not scalar, shape " + shape_str(shape()));
  if (!impl_->requires_grad)
    throw UsageError("backward: tensor does not require grad (untracked)");
  auto& g = autodiff::GraphT<T>::tls();
  // Reset intermediate gradients (op outputs); leaf gradients persist and
  // accumulate across calls.
  for (auto& e : g.entries) e.out->grad.reset();
  detail::ensure_grad(*impl_);
  (*impl_->grad)[0] = T(1);
  for (auto it = g.entries.rbegin(); it != g.entries.rend(); ++it) {
    if (it->out->grad) it->backward();
  }
}

// ============================================================================
// Internal kernels and op helpers
// ============================================================================

namespace detail {

// Broadcast two shapes (numpy rules, trailing alignment).
inline std::vector<size_t> broadcast_shapes(const std::vector<size_t>& a,
                                            const std::vector<size_t>& b, const char* op) {
  size_t r = std::max(a.size(), b.size());
  std::vector<size_t> out(r);
  for (size_t i = 0; i < r; ++i) {
    size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcastable");
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides of `shape` aligned to an output of rank out_rank; 0 where
// the dimension is broadcast.
inline std::vector<size_t> bcast_strides(const std::vector<size_t>& shape, size_t out_rank,
                                         const std::vector<size_t>& out_shape) {
  std::vector<size_t> st(out_rank, 0);
  std::vector<size_t> own = strides_of(shape);
  size_t off = out_rank - shape.size();
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == out_shape[off + i])
      st[off + i] = own[i];
    else
      st[off + i] = 0;  // broadcast (shape[i] == 1)
  }
  return st;
}

// Odometer loop over out_shape calling f(out_linear, a_off, b_off).
template <typename F>
void for_each_broadcast(const std::vector<size_t>& out_shape, const std::vector<size_t>& sa,
                        const std::vector<size_t>& sb, F&& f) {
  size_t n = numel_of(out_shape);
  size_t r = out_shape.size();
  if (n == 0) return;
  std::vector<size_t> coord(r, 0);
  size_t ia = 0, ib = 0;
  for (size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (size_t d = r; d-- > 0;) {
      ++coord[d];
      ia += sa[d];
      ib += sb[d];
      if (coord[d] < out_shape[d]) break;
      coord[d] = 0;
      ia -= sa[d] * out_shape[d];
      ib -= sb[d] * out_shape[d];
    }
  }
}

// C[M,N] (+)= op(A) * op(B). ta: A stored KxM, use A^T. tb: B stored NxK.
template <typename T>
void gemm(const T* A, const T* B, T* C, size_t M, size_t K, size_t N, bool ta, bool tb,
          bool accumulate) {
  if (!accumulate) std::fill(C, C + M * N, T(0));
  if (!ta && !tb) {
    for (size_t i = 0; i < M; ++i) {
      T* c = C + i * N;
      const T* a = A + i * K;
      for (size_t k = 0; k < K; ++k) {
        T av = a[k];
        if (av == T(0)) continue;
        const T* b = B + k * N;
        for (size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  } else if (!ta && tb) {
    for (size_t i = 0; i < M; ++i) {
      const T* a = A + i * K;
      T* c = C + i * N;
      for (size_t j = 0; j < N; ++j) {
        const T* b = B + j * K;
        T s = T(0);
        for (size_t k = 0; k < K; ++k) s += a[k] * b[k];
        c[j] += s;
      }
    }
  } else if (ta && !tb) {
    for (size_t k = 0; k < K; ++k) {
      const T* a = A + k * M;
      const T* b = B + k * N;
      for (size_t i = 0; i < M; ++i) {
        T av = a[i];
        if (av == T(0)) continue;
        T* c = C + i * N;
        for (size_t j = 0; j < N; ++j) c[j] += av * b[j];
      }
    }
  } else {
    for (size_t i = 0; i < M; ++i)
      for (size_t j = 0; j < N; ++j) {
        T s = T(0);
        for (size_t k = 0; k < K; ++k) s += A[k * M + i] * B[j * K + k];
        C[i * N + j] += s;
      }
  }
}

template <typename T>
T sign_of(T x) {
  return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
}

}  // namespace detail

// ============================================================================
// Elementwise operations
// ============================================================================

namespace detail {

// Generic broadcasting binary op with custom forward and per-element adjoints.
// dfa(g, a, b) -> contribution to da; dfb likewise.
template <typename T, typename FFwd, typename FDa, typename FDb>
TensorT<T> binary_op(const char* name, const TensorT<T>& a, const TensorT<T>& b, FFwd fwd, FDa dfa,
                     FDb dfb) {
  std::vector<size_t> oshape = broadcast_shapes(a.shape(), b.shape(), name);
  std::vector<size_t> sa = bcast_strides(a.shape(), oshape.size(), oshape);
  std::vector<size_t> sb = bcast_strides(b.shape(), oshape.size(), oshape);
  std::vector<T> out(numel_of(oshape));
  const T* pa = a.data();
  const T* pb = b.data();
  if (a.shape() == b.shape()) {
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(pa[i], pb[i]);
  } else {
    for_each_broadcast(oshape, sa, sb,
                       [&](size_t o, size_t ia, size_t ib) { out[o] = fwd(pa[ia], pb[ib]); });
  }
  if (verify_mode()) check_finite(out, name);
  TensorT<T> res = TensorT<T>::from_vector(oshape, std::move(out));
  if (autodiff::grad_enabled() && (a.requires_grad() || b.requires_grad())) {
    res.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = res.impl();
    record_op(res, [ai, bi, oi, oshape, sa, sb, dfa, dfb]() {
      const std::vector<T>& g = *oi->grad;
      std::vector<T>* ga = nullptr;
      std::vector<T>* gb = nullptr;
      if (ai->requires_grad) {
        ensure_grad(*ai);
        ga = ai->grad.get();
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        gb = bi->grad.get();
      }
      const T* pa = ai->data.data();
      const T* pb = bi->data.data();
      for_each_broadcast(oshape, sa, sb, [&](size_t o, size_t ia, size_t ib) {
        T gv = g[o];
        if (gv == T(0)) return;
        if (ga) (*ga)[ia] += dfa(gv, pa[ia], pb[ib]);
        if (gb) (*gb)[ib] += dfb(gv, pa[ia], pb[ib]);
      });
    });
  }
  return res;
}

// Unary op: fwd(x) and dl/dx = dfn(g, x, y).
template <typename T, typename FFwd, typename FBwd>
TensorT<T> unary_op(const char* name, const TensorT<T>& x, FFwd fwd, FBwd bwd) {
  std::vector<T> out(x.numel());
  const T* px = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  if (verify_mode()) check_finite(out, name);
  TensorT<T> res = TensorT<T>::from_vector(x.shape(), std::move(out));
  if (autodiff::grad_enabled() && x.requires_grad()) {
    res.set_requires_grad(true);
    auto xi = x.impl(), oi = res.impl();
    record_op(res, [xi, oi, bwd]() {
      if (!xi->requires_grad) return;
      ensure_grad(*xi);
      const std::vector<T>& g = *oi->grad;
      std::vector<T>& gx = *xi->grad;
      const T* px = xi->data.data();
      const T* py = oi->data.data();
      for (size_t i = 0; i < g.size(); ++i) {
        if (g[i] == T(0)) continue;
        gx[i] += bwd(g[i], px[i], py[i]);
      }
    });
  }
  return res;
}

}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return g; });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return -g; });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <typename T>
TensorT<T> divt(const TensorT<T>& a, const TensorT<T>& b) {
  if (verify_mode()) {
    for (T v : b.vec())
      if (v == T(0)) throw ValueError("div: division by exact zero");
  }
  return detail::binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T g, T, T y) { return g / y; },
      [](T g, T x, T y) { return -g * x / (y * y); });
}

template <typename T>
TensorT<T> neg(const TensorT<T>& x) {
  return detail::unary_op<T>(
      "neg", x, [](T v) { return -v; }, [](T g, T, T) { return -g; });
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T c) {
  return detail::unary_op<T>(
      "scale", x, [c](T v) { return v * c; }, [c](T g, T, T) { return g * c; });
}

template <typename T>
TensorT<T> add_const(const TensorT<T>& x, T c) {
  return detail::unary_op<T>(
      "add_const", x, [c](T v) { return v + c; }, [](T g, T, T) { return g; });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  return detail::unary_op<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T g, T v, T) { return v > T(0) ? g : T(0); });
}

template <typename T>
TensorT<T> gelu(const TensorT<T>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::unary_op<T>(
      "gelu", x,
      [](T v) {
        double d = static_cast<double>(v);
        return static_cast<T>(0.5 * d * (1.0 + std::erf(d * inv_sqrt2)));
      },
      [](T g, T v, T) {
        double d = static_cast<double>(v);
        double cdf = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * d * d);
        return static_cast<T>(static_cast<double>(g) * (cdf + d * pdf));
      });
}

template <typename T>
TensorT<T> abs_t(const TensorT<T>& x) {
  return detail::unary_op<T>(
      "abs", x, [](T v) { return std::abs(v); },
      [](T g, T v, T) { return g * detail::sign_of(v); });
}

template <typename T>
TensorT<T> sqrt_t(const TensorT<T>& x) {
  return detail::unary_op<T>(
      "sqrt", x, [](T v) { return std::sqrt(v); },
      [](T g, T, T y) { return y > T(0) ? g / (T(2) * y) : T(0); });
}

template <typename T>
TensorT<T> pow_t(const TensorT<T>& x, T p) {
  return detail::unary_op<T>(
      "pow", x, [p](T v) { return static_cast<T>(std::pow(v, p)); },
      [p](T g, T v, T) { return g * p * static_cast<T>(std::pow(v, p - T(1))); });
}

template <typename T>
TensorT<T> clamp_min(const TensorT<T>& x, T lo) {
  return detail::unary_op<T>(
      "clamp_min", x, [lo](T v) { return v > lo ? v : lo; },
      [lo](T g, T v, T) { return v > lo ? g : T(0); });
}

// ============================================================================
// Reductions
// ============================================================================

template <typename T>
TensorT<T> sum_axes(const TensorT<T>& x, std::vector<size_t> axes, bool keepdim) {
  size_t r = x.ndim();
  std::set<size_t> ax(axes.begin(), axes.end());
  for (size_t a : ax)
    if (a >= r) throw ShapeError("sum: axis " + std::to_string(a) + " out of range for " + shape_str(x.shape()));
  std::vector<size_t> oshape;
  for (size_t i = 0; i < r; ++i) {
    if (ax.count(i)) {
      if (keepdim) oshape.push_back(1);
    } else {
      oshape.push_back(x.shape()[i]);
    }
  }
  if (oshape.empty()) oshape.push_back(1);

  // Map each input dim to an output stride (0 for reduced dims).
  std::vector<size_t> kshape(r);  // keepdim-style output shape
  for (size_t i = 0; i < r; ++i) kshape[i] = ax.count(i) ? 1 : x.shape()[i];
  std::vector<size_t> ostr = detail::bcast_strides(kshape, r, x.shape());

  std::vector<T> out(detail::numel_of(oshape), T(0));
  const T* px = x.data();
  detail::for_each_broadcast(x.shape(), ostr, ostr,
                             [&](size_t i, size_t oo, size_t) { out[oo] += px[i]; });
  if (verify_mode()) detail::check_finite(out, "sum");
  TensorT<T> res = TensorT<T>::from_vector(oshape, std::move(out));
  if (autodiff::grad_enabled() && x.requires_grad()) {
    res.set_requires_grad(true);
    auto xi = x.impl(), oi = res.impl();
    std::vector<size_t> xshape = x.shape();
    record_op(res, [xi, oi, xshape, ostr]() {
      detail::ensure_grad(*xi);
      const std::vector<T>& g = *oi->grad;
      std::vector<T>& gx = *xi->grad;
      detail::for_each_broadcast(xshape, ostr, ostr,
                                 [&](size_t i, size_t oo, size_t) { gx[i] += g[oo]; });
    });
  }
  return res;
}

template <typename T>
TensorT<T> mean_axes(const TensorT<T>& x, std::vector<size_t> axes, bool keepdim) {
  size_t n = 1;
  for (size_t a : std::set<size_t>(axes.begin(), axes.end())) n *= x.shape().at(a);
  return scale(sum_axes(x, std::move(axes), keepdim), T(1) / static_cast<T>(n));
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  std::vector<size_t> axes(x.ndim());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return sum_axes(x, std::move(axes), false);
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// ============================================================================
// Softmax
// ============================================================================

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, size_t axis) {
  if (axis >= x.ndim())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const auto& sh = x.shape();
  size_t L = sh[axis];
  size_t inner = 1, outer = 1;
  for (size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
  for (size_t i = 0; i < axis; ++i) outer *= sh[i];

  std::vector<T> out(x.numel());
  const T* px = x.data();
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      size_t base = o * L * inner + in;
      T mx = px[base];
      for (size_t l = 1; l < L; ++l) mx = std::max(mx, px[base + l * inner]);
      T s = T(0);
      for (size_t l = 0; l < L; ++l) {
        T e = std::exp(px[base + l * inner] - mx);
        out[base + l * inner] = e;
        s += e;
      }
      T invs = T(1) / s;
      for (size_t l = 0; l < L; ++l) out[base + l * inner] *= invs;
    }
  }
  if (verify_mode()) detail::check_finite(out, "softmax");
  TensorT<T> res = TensorT<T>::from_vector(sh, std::move(out));
  if (autodiff::grad_enabled() && x.requires_grad()) {
    res.set_requires_grad(true);
    auto xi = x.impl(), oi = res.impl();
    record_op(res, [xi, oi, L, inner, outer]() {
      detail::ensure_grad(*xi);
      const std::vector<T>& g = *oi->grad;
      const std::vector<T>& y = oi->data;
      std::vector<T>& gx = *xi->grad;
      for (size_t o = 0; o < outer; ++o)
        for (size_t in = 0; in < inner; ++in) {
          size_t base = o * L * inner + in;
          T dot = T(0);
          for (size_t l = 0; l < L; ++l) dot += g[base + l * inner] * y[base + l * inner];
          for (size_t l = 0; l < L; ++l) {
            size_t idx = base + l * inner;
            gx[idx] += (g[idx] - dot) * y[idx];
          }
        }
    });
  }
  return res;
}

// ============================================================================
// Matrix multiplication (batched, broadcasting batch dims)
// ============================================================================

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() < 2 || b.ndim() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  const auto& as = a.shape();
  const auto& bs = b.shape();
  size_t M = as[as.size() - 2], K = as[as.size() - 1];
  size_t Kb = bs[bs.size() - 2], N = bs[bs.size() - 1];
  if (K != Kb)
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(as) + " vs " + shape_str(bs));

  std::vector<size_t> abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
  std::vector<size_t> obatch = detail::broadcast_shapes(abatch, bbatch, "matmul");
  std::vector<size_t> oshape = obatch;
  oshape.push_back(M);
  oshape.push_back(N);

  size_t nbatch = detail::numel_of(obatch);
  // Strides in units of one matrix.
  std::vector<size_t> sa = detail::bcast_strides(abatch, obatch.size(), obatch);
  std::vector<size_t> sb = detail::bcast_strides(bbatch, obatch.size(), obatch);

  std::vector<T> out(nbatch * M * N);
  const T* pa = a.data();
  const T* pb = b.data();
  // Collect per-batch offsets so forward can run in parallel.
  std::vector<std::pair<size_t, size_t>> offs(nbatch);
  {
    size_t c = 0;
    detail::for_each_broadcast(obatch, sa, sb,
                               [&](size_t, size_t ia, size_t ib) { offs[c++] = {ia, ib}; });
  }
  T* po = out.data();
  parallel_for(
      nbatch,
      [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i)
          detail::gemm(pa + offs[i].first * M * K, pb + offs[i].second * K * N, po + i * M * N, M,
                       K, N, false, false, false);
      },
      /*grain=*/1);
  if (verify_mode()) detail::check_finite(out, "matmul");
  TensorT<T> res = TensorT<T>::from_vector(oshape, std::move(out));
  if (autodiff::grad_enabled() && (a.requires_grad() || b.requires_grad())) {
    res.set_requires_grad(true);
    auto ai = a.impl(), bi = b.impl(), oi = res.impl();
    record_op(res, [ai, bi, oi, offs, M, K, N]() {
      const T* g = oi->grad->data();
      const T* pa = ai->data.data();
      const T* pb = bi->data.data();
      std::vector<T>* ga = nullptr;
      std::vector<T>* gb = nullptr;
      if (ai->requires_grad) {
        detail::ensure_grad(*ai);
        ga = ai->grad.get();
      }
      if (bi->requires_grad) {
        detail::ensure_grad(*bi);
        gb = bi->grad.get();
      }
      for (size_t i = 0; i < offs.size(); ++i) {
        const T* gm = g + i * M * N;
        if (ga)  // dA += dC * B^T
          detail::gemm(gm, pb + offs[i].second * K * N, ga->data() + offs[i].first * M * K, M, N, K,
                       false, true, true);
        if (gb)  // dB += A^T * dC
          detail::gemm(pa + offs[i].first * M * K, gm, gb->data() + offs[i].second * K * N, K, M, N,
                       true, false, true);
      }
    });
  }
  return res;
}

// ============================================================================
// Convolution (cross-correlation convention)
// ============================================================================

namespace detail {

template <typename T>
void conv2d_forward_kernel(const T* x, const T* w, const T* bias, T* y, size_t B, size_t C,
                           size_t H, size_t W, size_t O, size_t kh, size_t kw, size_t stride,
                           size_t pad, size_t groups, size_t Ho, size_t Wo) {
  size_t cg = C / groups;  // input channels per group
  size_t og = O / groups;  // output channels per group
  parallel_for(
      B * O,
      [&](size_t lo, size_t hi) {
        for (size_t bo = lo; bo < hi; ++bo) {
          size_t b = bo / O, o = bo % O;
          size_t grp = o / og;
          T* yp = y + (b * O + o) * Ho * Wo;
          T bv = bias ? bias[o] : T(0);
          std::fill(yp, yp + Ho * Wo, bv);
          for (size_t c = 0; c < cg; ++c) {
            const T* xp = x + (b * C + grp * cg + c) * H * W;
            const T* wp = w + ((o * cg + c) * kh) * kw;
            if (kh == 1 && kw == 1 && stride == 1 && pad == 0) {
              T wv = wp[0];
              for (size_t i = 0; i < Ho * Wo; ++i) yp[i] += wv * xp[i];
              continue;
            }
            for (size_t oy = 0; oy < Ho; ++oy) {
              for (size_t ox = 0; ox < Wo; ++ox) {
                T s = T(0);
                for (size_t ky = 0; ky < kh; ++ky) {
                  long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                  if (iy < 0 || iy >= static_cast<long>(H)) continue;
                  for (size_t kx = 0; kx < kw; ++kx) {
                    long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                    s += xp[iy * W + ix] * wp[ky * kw + kx];
                  }
                }
                yp[oy * Wo + ox] += s;
              }
            }
          }
        }
      },
      /*grain=*/1);
}

}  // namespace detail

/// 2-D cross-correlation with optional bias, stride, zero padding, groups.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias, size_t stride,
                  size_t pad, size_t groups) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw ShapeError("conv2d: expected 4-d input and weight, got " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  size_t O = w.size(0), Cw = w.size(1), kh = w.size(2), kw = w.size(3);
  if (groups == 0 || C % groups != 0 || O % groups != 0)
    throw ShapeError("conv2d: channels " + std::to_string(C) + "/" + std::to_string(O) +
                     " not divisible by groups " + std::to_string(groups));
  if (Cw != C / groups)
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " does not match input " +
                     shape_str(x.shape()) + " with groups " + std::to_string(groups));
  if (bias && (bias->ndim() != 1 || bias->size(0) != O))
    throw ShapeError("conv2d: bias shape " + shape_str(bias->shape()) + " does not match O=" +
                     std::to_string(O));
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw ShapeError("conv2d: kernel larger than padded input");
  size_t Ho = (H + 2 * pad - kh) / stride + 1;
  size_t Wo = (W + 2 * pad - kw) / stride + 1;

  std::vector<T> out(B * O * Ho * Wo);
  detail::conv2d_forward_kernel(x.data(), w.data(), bias ? bias->data() : nullptr, out.data(), B, C,
                                H, W, O, kh, kw, stride, pad, groups, Ho, Wo);
  if (verify_mode()) detail::check_finite(out, "conv2d");
  TensorT<T> res = TensorT<T>::from_vector({B, O, Ho, Wo}, std::move(out));

  bool need = x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad());
  if (autodiff::grad_enabled() && need) {
    res.set_requires_grad(true);
    auto xi = x.impl(), wi = w.impl(), oi = res.impl();
    std::shared_ptr<TensorImplT<T>> bi = bias ? bias->impl() : nullptr;
    record_op(res, [xi, wi, bi, oi, B, C, H, W, O, kh, kw, stride, pad, groups, Ho, Wo]() {
      const std::vector<T>& g = *oi->grad;
      size_t cg = C / groups, og = O / groups;
      std::vector<T>* gx = nullptr;
      std::vector<T>* gw = nullptr;
      std::vector<T>* gb = nullptr;
      if (xi->requires_grad) {
        detail::ensure_grad(*xi);
        gx = xi->grad.get();
      }
      if (wi->requires_grad) {
        detail::ensure_grad(*wi);
        gw = wi->grad.get();
      }
      if (bi && bi->requires_grad) {
        detail::ensure_grad(*bi);
        gb = bi->grad.get();
      }
      const T* px = xi->data.data();
      const T* pw = wi->data.data();
      for (size_t b = 0; b < B; ++b)
        for (size_t o = 0; o < O; ++o) {
          size_t grp = o / og;
          const T* gp = g.data() + (b * O + o) * Ho * Wo;
          for (size_t oy = 0; oy < Ho; ++oy)
            for (size_t ox = 0; ox < Wo; ++ox) {
              T gv = gp[oy * Wo + ox];
              if (gv == T(0)) continue;
              if (gb) (*gb)[o] += gv;
              for (size_t c = 0; c < cg; ++c) {
                size_t xc = grp * cg + c;
                const T* xp = px + (b * C + xc) * H * W;
                const T* wp = pw + (o * cg + c) * kh * kw;
                for (size_t ky = 0; ky < kh; ++ky) {
                  long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                  if (iy < 0 || iy >= static_cast<long>(H)) continue;
                  for (size_t kx = 0; kx < kw; ++kx) {
                    long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                    size_t xoff = iy * W + ix;
                    if (gx) (*gx)[(b * C + xc) * H * W + xoff] += gv * wp[ky * kw + kx];
                    if (gw) (*gw)[(o * cg + c) * kh * kw + ky * kw + kx] += gv * xp[xoff];
                  }
                }
              }
            }
        }
    });
  }
  return res;
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias,
                  size_t stride = 1, size_t pad = 0, size_t groups = 1) {
  return conv2d(x, w, &bias, stride, pad, groups);
}

// ============================================================================
// Data movement
// ============================================================================

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, std::vector<size_t> shape) {
  if (detail::numel_of(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  TensorT<T> res = TensorT<T>::from_vector(shape, x.vec());
  if (autodiff::grad_enabled() && x.requires_grad()) {
    res.set_requires_grad(true);
    auto xi = x.impl(), oi = res.impl();
    record_op(res, [xi, oi]() {
      detail::ensure_grad(*xi);
      const std::vector<T>& g = *oi->grad;
      std::vector<T>& gx = *xi->grad;
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return res;
}

template <typename T>
TensorT<T> permute(const TensorT<T>& x, std::vector<size_t> perm) {
  size_t r = x.ndim();
  if (perm.size() != r) throw ShapeError("permute: order size mismatch for " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid order");
    seen[p] = true;
  }
  std::vector<size_t> oshape(r);
  for (size_t i = 0; i < r; ++i) oshape[i] = x.shape()[perm[i]];
  std::vector<size_t> xstr = detail::strides_of(x.shape());
  std::vector<size_t> gather(r);  // stride in x per out dim
  for (size_t i = 0; i < r; ++i) gather[i] = xstr[perm[i]];

  std::vector<T> out(x.numel());
  const T* px = x.data();
  detail::for_each_broadcast(oshape, gather, gather,
                             [&](size_t o, size_t ix, size_t) { out[o] = px[ix]; });
  TensorT<T> res = TensorT<T>::from_vector(oshape, std::move(out));
  if (autodiff::grad_enabled() && x.requires_grad()) {
    res.set_requires_grad(true);
    auto xi = x.impl(), oi = res.impl();
    record_op(res, [xi, oi, oshape, gather]() {
      detail::ensure_grad(*xi);
      const std::vector<T>& g = *oi->grad;
      std::vector<T>& gx = *xi->grad;
      detail::for_each_broadcast(oshape, gather, gather,
                                 [&](size_t o, size_t ix, size_t) { gx[ix] += g[o]; });
    });
  }
  return res;
}

/// Swaps the last two axes.
template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& x) {
  std::vector<size_t> perm(x.ndim());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

template <typename T>
TensorT<T> concat(const std::vector<TensorT<T>>& parts, size_t axis) {
  if (parts.empty()) throw UsageError("concat: empty input list");
  size_t r = parts[0].ndim();
  if (axis >= r) throw ShapeError("concat: axis out of range");
  size_t total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != r) throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < r; ++i)
      if (i != axis && p.shape()[i] != parts[0].shape()[i])
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(parts[0].shape()));
    total += p.shape()[axis];
  }
  std::vector<size_t> oshape = parts[0].shape();
  oshape[axis] = total;

  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= oshape[i];
  for (size_t i = axis + 1; i < r; ++i) inner *= oshape[i];

  std::vector<T> out(detail::numel_of(oshape));
  size_t off = 0;
  for (const auto& p : parts) {
    size_t len = p.shape()[axis] * inner;
    const T* src = p.data();
    for (size_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * total * inner + off, src + o * len, len * sizeof(T));
    off += len;
  }
  TensorT<T> res = TensorT<T>::from_vector(oshape, std::move(out));
  bool need = false;
  for (const auto& p : parts) need = need || p.requires_grad();
  if (autodiff::grad_enabled() && need) {
    res.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorImplT<T>>> impls;
    std::vector<size_t> lens;
    for (const auto& p : parts) {
      impls.push_back(p.impl());
      lens.push_back(p.shape()[axis] * inner);
    }
    auto oi = res.impl();
    record_op(res, [impls, lens, oi, outer, total, inner]() {
      const std::vector<T>& g = *oi->grad;
      size_t off = 0;
      for (size_t k = 0; k < impls.size(); ++k) {
        if (impls[k]->requires_grad) {
          detail::ensure_grad(*impls[k]);
          std::vector<T>& gx = *impls[k]->grad;
          for (size_t o = 0; o < outer; ++o) {
            const T* src = g.data() + o * total * inner + off;
            T* dst = gx.data() + o * lens[k];
            for (size_t i = 0; i < lens[k]; ++i) dst[i] += src[i];
          }
        }
        off += lens[k];
      }
    });
  }
  return res;
}

template <typename T>
TensorT<T> concat(std::initializer_list<TensorT<T>> parts, size_t axis) {
  return concat(std::vector<TensorT<T>>(parts), axis);
}

template <typename T>
TensorT<T> slice(const TensorT<T>& x, size_t axis, size_t start, size_t len) {
  size_t r = x.ndim();
  if (axis >= r || start + len > x.shape()[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") invalid for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  std::vector<size_t> oshape = x.shape();
  oshape[axis] = len;
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (size_t i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  size_t full = x.shape()[axis];

  std::vector<T> out(detail::numel_of(oshape));
  const T* px = x.data();
  for (size_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, px + (o * full + start) * inner,
                len * inner * sizeof(T));
  TensorT<T> res = TensorT<T>::from_vector(oshape, std::move(out));
  if (autodiff::grad_enabled() && x.requires_grad()) {
    res.set_requires_grad(true);
    auto xi = x.impl(), oi = res.impl();
    record_op(res, [xi, oi, outer, inner, full, start, len]() {
      detail::ensure_grad(*xi);
      const std::vector<T>& g = *oi->grad;
      std::vector<T>& gx = *xi->grad;
      for (size_t o = 0; o < outer; ++o) {
        const T* src = g.data() + o * len * inner;
        T* dst = gx.data() + (o * full + start) * inner;
        for (size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return res;
}

/// Zero padding along one axis.
template <typename T>
TensorT<T> pad_axis(const TensorT<T>& x, size_t axis, size_t before, size_t after) {
  size_t r = x.ndim();
  if (axis >= r) throw ShapeError("pad: axis out of range");
  std::vector<size_t> oshape = x.shape();
  oshape[axis] += before + after;
  size_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (size_t i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  size_t len = x.shape()[axis];
  size_t olen = oshape[axis];

  std::vector<T> out(detail::numel_of(oshape), T(0));
  const T* px = x.data();
  for (size_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + (o * olen + before) * inner, px + o * len * inner,
                len * inner * sizeof(T));
  TensorT<T> res = TensorT<T>::from_vector(oshape, std::move(out));
  if (autodiff::grad_enabled() && x.requires_grad()) {
    res.set_requires_grad(true);
    auto xi = x.impl(), oi = res.impl();
    record_op(res, [xi, oi, outer, inner, len, olen, before]() {
      detail::ensure_grad(*xi);
      const std::vector<T>& g = *oi->grad;
      std::vector<T>& gx = *xi->grad;
      for (size_t o = 0; o < outer; ++o) {
        const T* src = g.data() + (o * olen + before) * inner;
        T* dst = gx.data() + o * len * inner;
        for (size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return res;
}

/// Cyclic roll of the last two axes: out[.., y, x] = in[.., (y-dy) mod H, (x-dx) mod W].
template <typename T>
TensorT<T> roll2d(const TensorT<T>& x, long dy, long dx) {
  size_t r = x.ndim();
  if (r < 2) throw ShapeError("roll2d: rank must be >= 2, got " + shape_str(x.shape()));
  size_t H = x.shape()[r - 2], W = x.shape()[r - 1];
  size_t n = x.numel(), plane = H * W, planes = n / plane;
  auto m = [](long v, size_t mod) {
    long mm = static_cast<long>(mod);
    long res = v % mm;
    return static_cast<size_t>(res < 0 ? res + mm : res);
  };
  std::vector<T> out(n);
  const T* px = x.data();
  for (size_t p = 0; p < planes; ++p) {
    const T* src = px + p * plane;
    T* dst = out.data() + p * plane;
    for (size_t y = 0; y < H; ++y) {
      size_t sy = m(static_cast<long>(y) - dy, H);
      for (size_t x2 = 0; x2 < W; ++x2) dst[y * W + x2] = src[sy * W + m(static_cast<long>(x2) - dx, W)];
    }
  }
  TensorT<T> res = TensorT<T>::from_vector(x.shape(), std::move(out));
  if (autodiff::grad_enabled() && x.requires_grad()) {
    res.set_requires_grad(true);
    auto xi = x.impl(), oi = res.impl();
    record_op(res, [xi, oi, planes, plane, H, W, dy, dx, m]() {
      detail::ensure_grad(*xi);
      const std::vector<T>& g = *oi->grad;
      std::vector<T>& gx = *xi->grad;
      for (size_t p = 0; p < planes; ++p)
        for (size_t y = 0; y < H; ++y) {
          size_t sy = m(static_cast<long>(y) - dy, H);
          for (size_t x2 = 0; x2 < W; ++x2)
            gx[p * plane + sy * W + m(static_cast<long>(x2) - dx, W)] += g[p * plane + y * W + x2];
        }
    });
  }
  return res;
}

// ============================================================================
// Resamplers
// ============================================================================

/// Average pooling by an integer factor; each output is the mean of its
/// factor x factor block.
template <typename T>
TensorT<T> avgpool2d(const TensorT<T>& x, size_t factor) {
  if (x.ndim() != 4) throw ShapeError("avgpool2d: expected 4-d input, got " + shape_str(x.shape()));
  size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (factor == 0 || H % factor != 0 || W % factor != 0)
    throw ShapeError("avgpool2d: spatial dims of " + shape_str(x.shape()) +
                     " not divisible by factor " + std::to_string(factor));
  size_t Ho = H / factor, Wo = W / factor;
  T inv = T(1) / static_cast<T>(factor * factor);
  std::vector<T> out(B * C * Ho * Wo);
  const T* px = x.data();
  for (size_t bc = 0; bc < B * C; ++bc) {
    const T* src = px + bc * H * W;
    T* dst = out.data() + bc * Ho * Wo;
    for (size_t y = 0; y < Ho; ++y)
      for (size_t x2 = 0; x2 < Wo; ++x2) {
        T s = T(0);
        for (size_t fy = 0; fy < factor; ++fy)
          for (size_t fx = 0; fx < factor; ++fx) s += src[(y * factor + fy) * W + x2 * factor + fx];
        dst[y * Wo + x2] = s * inv;
      }
  }
  TensorT<T> res = TensorT<T>::from_vector({B, C, Ho, Wo}, std::move(out));
  if (autodiff::grad_enabled() && x.requires_grad()) {
    res.set_requires_grad(true);
    auto xi = x.impl(), oi = res.impl();
    record_op(res, [xi, oi, B, C, H, W, Ho, Wo, factor, inv]() {
      detail::ensure_grad(*xi);
      const std::vector<T>& g = *oi->grad;
      std::vector<T>& gx = *xi->grad;
      for (size_t bc = 0; bc < B * C; ++bc)
        for (size_t y = 0; y < Ho; ++y)
          for (size_t x2 = 0; x2 < Wo; ++x2) {
            T gv = g[bc * Ho * Wo + y * Wo + x2] * inv;
            if (gv == T(0)) continue;
            for (size_t fy = 0; fy < factor; ++fy)
              for (size_t fx = 0; fx < factor; ++fx)
                gx[bc * H * W + (y * factor + fy) * W + x2 * factor + fx] += gv;
          }
    });
  }
  return res;
}

/// Rearranges [B, 4C, H, W] -> [B, C, 2H, 2W];
/// out[b, c, 2y+dy, 2x+dx] = in[b, 4c + 2dy + dx, y, x].
template <typename T>
TensorT<T> pixel_shuffle2(const TensorT<T>& x) {
  if (x.ndim() != 4) throw ShapeError("pixel_shuffle2: expected 4-d input");
  size_t B = x.size(0), C4 = x.size(1), H = x.size(2), W = x.size(3);
  if (C4 % 4 != 0)
    throw ShapeError("pixel_shuffle2: channel count " + std::to_string(C4) + " not divisible by 4");
  size_t C = C4 / 4, Ho = 2 * H, Wo = 2 * W;
  std::vector<T> out(x.numel());
  const T* px = x.data();
  for (size_t b = 0; b < B; ++b)
    for (size_t c = 0; c < C; ++c)
      for (size_t dy = 0; dy < 2; ++dy)
        for (size_t dx = 0; dx < 2; ++dx) {
          const T* src = px + ((b * C4 + c * 4 + dy * 2 + dx) * H) * W;
          T* dst = out.data() + (b * C + c) * Ho * Wo;
          for (size_t y = 0; y < H; ++y)
            for (size_t x2 = 0; x2 < W; ++x2) dst[(2 * y + dy) * Wo + 2 * x2 + dx] = src[y * W + x2];
        }
  TensorT<T> res = TensorT<T>::from_vector({B, C, Ho, Wo}, std::move(out));
  if (autodiff::grad_enabled() && x.requires_grad()) {
    res.set_requires_grad(true);
    auto xi = x.impl(), oi = res.impl();
    record_op(res, [xi, oi, B, C, C4, H, W, Ho, Wo]() {
      detail::ensure_grad(*xi);
      const std::vector<T>& g = *oi->grad;
      std::vector<T>& gx = *xi->grad;
      for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < C; ++c)
          for (size_t dy = 0; dy < 2; ++dy)
            for (size_t dx = 0; dx < 2; ++dx) {
              T* dst = gx.data() + ((b * C4 + c * 4 + dy * 2 + dx) * H) * W;
              const T* src = g.data() + (b * C + c) * Ho * Wo;
              for (size_t y = 0; y < H; ++y)
                for (size_t x2 = 0; x2 < W; ++x2)
                  dst[y * W + x2] += src[(2 * y + dy) * Wo + 2 * x2 + dx];
            }
    });
  }
  return res;
}

// ============================================================================
// Patch unfold / fold
// ============================================================================
//
// Dense overlapping patches, stride 1, zero padding (k-1)/2, so the patch
// grid equals the pixel grid (M = H*W) and patch i is centered at pixel i.
// fold() normalizes by overlap counts and is a left inverse of unfold().

namespace detail {

inline void check_patch_size(size_t ph, size_t pw) {
  if (ph % 2 == 0 || pw % 2 == 0)
    throw ShapeError("patch size (" + std::to_string(ph) + "," + std::to_string(pw) +
                     ") must be odd for centered patches");
}

}  // namespace detail

/// [B, C, H, W] -> [B, H*W, C*ph*pw]
template <typename T>
TensorT<T> unfold(const TensorT<T>& x, size_t ph, size_t pw) {
  if (x.ndim() != 4) throw ShapeError("unfold: expected 4-d input, got " + shape_str(x.shape()));
  detail::check_patch_size(ph, pw);
  size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  long cy = static_cast<long>(ph / 2), cx = static_cast<long>(pw / 2);
  size_t M = H * W, L = C * ph * pw;
  std::vector<T> out(B * M * L, T(0));
  const T* px = x.data();
  for (size_t b = 0; b < B; ++b)
    for (size_t y = 0; y < H; ++y)
      for (size_t x2 = 0; x2 < W; ++x2) {
        T* dst = out.data() + (b * M + y * W + x2) * L;
        for (size_t c = 0; c < C; ++c) {
          const T* src = px + (b * C + c) * H * W;
          for (size_t py = 0; py < ph; ++py) {
            long iy = static_cast<long>(y) + static_cast<long>(py) - cy;
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (size_t px2 = 0; px2 < pw; ++px2) {
              long ix = static_cast<long>(x2) + static_cast<long>(px2) - cx;
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              dst[(c * ph + py) * pw + px2] = src[iy * W + ix];
            }
          }
        }
      }
  TensorT<T> res = TensorT<T>::from_vector({B, M, L}, std::move(out));
  if (autodiff::grad_enabled() && x.requires_grad()) {
    res.set_requires_grad(true);
    auto xi = x.impl(), oi = res.impl();
    record_op(res, [xi, oi, B, C, H, W, ph, pw, cy, cx, M, L]() {
      detail::ensure_grad(*xi);
      const std::vector<T>& g = *oi->grad;
      std::vector<T>& gx = *xi->grad;
      for (size_t b = 0; b < B; ++b)
        for (size_t y = 0; y < H; ++y)
          for (size_t x2 = 0; x2 < W; ++x2) {
            const T* src = g.data() + (b * M + y * W + x2) * L;
            for (size_t c = 0; c < C; ++c)
              for (size_t py = 0; py < ph; ++py) {
                long iy = static_cast<long>(y) + static_cast<long>(py) - cy;
                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                for (size_t px2 = 0; px2 < pw; ++px2) {
                  long ix = static_cast<long>(x2) + static_cast<long>(px2) - cx;
                  if (ix < 0 || ix >= static_cast<long>(W)) continue;
                  gx[(b * C + c) * H * W + iy * W + ix] += src[(c * ph + py) * pw + px2];
                }
              }
          }
    });
  }
  return res;
}

/// Overlap counts for the stride-1 centered unfold of an HxW grid.
inline std::vector<double> fold_overlap_counts(size_t H, size_t W, size_t ph, size_t pw) {
  std::vector<double> cnt(H * W, 0.0);
  long cy = static_cast<long>(ph / 2), cx = static_cast<long>(pw / 2);
  for (size_t y = 0; y < H; ++y)
    for (size_t x = 0; x < W; ++x)
      for (size_t py = 0; py < ph; ++py) {
        long iy = static_cast<long>(y) + static_cast<long>(py) - cy;
        if (iy < 0 || iy >= static_cast<long>(H)) continue;
        for (size_t px = 0; px < pw; ++px) {
          long ix = static_cast<long>(x) + static_cast<long>(px) - cx;
          if (ix < 0 || ix >= static_cast<long>(W)) continue;
          cnt[iy * W + ix] += 1.0;
        }
      }
  return cnt;
}

/// [B, H*W, C*ph*pw] -> [B, C, H, W], overlap-normalized.
template <typename T>
TensorT<T> fold(const TensorT<T>& p, size_t C, size_t H, size_t W, size_t ph, size_t pw) {
  if (p.ndim() != 3) throw ShapeError("fold: expected 3-d patch tensor, got " + shape_str(p.shape()));
  detail::check_patch_size(ph, pw);
  size_t M = H * W, L = C * ph * pw;
  if (p.size(1) != M || p.size(2) != L)
    throw ShapeError("fold: patch tensor " + shape_str(p.shape()) + " does not match C=" +
                     std::to_string(C) + " H=" + std::to_string(H) + " W=" + std::to_string(W));
  size_t B = p.size(0);
  long cy = static_cast<long>(ph / 2), cx = static_cast<long>(pw / 2);
  std::vector<double> cnt = fold_overlap_counts(H, W, ph, pw);

  std::vector<T> out(B * C * H * W, T(0));
  const T* pp = p.data();
  for (size_t b = 0; b < B; ++b)
    for (size_t y = 0; y < H; ++y)
      for (size_t x2 = 0; x2 < W; ++x2) {
        const T* src = pp + (b * M + y * W + x2) * L;
        for (size_t c = 0; c < C; ++c)
          for (size_t py = 0; py < ph; ++py) {
            long iy = static_cast<long>(y) + static_cast<long>(py) - cy;
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (size_t px2 = 0; px2 < pw; ++px2) {
              long ix = static_cast<long>(x2) + static_cast<long>(px2) - cx;
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              out[(b * C + c) * H * W + iy * W + ix] += src[(c * ph + py) * pw + px2];
            }
          }
      }
  for (size_t b = 0; b < B; ++b)
    for (size_t c = 0; c < C; ++c)
      for (size_t i = 0; i < H * W; ++i)
        out[(b * C + c) * H * W + i] /= static_cast<T>(cnt[i]);
  if (verify_mode()) detail::check_finite(out, "fold");
  TensorT<T> res = TensorT<T>::from_vector({B, C, H, W}, std::move(out));
  if (autodiff::grad_enabled() && p.requires_grad()) {
    res.set_requires_grad(true);
    auto pi = p.impl(), oi = res.impl();
    record_op(res, [pi, oi, B, C, H, W, ph, pw, cy, cx, M, L, cnt]() {
      detail::ensure_grad(*pi);
      const std::vector<T>& g = *oi->grad;
      std::vector<T>& gp = *pi->grad;
      for (size_t b = 0; b < B; ++b)
        for (size_t y = 0; y < H; ++y)
          for (size_t x2 = 0; x2 < W; ++x2) {
            T* dst = gp.data() + (b * M + y * W + x2) * L;
            for (size_t c = 0; c < C; ++c)
              for (size_t py = 0; py < ph; ++py) {
                long iy = static_cast<long>(y) + static_cast<long>(py) - cy;
                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                for (size_t px2 = 0; px2 < pw; ++px2) {
                  long ix = static_cast<long>(x2) + static_cast<long>(px2) - cx;
                  if (ix < 0 || ix >= static_cast<long>(W)) continue;
                  dst[(c * ph + py) * pw + px2] +=
                      g[(b * C + c) * H * W + iy * W + ix] / static_cast<T>(cnt[iy * W + ix]);
                }
              }
          }
    });
  }
  return res;
}

// ============================================================================
// Utilities
// ============================================================================

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0;
  for (size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

template <typename T, typename U>
TensorT<U> cast_tensor(const TensorT<T>& x) {
  std::vector<U> d(x.numel());
  for (size_t i = 0; i < d.size(); ++i) d[i] = static_cast<U>(x.data()[i]);
  return TensorT<U>::from_vector(x.shape(), std::move(d));
}

}  // namespace canm
