#pragma once

// Reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a shared handle to contiguous values plus an optional gradient
// buffer of the same shape. Operations are free functions; when a Tape is
// active on the current thread and any input participates in differentiation,
// the op appends one node to the tape. Nodes are appended in evaluation
// order, so the tape is topologically sorted by construction and backward()
// is a single reverse sweep. Tapes are single-use: backward() consumes the
// recorded graph.
//
// Broadcasting rule (binary elementwise ops): shapes are aligned at their
// trailing dimensions; aligned dimensions must be equal or 1, and size-1
// dimensions are expanded. No other implicit expansion happens.
//
// Gradients accumulate additively across backward() calls; callers zero them
// per optimizer step.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tss/error.hpp"
#include "tss/rng.hpp"

namespace tss {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel_of(const Shape& s) {
  Index n = 1;
  for (Index d : s) n *= d;
  return n;
}

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? " x " : "") << s[i];
  os << "]";
  return os.str();
}

// Strict-numerics mode: ops reject non-finite inputs. Off by default.
inline bool& strict_numerics() {
  thread_local bool flag = false;
  return flag;
}

template <typename Scalar>
struct TensorStorage {
  using Flat = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  Shape shape;
  Flat values;  // row-major flattening of `shape`
  Flat grad;    // empty until backward first touches this tensor
  bool requires_grad = false;
};

template <typename Scalar>
class Tape;

template <typename Scalar>
class Tensor {
 public:
  using Storage = TensorStorage<Scalar>;
  using Flat = typename Storage::Flat;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    s_->shape = std::move(shape);
    s_->values = Flat::Zero(numel_of(s_->shape));
    s_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, Scalar v, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    t.s_->values.setConstant(v);
    return t;
  }

  static Tensor scalar(Scalar v) {
    Tensor t(Shape{});
    t.s_->values[0] = v;
    return t;
  }

  static Tensor from_flat(Shape shape, std::vector<Scalar> data,
                          bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    if (static_cast<Index>(data.size()) != t.numel())
      throw ShapeError("from_flat: " + std::to_string(data.size()) +
                       " values for shape " + shape_string(t.shape()));
    for (Index i = 0; i < t.numel(); ++i) t.s_->values[i] = data[i];
    return t;
  }

  template <typename Derived>
  static Tensor from_matrix(const Eigen::MatrixBase<Derived>& m,
                            bool requires_grad = false) {
    Tensor t(Shape{m.rows(), m.cols()}, requires_grad);
    t.mat() = m.template cast<Scalar>();
    return t;
  }

  template <typename Derived>
  static Tensor from_vector(const Eigen::MatrixBase<Derived>& v,
                            bool requires_grad = false) {
    Tensor t(Shape{v.size()}, requires_grad);
    for (Index i = 0; i < v.size(); ++i)
      t.s_->values[i] = static_cast<Scalar>(v[i]);
    return t;
  }

  static Tensor random_uniform(Shape shape, Scalar lo, Scalar hi, Rng& rng,
                               bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    for (Index i = 0; i < t.numel(); ++i)
      t.s_->values[i] = static_cast<Scalar>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor random_normal(Shape shape, Scalar mean, Scalar stddev, Rng& rng,
                              bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    for (Index i = 0; i < t.numel(); ++i)
      t.s_->values[i] = static_cast<Scalar>(rng.normal(mean, stddev));
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  Index rank() const { return static_cast<Index>(s_->shape.size()); }
  Index dim(Index i) const { return s_->shape[static_cast<size_t>(i)]; }
  Index numel() const { return s_->values.size(); }
  Index rows() const { return dim(0); }
  Index cols() const { return dim(1); }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    s_->requires_grad = rg;
    return *this;
  }

  Flat& values() { return s_->values; }
  const Flat& values() const { return s_->values; }

  // Gradient buffer; allocated zero on first access.
  Flat& grad() {
    if (s_->grad.size() == 0) s_->grad = Flat::Zero(numel());
    return s_->grad;
  }
  bool has_grad() const { return s_->grad.size() != 0; }
  void zero_grad() { s_->grad = Flat::Zero(numel()); }

  Eigen::Map<Mat> mat() {
    check_rank(2, "mat");
    return Eigen::Map<Mat>(s_->values.data(), dim(0), dim(1));
  }
  Eigen::Map<const Mat> mat() const {
    check_rank(2, "mat");
    return Eigen::Map<const Mat>(s_->values.data(), dim(0), dim(1));
  }
  Eigen::Map<Vec> vec() {
    check_rank(1, "vec");
    return Eigen::Map<Vec>(s_->values.data(), numel());
  }
  Eigen::Map<const Vec> vec() const {
    check_rank(1, "vec");
    return Eigen::Map<const Vec>(s_->values.data(), numel());
  }

  Scalar item() const {
    if (numel() != 1)
      throw ContractError("item: tensor " + shape_string(shape()) +
                          " is not a scalar");
    return s_->values[0];
  }

  Scalar at(Index i) const { return s_->values[i]; }
  Scalar at(Index i, Index j) const {
    check_rank(2, "at");
    return s_->values[i * dim(1) + j];
  }

  bool all_finite() const {
    return s_->values.isFinite().all();
  }

  // Value copy that does not participate in differentiation.
  Tensor detach() const {
    Tensor t(shape());
    t.s_->values = s_->values;
    return t;
  }

  std::shared_ptr<Storage> storage() const { return s_; }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  void check_rank(Index r, const char* what) const {
    if (rank() != r)
      throw ShapeError(std::string(what) + ": expected rank " +
                       std::to_string(r) + ", got " + shape_string(shape()));
  }

  std::shared_ptr<Storage> s_;
};

// ---------------------------------------------------------------------------
// Tape

template <typename Scalar>
class Tape {
 public:
  Tape() : prev_(current_ref()) { current_ref() = this; }
  ~Tape() { current_ref() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_ref(); }

  void record(std::shared_ptr<TensorStorage<Scalar>> out,
              std::function<void()> backprop) {
    if (consumed_)
      throw ContractError("tape: recording after backward (tapes are single-use)");
    out->requires_grad = true;
    nodes_.push_back(Node{std::move(out), std::move(backprop)});
  }

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Seeds d(loss)/d(loss) = 1 and sweeps the recorded nodes in reverse
  // topological order, accumulating gradients into every reachable tensor
  // that requires them. Consumes the tape.
  void backward(const Tensor<Scalar>& loss) {
    if (loss.numel() != 1)
      throw ContractError("backward: loss must be scalar, got " +
                          shape_string(loss.shape()));
    if (consumed_) throw ContractError("backward: tape already consumed");
    auto ls = loss.storage();
    if (ls->grad.size() == 0)
      ls->grad = TensorStorage<Scalar>::Flat::Zero(1);
    ls->grad[0] += Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out->grad.size() != 0) it->backprop();
    }
    nodes_.clear();
    consumed_ = true;
  }

 private:
  struct Node {
    std::shared_ptr<TensorStorage<Scalar>> out;
    std::function<void()> backprop;
  };

  static Tape*& current_ref() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
  bool consumed_ = false;
};

// Thread-local recording switch consulted by every op.
template <typename Scalar>
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

// Suspends recording on the current thread (evaluation passes, finite
// differences, optimizer updates).

template <typename Scalar>
class GradPause {
 public:
  GradPause() : prev_(grad_enabled_flag<Scalar>()) {
    grad_enabled_flag<Scalar>() = false;
  }
  ~GradPause() { grad_enabled_flag<Scalar>() = prev_; }

 private:
  bool prev_;
};

namespace detail {

template <typename Scalar>
inline Tape<Scalar>* active_tape(bool any_requires_grad) {
  if (!any_requires_grad) return nullptr;
  if (!grad_enabled_flag<Scalar>()) return nullptr;
  return Tape<Scalar>::current();
}

template <typename Scalar>
inline void check_finite(const char* op, const Tensor<Scalar>& t) {
  if (strict_numerics() && !t.all_finite())
    throw NumericError(std::string(op) + ": non-finite input value");
}

template <typename Scalar>
inline void accumulate(const std::shared_ptr<TensorStorage<Scalar>>& s,
                       const typename TensorStorage<Scalar>::Flat& g) {
  if (!s->requires_grad) return;
  if (s->grad.size() == 0)
    s->grad = TensorStorage<Scalar>::Flat::Zero(s->values.size());
  s->grad += g;
}

// Right-aligned broadcast strides: stride 0 where the parent dim is 1.
inline Shape broadcast_result(const char* op, const Shape& a, const Shape& b) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    Index da = i < a.size() ? a[a.size() - 1 - i] : 1;
    Index db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " +
                       shape_string(a) + " with " + shape_string(b));
    out[rank - 1 - i] = std::max(da, db);
  }
  return out;
}

// Strides of `parent` aligned into `out` (0 marks an expanded dimension).
inline std::vector<Index> aligned_strides(const Shape& parent, const Shape& out) {
  std::vector<Index> strides(out.size(), 0);
  Index run = 1;
  for (size_t i = 0; i < parent.size(); ++i) {
    size_t pd = parent.size() - 1 - i;
    size_t od = out.size() - 1 - i;
    strides[od] = (parent[pd] == 1) ? 0 : run;
    run *= parent[pd];
  }
  return strides;
}

// Walks out's elements in row-major order, handing (o, ia, ib) to fn.
template <typename Fn>
inline void broadcast_walk(const Shape& out, const std::vector<Index>& sa,
                           const std::vector<Index>& sb, Fn&& fn) {
  Index n = numel_of(out);
  size_t rank = out.size();
  if (rank == 0) {
    fn(0, 0, 0);
    return;
  }
  std::vector<Index> counter(rank, 0);
  Index ia = 0, ib = 0;
  for (Index o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (size_t d = rank; d-- > 0;) {
      counter[d]++;
      ia += sa[d];
      ib += sb[d];
      if (counter[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      counter[d] = 0;
    }
  }
}

template <typename Scalar, typename FwdFn, typename BwdA, typename BwdB>
Tensor<Scalar> binary_op(const char* name, const Tensor<Scalar>& a,
                         const Tensor<Scalar>& b, FwdFn fwd, BwdA dfa, BwdB dfb) {
  check_finite(name, a);
  check_finite(name, b);
  Shape oshape = broadcast_result(name, a.shape(), b.shape());
  Tensor<Scalar> out(oshape);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();

  if (a.shape() == b.shape()) {
    for (Index i = 0; i < ov.size(); ++i) ov[i] = fwd(av[i], bv[i]);
  } else {
    auto sa = aligned_strides(a.shape(), oshape);
    auto sb = aligned_strides(b.shape(), oshape);
    broadcast_walk(oshape, sa, sb, [&](Index o, Index ia, Index ib) {
      ov[o] = fwd(av[ia], bv[ib]);
    });
  }

  if (auto* tape = active_tape<Scalar>(a.requires_grad() || b.requires_grad())) {
    auto sa = aligned_strides(a.shape(), oshape);
    auto sb = aligned_strides(b.shape(), oshape);
    auto as = a.storage();
    auto bs = b.storage();
    auto os = out.storage();
    tape->record(os, [=]() {
      const auto& g = os->grad;
      using Flat = typename TensorStorage<Scalar>::Flat;
      Flat ga, gb;
      if (as->requires_grad) ga = Flat::Zero(as->values.size());
      if (bs->requires_grad) gb = Flat::Zero(bs->values.size());
      broadcast_walk(os->shape, sa, sb, [&](Index o, Index ia, Index ib) {
        if (as->requires_grad) ga[ia] += dfa(g[o], as->values[ia], bs->values[ib]);
        if (bs->requires_grad) gb[ib] += dfb(g[o], as->values[ia], bs->values[ib]);
      });
      if (as->requires_grad) accumulate(as, ga);
      if (bs->requires_grad) accumulate(bs, gb);
    });
  }
  return out;
}

template <typename Scalar, typename FwdFn, typename BwdFn>
Tensor<Scalar> unary_op(const char* name, const Tensor<Scalar>& x, FwdFn fwd,
                        BwdFn dfx) {
  check_finite(name, x);
  Tensor<Scalar> out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (Index i = 0; i < ov.size(); ++i) ov[i] = fwd(xv[i]);
  if (auto* tape = active_tape<Scalar>(x.requires_grad())) {
    auto xs = x.storage();
    auto os = out.storage();
    tape->record(os, [=]() {
      typename TensorStorage<Scalar>::Flat g(xs->values.size());
      for (Index i = 0; i < g.size(); ++i)
        g[i] = dfx(os->grad[i], xs->values[i], os->values[i]);
      accumulate(xs, g);
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary_op<Scalar>(
      "add", a, b, [](Scalar x, Scalar y) { return x + y; },
      [](Scalar g, Scalar, Scalar) { return g; },
      [](Scalar g, Scalar, Scalar) { return g; });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary_op<Scalar>(
      "sub", a, b, [](Scalar x, Scalar y) { return x - y; },
      [](Scalar g, Scalar, Scalar) { return g; },
      [](Scalar g, Scalar, Scalar) { return -g; });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary_op<Scalar>(
      "mul", a, b, [](Scalar x, Scalar y) { return x * y; },
      [](Scalar g, Scalar, Scalar y) { return g * y; },
      [](Scalar g, Scalar x, Scalar) { return g * x; });
}

template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return detail::binary_op<Scalar>(
      "div", a, b, [](Scalar x, Scalar y) { return x / y; },
      [](Scalar g, Scalar, Scalar y) { return g / y; },
      [](Scalar g, Scalar x, Scalar y) { return -g * x / (y * y); });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar c) {
  return detail::unary_op<Scalar>(
      "add_scalar", a, [c](Scalar x) { return x + c; },
      [](Scalar g, Scalar, Scalar) { return g; });
}

template <typename Scalar>
Tensor<Scalar> mul_scalar(const Tensor<Scalar>& a, Scalar c) {
  return detail::unary_op<Scalar>(
      "mul_scalar", a, [c](Scalar x) { return x * c; },
      [c](Scalar g, Scalar, Scalar) { return g * c; });
}

template <typename Scalar>
Tensor<Scalar> neg(const Tensor<Scalar>& a) {
  return mul_scalar(a, Scalar(-1));
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x) {
  return detail::unary_op<Scalar>(
      "tanh", x, [](Scalar v) { return std::tanh(v); },
      [](Scalar g, Scalar, Scalar y) { return g * (Scalar(1) - y * y); });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return detail::unary_op<Scalar>(
      "sigmoid", x,
      [](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); },
      [](Scalar g, Scalar, Scalar y) { return g * y * (Scalar(1) - y); });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  return detail::unary_op<Scalar>(
      "exp", x, [](Scalar v) { return std::exp(v); },
      [](Scalar g, Scalar, Scalar y) { return g * y; });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x) {
  return detail::unary_op<Scalar>(
      "log", x, [](Scalar v) { return std::log(v); },
      [](Scalar g, Scalar v, Scalar) { return g / v; });
}

template <typename Scalar>
Tensor<Scalar> sqrt(const Tensor<Scalar>& x) {
  return detail::unary_op<Scalar>(
      "sqrt", x, [](Scalar v) { return std::sqrt(v); },
      [](Scalar g, Scalar, Scalar y) { return g / (Scalar(2) * y); });
}

// Subgradient convention: pass-through inside [lo, hi], zero outside.
template <typename Scalar>
Tensor<Scalar> clamp(const Tensor<Scalar>& x, Scalar lo, Scalar hi) {
  return detail::unary_op<Scalar>(
      "clamp", x,
      [lo, hi](Scalar v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](Scalar g, Scalar v, Scalar) {
        return (v >= lo && v <= hi) ? g : Scalar(0);
      });
}

// PReLU with a single learnable slope (alpha is a one-element tensor).
template <typename Scalar>
Tensor<Scalar> prelu(const Tensor<Scalar>& x, const Tensor<Scalar>& alpha) {
  if (alpha.numel() != 1)
    throw ShapeError("prelu: slope must be a single parameter, got " +
                     shape_string(alpha.shape()));
  detail::check_finite("prelu", x);
  Scalar a = alpha.at(0);
  Tensor<Scalar> out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (Index i = 0; i < ov.size(); ++i)
    ov[i] = xv[i] > Scalar(0) ? xv[i] : a * xv[i];
  if (auto* tape = detail::active_tape<Scalar>(x.requires_grad() ||
                                               alpha.requires_grad())) {
    auto xs = x.storage(), as = alpha.storage(), os = out.storage();
    tape->record(os, [=]() {
      using Flat = typename TensorStorage<Scalar>::Flat;
      const auto& g = os->grad;
      Scalar slope = as->values[0];
      if (xs->requires_grad) {
        Flat gx(xs->values.size());
        for (Index i = 0; i < gx.size(); ++i)
          gx[i] = xs->values[i] > Scalar(0) ? g[i] : slope * g[i];
        detail::accumulate(xs, gx);
      }
      if (as->requires_grad) {
        Scalar ga = 0;
        for (Index i = 0; i < g.size(); ++i)
          if (xs->values[i] <= Scalar(0)) ga += g[i] * xs->values[i];
        Flat gaf(1);
        gaf[0] = ga;
        detail::accumulate(as, gaf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix primitives

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
    throw ShapeError("matmul: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  detail::check_finite("matmul", a);
  detail::check_finite("matmul", b);
  Tensor<Scalar> out(Shape{a.rows(), b.cols()});
  out.mat().noalias() = a.mat() * b.mat();
  if (auto* tape =
          detail::active_tape<Scalar>(a.requires_grad() || b.requires_grad())) {
    auto as = a.storage(), bs = b.storage(), os = out.storage();
    Index m = a.rows(), k = a.cols(), n = b.cols();
    tape->record(os, [=]() {
      using Mat = typename Tensor<Scalar>::Mat;
      Eigen::Map<const Mat> A(as->values.data(), m, k);
      Eigen::Map<const Mat> B(bs->values.data(), k, n);
      Eigen::Map<const Mat> G(os->grad.data(), m, n);
      if (as->requires_grad) {
        typename TensorStorage<Scalar>::Flat ga(m * k);
        Eigen::Map<Mat>(ga.data(), m, k).noalias() = G * B.transpose();
        detail::accumulate(as, ga);
      }
      if (bs->requires_grad) {
        typename TensorStorage<Scalar>::Flat gb(k * n);
        Eigen::Map<Mat>(gb.data(), k, n).noalias() = A.transpose() * G;
        detail::accumulate(bs, gb);
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  if (x.rank() != 2)
    throw ShapeError("transpose: expected rank 2, got " +
                     shape_string(x.shape()));
  Tensor<Scalar> out(Shape{x.cols(), x.rows()});
  out.mat() = x.mat().transpose();
  if (auto* tape = detail::active_tape<Scalar>(x.requires_grad())) {
    auto xs = x.storage(), os = out.storage();
    Index r = x.rows(), c = x.cols();
    tape->record(os, [=]() {
      using Mat = typename Tensor<Scalar>::Mat;
      Eigen::Map<const Mat> G(os->grad.data(), c, r);
      typename TensorStorage<Scalar>::Flat gx(r * c);
      Eigen::Map<Mat>(gx.data(), r, c) = G.transpose();
      detail::accumulate(xs, gx);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape: " + shape_string(x.shape()) + " to " +
                     shape_string(shape));
  Tensor<Scalar> out(shape);
  out.values() = x.values();
  if (auto* tape = detail::active_tape<Scalar>(x.requires_grad())) {
    auto xs = x.storage(), os = out.storage();
    tape->record(os, [=]() { detail::accumulate(xs, os->grad); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Slicing and joining

template <typename Scalar>
Tensor<Scalar> rows(const Tensor<Scalar>& x, Index i0, Index n) {
  if (x.rank() != 2 || i0 < 0 || i0 + n > x.rows())
    throw ShapeError("rows: [" + std::to_string(i0) + ", " +
                     std::to_string(i0 + n) + ") of " + shape_string(x.shape()));
  Tensor<Scalar> out(Shape{n, x.cols()});
  out.mat() = x.mat().middleRows(i0, n);
  if (auto* tape = detail::active_tape<Scalar>(x.requires_grad())) {
    auto xs = x.storage(), os = out.storage();
    Index r = x.rows(), c = x.cols();
    tape->record(os, [=]() {
      using Mat = typename Tensor<Scalar>::Mat;
      typename TensorStorage<Scalar>::Flat gx =
          TensorStorage<Scalar>::Flat::Zero(r * c);
      Eigen::Map<Mat>(gx.data(), r, c).middleRows(i0, n) =
          Eigen::Map<const Mat>(os->grad.data(), n, c);
      detail::accumulate(xs, gx);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> cols(const Tensor<Scalar>& x, Index j0, Index n) {
  if (x.rank() != 2 || j0 < 0 || j0 + n > x.cols())
    throw ShapeError("cols: [" + std::to_string(j0) + ", " +
                     std::to_string(j0 + n) + ") of " + shape_string(x.shape()));
  Tensor<Scalar> out(Shape{x.rows(), n});
  out.mat() = x.mat().middleCols(j0, n);
  if (auto* tape = detail::active_tape<Scalar>(x.requires_grad())) {
    auto xs = x.storage(), os = out.storage();
    Index r = x.rows(), c = x.cols();
    tape->record(os, [=]() {
      using Mat = typename Tensor<Scalar>::Mat;
      typename TensorStorage<Scalar>::Flat gx =
          TensorStorage<Scalar>::Flat::Zero(r * c);
      Eigen::Map<Mat>(gx.data(), r, c).middleCols(j0, n) =
          Eigen::Map<const Mat>(os->grad.data(), r, n);
      detail::accumulate(xs, gx);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> row(const Tensor<Scalar>& x, Index i) {
  return reshape(rows(x, i, 1), Shape{x.cols()});
}

// Picks x[i, idx[i]] for every row; used by the cross-entropy path.
template <typename Scalar>
Tensor<Scalar> take_rowwise(const Tensor<Scalar>& x,
                            const std::vector<Index>& idx) {
  if (x.rank() != 2 || static_cast<Index>(idx.size()) != x.rows())
    throw ShapeError("take_rowwise: " + std::to_string(idx.size()) +
                     " indices for " + shape_string(x.shape()));
  for (Index i = 0; i < x.rows(); ++i)
    if (idx[static_cast<size_t>(i)] < 0 || idx[static_cast<size_t>(i)] >= x.cols())
      throw ShapeError("take_rowwise: index out of range");
  Tensor<Scalar> out(Shape{x.rows()});
  for (Index i = 0; i < x.rows(); ++i)
    out.values()[i] = x.at(i, idx[static_cast<size_t>(i)]);
  if (auto* tape = detail::active_tape<Scalar>(x.requires_grad())) {
    auto xs = x.storage(), os = out.storage();
    Index c = x.cols();
    auto indices = idx;
    tape->record(os, [=]() {
      typename TensorStorage<Scalar>::Flat gx =
          TensorStorage<Scalar>::Flat::Zero(xs->values.size());
      for (size_t i = 0; i < indices.size(); ++i)
        gx[static_cast<Index>(i) * c + indices[i]] += os->grad[static_cast<Index>(i)];
      detail::accumulate(xs, gx);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Index rank = parts[0].rank();
  if (rank == 1) {
    if (axis != 0) throw ShapeError("concat: rank-1 tensors join on axis 0");
    Index total = 0;
    for (const auto& p : parts) {
      if (p.rank() != 1) throw ShapeError("concat: mixed ranks");
      total += p.numel();
    }
    Tensor<Scalar> out(Shape{total});
    Index off = 0;
    for (const auto& p : parts) {
      out.values().segment(off, p.numel()) = p.values();
      off += p.numel();
    }
    bool rg = false;
    for (const auto& p : parts) rg |= p.requires_grad();
    if (auto* tape = detail::active_tape<Scalar>(rg)) {
      std::vector<std::shared_ptr<TensorStorage<Scalar>>> ps;
      for (const auto& p : parts) ps.push_back(p.storage());
      auto os = out.storage();
      tape->record(os, [=]() {
        Index o = 0;
        for (const auto& p : ps) {
          detail::accumulate(p, os->grad.segment(o, p->values.size()).eval());
          o += p->values.size();
        }
      });
    }
    return out;
  }
  if (rank != 2 || (axis != 0 && axis != 1))
    throw ShapeError("concat: rank-2 tensors, axis 0 or 1");
  Index fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || (axis == 0 ? p.cols() : p.rows()) != fixed)
      throw ShapeError("concat: incompatible part " + shape_string(p.shape()));
    total += axis == 0 ? p.rows() : p.cols();
  }
  Shape oshape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
  Tensor<Scalar> out(oshape);
  Index off = 0;
  for (const auto& p : parts) {
    if (axis == 0) {
      out.mat().middleRows(off, p.rows()) = p.mat();
      off += p.rows();
    } else {
      out.mat().middleCols(off, p.cols()) = p.mat();
      off += p.cols();
    }
  }
  bool rg = false;
  for (const auto& p : parts) rg |= p.requires_grad();
  if (auto* tape = detail::active_tape<Scalar>(rg)) {
    std::vector<std::shared_ptr<TensorStorage<Scalar>>> ps;
    std::vector<Index> sizes;
    for (const auto& p : parts) {
      ps.push_back(p.storage());
      sizes.push_back(axis == 0 ? p.rows() : p.cols());
    }
    auto os = out.storage();
    Index orows = oshape[0], ocols = oshape[1];
    tape->record(os, [=]() {
      using Mat = typename Tensor<Scalar>::Mat;
      Eigen::Map<const Mat> G(os->grad.data(), orows, ocols);
      Index o = 0;
      for (size_t i = 0; i < ps.size(); ++i) {
        const auto& p = ps[i];
        if (!p->requires_grad) {
          o += sizes[i];
          continue;
        }
        typename TensorStorage<Scalar>::Flat gp(p->values.size());
        if (axis == 0) {
          Eigen::Map<Mat>(gp.data(), sizes[i], ocols) = G.middleRows(o, sizes[i]);
        } else {
          Eigen::Map<Mat>(gp.data(), orows, sizes[i]) = G.middleCols(o, sizes[i]);
        }
        detail::accumulate(p, gp);
        o += sizes[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  detail::check_finite("sum", x);
  Tensor<Scalar> out = Tensor<Scalar>::scalar(x.values().sum());
  if (auto* tape = detail::active_tape<Scalar>(x.requires_grad())) {
    auto xs = x.storage(), os = out.storage();
    tape->record(os, [=]() {
      detail::accumulate(
          xs, TensorStorage<Scalar>::Flat::Constant(xs->values.size(),
                                                    os->grad[0]));
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return mul_scalar(sum(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

// axis 0 collapses rows, axis 1 collapses columns. keepdim keeps a size-1
// dimension so the result broadcasts back against x.
template <typename Scalar>
Tensor<Scalar> sum_axis(const Tensor<Scalar>& x, Index axis, bool keepdim) {
  if (x.rank() != 2 || (axis != 0 && axis != 1))
    throw ShapeError("sum_axis: rank-2 input required, got " +
                     shape_string(x.shape()));
  detail::check_finite("sum_axis", x);
  Index r = x.rows(), c = x.cols();
  Shape oshape = axis == 0 ? (keepdim ? Shape{1, c} : Shape{c})
                           : (keepdim ? Shape{r, 1} : Shape{r});
  Tensor<Scalar> out(oshape);
  using Vec = typename Tensor<Scalar>::Vec;
  if (axis == 0)
    Eigen::Map<Vec>(out.values().data(), c) = x.mat().colwise().sum();
  else
    Eigen::Map<Vec>(out.values().data(), r) = x.mat().rowwise().sum();
  if (auto* tape = detail::active_tape<Scalar>(x.requires_grad())) {
    auto xs = x.storage(), os = out.storage();
    tape->record(os, [=]() {
      using Mat = typename Tensor<Scalar>::Mat;
      typename TensorStorage<Scalar>::Flat gx(r * c);
      Eigen::Map<Mat> GX(gx.data(), r, c);
      if (axis == 0)
        GX = Eigen::Map<const Vec>(os->grad.data(), c).transpose().replicate(r, 1);
      else
        GX = Eigen::Map<const Vec>(os->grad.data(), r).replicate(1, c);
      detail::accumulate(xs, gx);
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mean_axis(const Tensor<Scalar>& x, Index axis, bool keepdim) {
  Scalar n = static_cast<Scalar>(axis == 0 ? x.rows() : x.cols());
  return mul_scalar(sum_axis(x, axis, keepdim), Scalar(1) / n);
}

// ---------------------------------------------------------------------------
// Softmax over the trailing dimension

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x) {
  if (x.rank() != 1 && x.rank() != 2)
    throw ShapeError("softmax: rank-1 or rank-2 input, got " +
                     shape_string(x.shape()));
  detail::check_finite("softmax", x);
  Index r = x.rank() == 2 ? x.rows() : 1;
  Index c = x.rank() == 2 ? x.cols() : x.numel();
  Tensor<Scalar> out(x.shape());
  using Mat = typename Tensor<Scalar>::Mat;
  Eigen::Map<const Mat> X(x.values().data(), r, c);
  Eigen::Map<Mat> Y(out.values().data(), r, c);
  for (Index i = 0; i < r; ++i) {
    Scalar mx = X.row(i).maxCoeff();
    Y.row(i) = (X.row(i).array() - mx).exp();
    Y.row(i) /= Y.row(i).sum();
  }
  if (auto* tape = detail::active_tape<Scalar>(x.requires_grad())) {
    auto xs = x.storage(), os = out.storage();
    tape->record(os, [=]() {
      Eigen::Map<const Mat> Yv(os->values.data(), r, c);
      Eigen::Map<const Mat> G(os->grad.data(), r, c);
      typename TensorStorage<Scalar>::Flat gx(r * c);
      Eigen::Map<Mat> GX(gx.data(), r, c);
      for (Index i = 0; i < r; ++i) {
        Scalar dot = (G.row(i).array() * Yv.row(i).array()).sum();
        GX.row(i) = Yv.row(i).array() * (G.row(i).array() - dot);
      }
      detail::accumulate(xs, gx);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Waveform convolutions (encoder / decoder pair)

// Strided 1-D convolution of a single-channel signal with `channels` kernels:
// out[t, c] = sum_k signal[t*stride + k] * kernel[c, k].
template <typename Scalar>
Tensor<Scalar> conv1d(const Tensor<Scalar>& signal, const Tensor<Scalar>& kernel,
                      Index stride) {
  if (signal.rank() != 1 || kernel.rank() != 2)
    throw ShapeError("conv1d: " + shape_string(signal.shape()) + " vs " +
                     shape_string(kernel.shape()));
  Index n = signal.numel(), K = kernel.cols(), C = kernel.rows();
  if (n < K)
    throw DataError("conv1d: signal length " + std::to_string(n) +
                    " shorter than kernel " + std::to_string(K) +
                    "; pad or reject shorter inputs");
  detail::check_finite("conv1d", signal);
  detail::check_finite("conv1d", kernel);
  Index T = 1 + (n - K) / stride;
  using Mat = typename Tensor<Scalar>::Mat;
  Mat frames(T, K);
  for (Index t = 0; t < T; ++t)
    frames.row(t) =
        Eigen::Map<const typename Tensor<Scalar>::Vec>(
            signal.values().data() + t * stride, K)
            .transpose();
  Tensor<Scalar> out(Shape{T, C});
  out.mat().noalias() = frames * kernel.mat().transpose();
  if (auto* tape = detail::active_tape<Scalar>(signal.requires_grad() ||
                                               kernel.requires_grad())) {
    auto ss = signal.storage(), ks = kernel.storage(), os = out.storage();
    tape->record(os, [=]() {
      Eigen::Map<const Mat> G(os->grad.data(), T, C);
      Eigen::Map<const Mat> W(ks->values.data(), C, K);
      if (ks->requires_grad) {
        Mat fr(T, K);
        for (Index t = 0; t < T; ++t)
          fr.row(t) = Eigen::Map<const typename Tensor<Scalar>::Vec>(
                          ss->values.data() + t * stride, K)
                          .transpose();
        typename TensorStorage<Scalar>::Flat gk(C * K);
        Eigen::Map<Mat>(gk.data(), C, K).noalias() = G.transpose() * fr;
        detail::accumulate(ks, gk);
      }
      if (ss->requires_grad) {
        Mat gframes = G * W;  // [T x K]
        typename TensorStorage<Scalar>::Flat gs =
            TensorStorage<Scalar>::Flat::Zero(n);
        for (Index t = 0; t < T; ++t)
          for (Index k = 0; k < K; ++k) gs[t * stride + k] += gframes(t, k);
        detail::accumulate(ss, gs);
      }
    });
  }
  return out;
}

// Transposed counterpart: overlap-add synthesis back to one channel.
// out[t*stride + k] += sum_c latent[t, c] * kernel[c, k]; length (T-1)*stride+K.
template <typename Scalar>
Tensor<Scalar> conv_transpose1d(const Tensor<Scalar>& latent,
                                const Tensor<Scalar>& kernel, Index stride) {
  if (latent.rank() != 2 || kernel.rank() != 2 || latent.cols() != kernel.rows())
    throw ShapeError("conv_transpose1d: " + shape_string(latent.shape()) +
                     " vs " + shape_string(kernel.shape()));
  detail::check_finite("conv_transpose1d", latent);
  detail::check_finite("conv_transpose1d", kernel);
  Index T = latent.rows(), C = latent.cols(), K = kernel.cols();
  Index n = (T - 1) * stride + K;
  using Mat = typename Tensor<Scalar>::Mat;
  Mat frames = latent.mat() * kernel.mat();  // [T x K]
  Tensor<Scalar> out(Shape{n});
  auto& ov = out.values();
  for (Index t = 0; t < T; ++t)
    for (Index k = 0; k < K; ++k) ov[t * stride + k] += frames(t, k);
  if (auto* tape = detail::active_tape<Scalar>(latent.requires_grad() ||
                                               kernel.requires_grad())) {
    auto ls = latent.storage(), ks = kernel.storage(), os = out.storage();
    tape->record(os, [=]() {
      Mat gframes(T, K);
      for (Index t = 0; t < T; ++t)
        gframes.row(t) = Eigen::Map<const typename Tensor<Scalar>::Vec>(
                             os->grad.data() + t * stride, K)
                             .transpose();
      Eigen::Map<const Mat> W(ks->values.data(), C, K);
      if (ls->requires_grad) {
        typename TensorStorage<Scalar>::Flat gl(T * C);
        Eigen::Map<Mat>(gl.data(), T, C).noalias() = gframes * W.transpose();
        detail::accumulate(ls, gl);
      }
      if (ks->requires_grad) {
        Eigen::Map<const Mat> X(ls->values.data(), T, C);
        typename TensorStorage<Scalar>::Flat gk(C * K);
        Eigen::Map<Mat>(gk.data(), C, K).noalias() = X.transpose() * gframes;
        detail::accumulate(ks, gk);
      }
    });
  }
  return out;
}

// Per-channel dilated convolution over a [T x C] sequence with zero 'same'
// padding: out[t, c] = sum_k x[t + (k - K/2)*dilation, c] * kernel[c, k].
template <typename Scalar>
Tensor<Scalar> depthwise_conv1d(const Tensor<Scalar>& x,
                                const Tensor<Scalar>& kernel, Index dilation) {
  if (x.rank() != 2 || kernel.rank() != 2 || x.cols() != kernel.rows())
    throw ShapeError("depthwise_conv1d: " + shape_string(x.shape()) + " vs " +
                     shape_string(kernel.shape()));
  detail::check_finite("depthwise_conv1d", x);
  Index T = x.rows(), C = x.cols(), K = kernel.cols();
  Index center = K / 2;
  Tensor<Scalar> out(Shape{T, C});
  auto X = x.mat();
  auto W = kernel.mat();
  auto Y = out.mat();
  Y.setZero();
  for (Index k = 0; k < K; ++k) {
    Index off = (k - center) * dilation;
    Index t0 = std::max<Index>(0, -off), t1 = std::min<Index>(T, T - off);
    for (Index t = t0; t < t1; ++t)
      Y.row(t).array() += X.row(t + off).array() * W.col(k).transpose().array();
  }
  if (auto* tape = detail::active_tape<Scalar>(x.requires_grad() ||
                                               kernel.requires_grad())) {
    auto xs = x.storage(), ks = kernel.storage(), os = out.storage();
    tape->record(os, [=]() {
      using Mat = typename Tensor<Scalar>::Mat;
      Eigen::Map<const Mat> G(os->grad.data(), T, C);
      Eigen::Map<const Mat> Xv(xs->values.data(), T, C);
      Eigen::Map<const Mat> Wv(ks->values.data(), C, K);
      if (xs->requires_grad) {
        typename TensorStorage<Scalar>::Flat gx =
            TensorStorage<Scalar>::Flat::Zero(T * C);
        Eigen::Map<Mat> GX(gx.data(), T, C);
        for (Index k = 0; k < K; ++k) {
          Index off = (k - center) * dilation;
          Index t0 = std::max<Index>(0, -off), t1 = std::min<Index>(T, T - off);
          for (Index t = t0; t < t1; ++t)
            GX.row(t + off).array() +=
                G.row(t).array() * Wv.col(k).transpose().array();
        }
        detail::accumulate(xs, gx);
      }
      if (ks->requires_grad) {
        typename TensorStorage<Scalar>::Flat gk =
            TensorStorage<Scalar>::Flat::Zero(C * K);
        Eigen::Map<Mat> GK(gk.data(), C, K);
        for (Index k = 0; k < K; ++k) {
          Index off = (k - center) * dilation;
          Index t0 = std::max<Index>(0, -off), t1 = std::min<Index>(T, T - off);
          for (Index t = t0; t < t1; ++t)
            GK.col(k).array() +=
                (G.row(t).array() * Xv.row(t + off).array()).transpose();
        }
        detail::accumulate(ks, gk);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Operators

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return mul(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return div(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, Scalar c) {
  return add_scalar(a, c);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, Scalar c) {
  return add_scalar(a, -c);
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar c) {
  return mul_scalar(a, c);
}
template <typename Scalar>
Tensor<Scalar> operator*(Scalar c, const Tensor<Scalar>& a) {
  return mul_scalar(a, c);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a) {
  return neg(a);
}

// ---------------------------------------------------------------------------
// Composite blocks (differentiable through the primitives above)

// One LSTM step. Gate layout along the 4H axis: input, forget, cell, output.
template <typename Scalar>
struct LstmState {
  Tensor<Scalar> h;
  Tensor<Scalar> c;
};

template <typename Scalar>
LstmState<Scalar> lstm_cell(const Tensor<Scalar>& x, const LstmState<Scalar>& state,
                            const Tensor<Scalar>& w_ih, const Tensor<Scalar>& w_hh,
                            const Tensor<Scalar>& b_ih, const Tensor<Scalar>& b_hh) {
  if (x.rank() != 2)
    throw ShapeError("lstm_cell: input must be [batch x features], got " +
                     shape_string(x.shape()));
  Index H = w_hh.cols();
  Tensor<Scalar> gates =
      add(add(matmul(x, transpose(w_ih)), matmul(state.h, transpose(w_hh))),
          add(b_ih, b_hh));
  Tensor<Scalar> i = sigmoid(cols(gates, 0, H));
  Tensor<Scalar> f = sigmoid(cols(gates, H, H));
  Tensor<Scalar> g = tanh(cols(gates, 2 * H, H));
  Tensor<Scalar> o = sigmoid(cols(gates, 3 * H, H));
  Tensor<Scalar> c = add(mul(f, state.c), mul(i, g));
  Tensor<Scalar> h = mul(o, tanh(c));
  return {h, c};
}

// Per-row layer normalization with learnable gain/bias over the last axis.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  Tensor<Scalar> mu = mean_axis(x, 1, true);
  Tensor<Scalar> xc = sub(x, mu);
  Tensor<Scalar> var = mean_axis(mul(xc, xc), 1, true);
  Tensor<Scalar> norm = div(xc, sqrt(add_scalar(var, eps)));
  return add(mul(norm, gain), bias);
}

// Rows scaled to unit L2 norm. Rows whose norm falls below `tiny` cannot be
// normalized meaningfully and raise a degenerate-norm error.
template <typename Scalar>
Tensor<Scalar> l2_normalize_rows(const Tensor<Scalar>& x,
                                 Scalar tiny = Scalar(1e-12)) {
  if (x.rank() != 2)
    throw ShapeError("l2_normalize_rows: rank-2 input required, got " +
                     shape_string(x.shape()));
  Tensor<Scalar> sq = sum_axis(mul(x, x), 1, true);
  for (Index i = 0; i < sq.numel(); ++i)
    if (!(sq.at(i) > tiny))
      throw NumericError("l2_normalize_rows: row " + std::to_string(i) +
                         " has degenerate norm");
  return div(x, sqrt(sq));
}

// Mean softmax cross-entropy of row logits against integer targets.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits,
                             const std::vector<Index>& targets) {
  Tensor<Scalar> p = softmax(logits);
  Tensor<Scalar> picked = take_rowwise(p, targets);
  return neg(mean(log(picked)));
}

}  // namespace tss
