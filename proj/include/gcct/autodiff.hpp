// Reverse-mode autodiff over Tensor<T>. Backward functions are written in
// terms of the public ops, so running a backward pass with grad mode enabled
// produces a differentiable graph again (gradients of gradients).
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gcct/gemm.hpp"
#include "gcct/tensor.hpp"

namespace gcct {

struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// RAII switch; NoGradGuard detaches everything built in its scope.
class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : prev_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = enabled;
  }
  ~GradModeGuard() { detail::grad_mode_flag() = prev_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool prev_;
};

struct NoGradGuard : GradModeGuard {
  NoGradGuard() : GradModeGuard(false) {}
};

template <typename T>
class Var;

template <typename T>
struct Node {
  Tensor<T> value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Var<T>> parents;
  // Maps upstream gradient to per-parent gradients (undefined Var = no grad).
  std::function<std::vector<Var<T>>(const Var<T>& grad_out, const Var<T>& self)> backward;
};

template <typename T>
class Var {
 public:
  Var() = default;

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    Var v;
    v.n_ = std::make_shared<Node<T>>();
    v.n_->value = std::move(value);
    v.n_->requires_grad = requires_grad;
    return v;
  }

  static Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  bool defined() const { return n_ != nullptr; }
  const Tensor<T>& val() const { return n_->value; }
  Tensor<T>& mutable_val() { return n_->value; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  Node<T>* node() const { return n_.get(); }
  std::shared_ptr<Node<T>> node_ptr() const { return n_; }

  const std::vector<int>& shape() const { return n_->value.shape(); }

  Var detach() const {
    Var v;
    v.n_ = std::make_shared<Node<T>>();
    v.n_->value = n_->value;  // shares storage
    v.n_->requires_grad = false;
    return v;
  }

  static Var from_node(std::shared_ptr<Node<T>> n) {
    Var v;
    v.n_ = std::move(n);
    return v;
  }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents, const char* op,
               std::function<std::vector<Var<T>>(const Var<T>&, const Var<T>&)> backward) {
  bool req = false;
  if (grad_enabled()) {
    for (const auto& p : parents)
      if (p.requires_grad()) {
        req = true;
        break;
      }
  }
  if (!req) return Var<T>::constant(std::move(value));
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->op = op;
  n->parents = std::move(parents);
  n->backward = std::move(backward);
  return Var<T>::from_node(std::move(n));
}

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

inline std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t r = std::max(a.size(), b.size());
  std::vector<int> out(r);
  for (size_t i = 0; i < r; ++i) {
    const int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw shape_error("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

namespace detail {

inline std::vector<std::int64_t> broadcast_strides(const std::vector<int>& shape,
                                                   const std::vector<int>& out) {
  const size_t r = out.size();
  const size_t off = r - shape.size();
  std::vector<std::int64_t> strides(r, 0);
  std::int64_t s = 1;
  for (size_t i = shape.size(); i-- > 0;) {
    if (shape[i] != 1) strides[off + i] = s;
    s *= shape[i];
  }
  // broadcast dims keep stride 0
  for (size_t i = 0; i < r; ++i) {
    const int d = i < off ? 1 : shape[i - off];
    if (d == 1 && out[i] != 1) strides[i] = 0;
  }
  return strides;
}

template <typename T, typename F>
Tensor<T> ew_binary(const Tensor<T>& a, const Tensor<T>& b, F f) {
  if (a.same_shape(b)) {  // fast path
    Tensor<T> out(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  const auto os = broadcast_shape(a.shape(), b.shape());
  Tensor<T> out(os);
  const auto sa = broadcast_strides(a.shape(), os);
  const auto sb = broadcast_strides(b.shape(), os);
  const size_t r = os.size();
  std::vector<std::int64_t> idx(r, 0);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    po[i] = f(pa[oa], pb[ob]);
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < os[d]) break;
      idx[d] = 0;
      oa -= sa[d] * os[d];
      ob -= sb[d] * os[d];
    }
  }
  return out;
}

template <typename T, typename F>
Tensor<T> ew_unary(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  const T* pa = a.data();
  T* po = out.data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  return out;
}

}  // namespace detail

// forward declarations for ops used inside backward lambdas
template <typename T> Var<T> add(const Var<T>&, const Var<T>&);
template <typename T> Var<T> sub(const Var<T>&, const Var<T>&);
template <typename T> Var<T> mul(const Var<T>&, const Var<T>&);
template <typename T> Var<T> div(const Var<T>&, const Var<T>&);
template <typename T> Var<T> safe_div(const Var<T>&, const Var<T>&);
template <typename T> Var<T> neg(const Var<T>&);
template <typename T> Var<T> scale(const Var<T>&, T);
template <typename T> Var<T> sum(const Var<T>&, std::vector<int>, bool = false);
template <typename T> Var<T> broadcast_to(const Var<T>&, std::vector<int>);
template <typename T> Var<T> reshape(const Var<T>&, std::vector<int>);
template <typename T> Var<T> reduce_to(const Var<T>&, const std::vector<int>&);

// ---------------------------------------------------------------------------
// elementwise binary ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto value = detail::ew_binary<T>(a.val(), b.val(), [](T x, T y) { return x + y; });
  return make_op<T>(std::move(value), {a, b}, "add",
                    [](const Var<T>& g, const Var<T>& self) -> std::vector<Var<T>> {
                      const auto& ps = self.node()->parents;
                      return {reduce_to(g, ps[0].shape()), reduce_to(g, ps[1].shape())};
                    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto value = detail::ew_binary<T>(a.val(), b.val(), [](T x, T y) { return x - y; });
  return make_op<T>(std::move(value), {a, b}, "sub",
                    [](const Var<T>& g, const Var<T>& self) -> std::vector<Var<T>> {
                      const auto& ps = self.node()->parents;
                      return {reduce_to(g, ps[0].shape()), reduce_to(neg(g), ps[1].shape())};
                    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto value = detail::ew_binary<T>(a.val(), b.val(), [](T x, T y) { return x * y; });
  return make_op<T>(std::move(value), {a, b}, "mul",
                    [](const Var<T>& g, const Var<T>& self) -> std::vector<Var<T>> {
                      const auto& ps = self.node()->parents;
                      return {reduce_to(mul(g, ps[1]), ps[0].shape()),
                              reduce_to(mul(g, ps[0]), ps[1].shape())};
                    });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  auto value = detail::ew_binary<T>(a.val(), b.val(), [](T x, T y) { return x / y; });
  return make_op<T>(std::move(value), {a, b}, "div",
                    [](const Var<T>& g, const Var<T>& self) -> std::vector<Var<T>> {
                      const auto& ps = self.node()->parents;
                      auto ga = reduce_to(div(g, ps[1]), ps[0].shape());
                      auto gb = reduce_to(neg(div(mul(g, self), ps[1])), ps[1].shape());
                      return {ga, gb};
                    });
}

// a/b where b > 0, exactly 0 where b == 0 (used by CAM normalization).
template <typename T>
Var<T> safe_div(const Var<T>& a, const Var<T>& b) {
  auto value =
      detail::ew_binary<T>(a.val(), b.val(), [](T x, T y) { return y > T(0) ? x / y : T(0); });
  return make_op<T>(std::move(value), {a, b}, "safe_div",
                    [](const Var<T>& g, const Var<T>& self) -> std::vector<Var<T>> {
                      const auto& ps = self.node()->parents;
                      auto ga = reduce_to(safe_div(g, ps[1]), ps[0].shape());
                      auto gb = reduce_to(neg(safe_div(mul(g, self), ps[1])), ps[1].shape());
                      return {ga, gb};
                    });
}

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> neg(const Var<T>& a) {
  return make_op<T>(detail::ew_unary<T>(a.val(), [](T x) { return -x; }), {a}, "neg",
                    [](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {neg(g)};
                    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T c) {
  return make_op<T>(detail::ew_unary<T>(a.val(), [c](T x) { return x * c; }), {a}, "scale",
                    [c](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {scale(g, c)};
                    });
}

template <typename T>
Var<T> add_const(const Var<T>& a, T c) {
  return make_op<T>(detail::ew_unary<T>(a.val(), [c](T x) { return x + c; }), {a}, "add_const",
                    [](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {g};
                    });
}

// gradient masked by a fixed 0/1 tensor; backbone of relu/clamp backward
template <typename T>
Var<T> mul_mask(const Var<T>& a, Tensor<T> mask) {
  auto value = detail::ew_binary<T>(a.val(), mask, [](T x, T m) { return x * m; });
  return make_op<T>(std::move(value), {a}, "mul_mask",
                    [mask](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {mul_mask(g, mask)};
                    });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> mask(a.shape());
  Tensor<T> value(a.shape());
  const T* pa = a.val().data();
  T* pm = mask.data();
  T* pv = value.data();
  for (std::int64_t i = 0; i < a.val().numel(); ++i) {
    const bool pos = pa[i] > T(0);
    pm[i] = pos ? T(1) : T(0);
    pv[i] = pos ? pa[i] : T(0);
  }
  return make_op<T>(std::move(value), {a}, "relu",
                    [mask](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {mul_mask(g, mask)};
                    });
}

// max(x, c); gradient passes where x > c
template <typename T>
Var<T> clamp_min(const Var<T>& a, T c) {
  Tensor<T> mask(a.shape());
  Tensor<T> value(a.shape());
  const T* pa = a.val().data();
  T* pm = mask.data();
  T* pv = value.data();
  for (std::int64_t i = 0; i < a.val().numel(); ++i) {
    const bool above = pa[i] > c;
    pm[i] = above ? T(1) : T(0);
    pv[i] = above ? pa[i] : c;
  }
  return make_op<T>(std::move(value), {a}, "clamp_min",
                    [mask](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {mul_mask(g, mask)};
                    });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  return make_op<T>(detail::ew_unary<T>(a.val(), [](T x) { return std::exp(x); }), {a}, "exp",
                    [](const Var<T>& g, const Var<T>& self) -> std::vector<Var<T>> {
                      return {mul(g, self)};
                    });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  return make_op<T>(detail::ew_unary<T>(a.val(), [](T x) { return std::log(x); }), {a}, "log",
                    [](const Var<T>& g, const Var<T>& self) -> std::vector<Var<T>> {
                      return {div(g, self.node()->parents[0])};
                    });
}

template <typename T>
Var<T> sqrt(const Var<T>& a) {
  return make_op<T>(detail::ew_unary<T>(a.val(), [](T x) { return std::sqrt(x); }), {a}, "sqrt",
                    [](const Var<T>& g, const Var<T>& self) -> std::vector<Var<T>> {
                      return {div(scale(g, T(0.5)), self)};
                    });
}

template <typename T>
Var<T> rsqrt(const Var<T>& a) {
  return make_op<T>(detail::ew_unary<T>(a.val(), [](T x) { return T(1) / std::sqrt(x); }), {a},
                    "rsqrt", [](const Var<T>& g, const Var<T>& self) -> std::vector<Var<T>> {
                      // d(x^-1/2)/dx = -1/2 x^-3/2 = -1/2 self^3
                      return {scale(mul(g, mul(self, mul(self, self))), T(-0.5))};
                    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
  auto in_shape = a.shape();
  return make_op<T>(a.val().reshaped(std::move(shape)), {a}, "reshape",
                    [in_shape](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {reshape(g, in_shape)};
                    });
}

template <typename T>
Var<T> broadcast_to(const Var<T>& a, std::vector<int> shape) {
  if (a.shape() == shape) return a;
  const auto check = broadcast_shape(a.shape(), shape);
  if (check != shape)
    throw shape_error("broadcast_to: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto value = detail::ew_binary<T>(a.val(), Tensor<T>::zeros(shape), [](T x, T) { return x; });
  auto in_shape = a.shape();
  return make_op<T>(std::move(value), {a}, "broadcast_to",
                    [in_shape](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {reduce_to(g, in_shape)};
                    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

namespace detail {
inline std::vector<int> reduced_shape(const std::vector<int>& in, const std::vector<int>& axes,
                                      bool keepdims) {
  std::vector<bool> red(in.size(), false);
  for (int a : axes) {
    if (a < 0 || a >= static_cast<int>(in.size())) throw shape_error("reduce: bad axis");
    red[static_cast<size_t>(a)] = true;
  }
  std::vector<int> out;
  for (size_t i = 0; i < in.size(); ++i) {
    if (red[i]) {
      if (keepdims) out.push_back(1);
    } else {
      out.push_back(in[i]);
    }
  }
  if (out.empty()) out.push_back(1);
  return out;
}

// per-input-element output offset iteration (reduced dims have stride 0)
template <typename T, typename Acc>
void reduce_iterate(const Tensor<T>& in, const std::vector<int>& axes, Tensor<T>& out, Acc acc) {
  const auto& is = in.shape();
  std::vector<bool> red(is.size(), false);
  for (int a : axes) red[static_cast<size_t>(a)] = true;
  std::vector<std::int64_t> ostride(is.size(), 0);
  std::int64_t s = 1;
  for (size_t i = is.size(); i-- > 0;) {
    if (!red[i]) {
      ostride[i] = s;
      s *= is[i];
    }
  }
  std::vector<std::int64_t> idx(is.size(), 0);
  std::int64_t off = 0;
  const T* pi = in.data();
  for (std::int64_t i = 0; i < in.numel(); ++i) {
    acc(out.data()[off], pi[i], i);
    for (size_t d = is.size(); d-- > 0;) {
      ++idx[d];
      off += ostride[d];
      if (idx[d] < is[d]) break;
      idx[d] = 0;
      off -= ostride[d] * is[d];
    }
  }
}
}  // namespace detail

template <typename T>
Var<T> sum(const Var<T>& a, std::vector<int> axes, bool keepdims) {
  const auto out_shape = detail::reduced_shape(a.shape(), axes, keepdims);
  const auto keep_shape = detail::reduced_shape(a.shape(), axes, true);
  Tensor<T> value(out_shape);
  detail::reduce_iterate<T>(a.val(), axes, value, [](T& o, T v, std::int64_t) { o += v; });
  auto in_shape = a.shape();
  return make_op<T>(std::move(value), {a}, "sum",
                    [in_shape, keep_shape](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {broadcast_to(reshape(g, keep_shape), in_shape)};
                    });
}

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  std::vector<int> axes(a.shape().size());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = static_cast<int>(i);
  return sum(a, axes, false);
}

template <typename T>
Var<T> mean(const Var<T>& a, std::vector<int> axes, bool keepdims = false) {
  std::int64_t k = 1;
  for (int ax : axes) k *= a.shape()[static_cast<size_t>(ax)];
  return scale(sum(a, std::move(axes), keepdims), T(1) / static_cast<T>(k));
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.val().numel()));
}

// reduce g down to `shape` by summing broadcast dimensions (backward of broadcasting)
template <typename T>
Var<T> reduce_to(const Var<T>& g, const std::vector<int>& shape) {
  if (g.shape() == shape) return g;
  const auto& gs = g.shape();
  const size_t off = gs.size() - shape.size();
  std::vector<int> axes;
  for (size_t i = 0; i < gs.size(); ++i) {
    const int d = i < off ? 1 : shape[i - off];
    if (d == 1 && gs[i] != 1) axes.push_back(static_cast<int>(i));
    else if (i < off) axes.push_back(static_cast<int>(i));
  }
  auto r = axes.empty() ? g : sum(g, axes, true);
  return r.shape() == shape ? r : reshape(r, shape);
}

namespace detail {
// scatter g into shape at flat indices (used by max/min backward); disjoint by construction
template <typename T>
Var<T> scatter_flat(const Var<T>& g, std::shared_ptr<std::vector<std::int64_t>> idx,
                    std::vector<int> shape);

template <typename T>
Var<T> gather_flat(const Var<T>& a, std::shared_ptr<std::vector<std::int64_t>> idx,
                   std::vector<int> out_shape) {
  Tensor<T> value(out_shape);
  const T* pa = a.val().data();
  for (size_t i = 0; i < idx->size(); ++i) value[static_cast<std::int64_t>(i)] = pa[(*idx)[i]];
  auto in_shape = a.shape();
  return make_op<T>(std::move(value), {a}, "gather_flat",
                    [idx, in_shape](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {scatter_flat(g, idx, in_shape)};
                    });
}

template <typename T>
Var<T> scatter_flat(const Var<T>& g, std::shared_ptr<std::vector<std::int64_t>> idx,
                    std::vector<int> shape) {
  Tensor<T> value(shape);
  const T* pg = g.val().data();
  for (size_t i = 0; i < idx->size(); ++i) value[(*idx)[i]] += pg[static_cast<std::int64_t>(i)];
  auto g_shape = g.shape();
  return make_op<T>(std::move(value), {g}, "scatter_flat",
                    [idx, g_shape](const Var<T>& h, const Var<T>&) -> std::vector<Var<T>> {
                      return {gather_flat(h, idx, g_shape)};
                    });
}

template <typename T, bool Max>
Var<T> extremum(const Var<T>& a, std::vector<int> axes, bool keepdims) {
  const auto out_shape = reduced_shape(a.shape(), axes, keepdims);
  Tensor<T> value = Tensor<T>::full(out_shape, Max ? -std::numeric_limits<T>::infinity()
                                                   : std::numeric_limits<T>::infinity());
  auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(value.numel()), -1);
  const auto& is = a.shape();
  std::vector<bool> red(is.size(), false);
  for (int ax : axes) red[static_cast<size_t>(ax)] = true;
  std::vector<std::int64_t> ostride(is.size(), 0);
  std::int64_t s = 1;
  for (size_t i = is.size(); i-- > 0;) {
    if (!red[i]) {
      ostride[i] = s;
      s *= is[i];
    }
  }
  std::vector<std::int64_t> cidx(is.size(), 0);
  std::int64_t off = 0;
  const T* pi = a.val().data();
  for (std::int64_t i = 0; i < a.val().numel(); ++i) {
    const bool better = Max ? pi[i] > value[off] : pi[i] < value[off];
    if (better || (*idx)[static_cast<size_t>(off)] < 0) {
      value[off] = pi[i];
      (*idx)[static_cast<size_t>(off)] = i;
    }
    for (size_t d = is.size(); d-- > 0;) {
      ++cidx[d];
      off += ostride[d];
      if (cidx[d] < is[d]) break;
      cidx[d] = 0;
      off -= ostride[d] * is[d];
    }
  }
  auto in_shape = a.shape();
  return make_op<T>(std::move(value), {a}, Max ? "max" : "min",
                    [idx, in_shape](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {scatter_flat(g, idx, in_shape)};
                    });
}
}  // namespace detail

template <typename T>
Var<T> reduce_max(const Var<T>& a, std::vector<int> axes, bool keepdims = false) {
  return detail::extremum<T, true>(a, std::move(axes), keepdims);
}

template <typename T>
Var<T> reduce_min(const Var<T>& a, std::vector<int> axes, bool keepdims = false) {
  return detail::extremum<T, false>(a, std::move(axes), keepdims);
}

// ---------------------------------------------------------------------------
// matmul (2-D, optional transposes)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta = false, bool tb = false) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() != 2 || bs.size() != 2) throw shape_error("matmul expects rank-2 tensors");
  const int m = ta ? as[1] : as[0];
  const int ka = ta ? as[0] : as[1];
  const int kb = tb ? bs[1] : bs[0];
  const int n = tb ? bs[0] : bs[1];
  if (ka != kb)
    throw shape_error("matmul inner dims mismatch: " + shape_str(as) + " x " + shape_str(bs));
  Tensor<T> value({m, n});
  gemm<T>(ta, tb, m, n, ka, T(1), a.val().data(), as[1], b.val().data(), bs[1], T(0), value.data(),
          n);
  return make_op<T>(
      std::move(value), {a, b}, "matmul",
      [ta, tb](const Var<T>& g, const Var<T>& self) -> std::vector<Var<T>> {
        const auto& A = self.node()->parents[0];
        const auto& B = self.node()->parents[1];
        Var<T> ga, gb;
        if (!ta && !tb) {        // C = A B
          ga = matmul(g, B, false, true);
          gb = matmul(A, g, true, false);
        } else if (!ta && tb) {  // C = A B^T
          ga = matmul(g, B, false, false);
          gb = matmul(g, A, true, false);
        } else if (ta && !tb) {  // C = A^T B
          ga = matmul(B, g, false, true);
          gb = matmul(A, g, false, false);
        } else {                 // C = A^T B^T
          ga = matmul(B, g, true, true);
          gb = matmul(g, A, true, true);
        }
        return {ga, gb};
      });
}

// ---------------------------------------------------------------------------
// row gather/scatter (class-score selection on (N, C) tensors)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> scatter_rows(const Var<T>& g, std::shared_ptr<std::vector<int>> idx, int cols);

template <typename T>
Var<T> gather_rows(const Var<T>& a, std::shared_ptr<std::vector<int>> idx) {
  const auto& s = a.shape();
  if (s.size() != 2) throw shape_error("gather_rows expects (N, C)");
  const int n = s[0], c = s[1];
  if (static_cast<int>(idx->size()) != n) throw shape_error("gather_rows: index count != N");
  Tensor<T> value({n});
  for (int i = 0; i < n; ++i) {
    const int j = (*idx)[static_cast<size_t>(i)];
    if (j < 0 || j >= c)
      throw std::invalid_argument("class index " + std::to_string(j) + " out of range [0," +
                                  std::to_string(c) + ")");
    value[i] = a.val()[static_cast<std::int64_t>(i) * c + j];
  }
  return make_op<T>(std::move(value), {a}, "gather_rows",
                    [idx, c](const Var<T>& g, const Var<T>&) -> std::vector<Var<T>> {
                      return {scatter_rows(g, idx, c)};
                    });
}

template <typename T>
Var<T> scatter_rows(const Var<T>& g, std::shared_ptr<std::vector<int>> idx, int cols) {
  const int n = g.shape()[0];
  Tensor<T> value({n, cols});
  for (int i = 0; i < n; ++i)
    value[static_cast<std::int64_t>(i) * cols + (*idx)[static_cast<size_t>(i)]] = g.val()[i];
  return make_op<T>(std::move(value), {g}, "scatter_rows",
                    [idx](const Var<T>& h, const Var<T>&) -> std::vector<Var<T>> {
                      return {gather_rows(h, idx)};
                    });
}

// ---------------------------------------------------------------------------
// grad: reverse accumulation from `output` to each of `inputs`.
// With create_graph=true the returned gradients are differentiable again.
// ---------------------------------------------------------------------------

template <typename T>
std::vector<Var<T>> grad(const Var<T>& output, const std::vector<Var<T>>& inputs,
                         bool create_graph = false, Var<T> grad_output = {}) {
  if (!output.defined()) throw std::invalid_argument("grad: undefined output");
  std::unordered_map<const Node<T>*, bool> needed;
  std::unordered_set<const Node<T>*> input_set;
  for (const auto& v : inputs) input_set.insert(v.node());

  // needed(n) = n is an input, or some parent chain reaches an input.
  // Iterative post-order; second-order graphs can be deep.
  auto is_needed = [&](const Node<T>* root) -> bool {
    auto found = needed.find(root);
    if (found != needed.end()) return found->second;
    std::vector<std::pair<const Node<T>*, size_t>> stack{{root, 0}};
    while (!stack.empty()) {
      auto& [n, pi] = stack.back();
      if (needed.count(n)) {
        stack.pop_back();
        continue;
      }
      if (pi == 0 && input_set.count(n)) {
        needed[n] = true;
        stack.pop_back();
        continue;
      }
      bool descended = false;
      while (pi < n->parents.size()) {
        const auto& p = n->parents[pi++];
        if (!p.requires_grad()) continue;
        auto it = needed.find(p.node());
        if (it == needed.end()) {
          stack.emplace_back(p.node(), 0);
          descended = true;
          break;
        }
      }
      if (!descended && pi >= n->parents.size()) {
        bool r = false;
        for (const auto& p : n->parents)
          if (p.requires_grad() && needed.count(p.node()) && needed.at(p.node())) {
            r = true;
            break;
          }
        needed[n] = r;
        stack.pop_back();
      }
    }
    return needed.at(root);
  };

  std::vector<Var<T>> result(inputs.size());
  auto zeros_for = [&](size_t i) { return Var<T>::constant(Tensor<T>::zeros(inputs[i].shape())); };

  if (!output.requires_grad() || !is_needed(output.node())) {
    for (size_t i = 0; i < inputs.size(); ++i) result[i] = zeros_for(i);
    return result;
  }

  // topo order over the needed, grad-requiring subgraph
  std::vector<const Node<T>*> order;
  std::unordered_map<const Node<T>*, Var<T>> hold;  // keep shared_ptrs alive by node
  {
    std::unordered_set<const Node<T>*> visited;
    std::vector<std::pair<Var<T>, size_t>> stack;
    stack.emplace_back(output, 0);
    hold.emplace(output.node(), output);
    while (!stack.empty()) {
      auto& [v, pi] = stack.back();
      const Node<T>* n = v.node();
      if (visited.count(n)) {
        stack.pop_back();
        continue;
      }
      bool descended = false;
      while (pi < n->parents.size()) {
        const auto& p = n->parents[pi++];
        if (p.requires_grad() && is_needed(p.node()) && !visited.count(p.node())) {
          hold.emplace(p.node(), p);
          stack.emplace_back(p, 0);
          descended = true;
          break;
        }
      }
      if (!descended && pi >= n->parents.size()) {
        visited.insert(n);
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  GradModeGuard guard(create_graph);
  std::unordered_map<const Node<T>*, Var<T>> grads;
  grads[output.node()] =
      grad_output.defined() ? grad_output : Var<T>::constant(Tensor<T>::ones(output.shape()));

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node<T>* n = *it;
    auto git = grads.find(n);
    if (git == grads.end()) continue;
    Var<T> g = git->second;
    if (!n->backward) continue;
    Var<T> self = hold.at(n);
    auto parent_grads = n->backward(g, self);
    for (size_t i = 0; i < n->parents.size(); ++i) {
      const auto& p = n->parents[i];
      if (!p.requires_grad() || !is_needed(p.node())) continue;
      if (i >= parent_grads.size() || !parent_grads[i].defined()) continue;
      auto existing = grads.find(p.node());
      if (existing == grads.end())
        grads[p.node()] = parent_grads[i];
      else
        existing->second = add(existing->second, parent_grads[i]);
    }
  }

  for (size_t i = 0; i < inputs.size(); ++i) {
    auto it = grads.find(inputs[i].node());
    result[i] = it == grads.end() ? zeros_for(i) : it->second;
  }
  return result;
}

}  // namespace gcct
