#pragma once
// Reverse-mode automatic differentiation over small dense tensors.
//
// A Tensor is a shared handle to a graph node. Ops record their inputs and a
// backward rule; backward() walks the graph in reverse topological order.
// Leaf gradients accumulate across backward() calls until zero_grad().

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <vector>

#include "cn2/error.hpp"

namespace cn2::ad {

using Shape = std::vector<int>;

inline std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <class T = float>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    for (int d : shape)
      if (d < 1) fail(ErrorKind::Shape, "tensor dimensions must be positive, got " + shape_str(shape));
    if (data.size() != numel_of(shape))
      fail(ErrorKind::Shape, "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
    for (T v : data)
      if (!std::isfinite(v)) fail(ErrorKind::NumericalGuard, "non-finite tensor value");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) { return from({1}, {value}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  const std::vector<T>& data() const { return node_->data; }
  /// Mutable storage for parameter initialisation and optimizer updates.
  std::vector<T>& mutable_data() { return node_->data; }
  /// Empty until a backward pass reaches this tensor.
  const std::vector<T>& grad() const { return node_->grad; }
  std::vector<T>& mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }

  T item() const {
    if (numel() != 1) fail(ErrorKind::Shape, "item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  const std::string& op() const { return node_->op; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  /// Same values, cut from the graph.
  Tensor detach() const { return from(shape(), data(), false); }

  const NodePtr& node() const { return node_; }

  /// Populates grads of every requires_grad tensor reachable from this scalar.
  void backward() const {
    if (numel() != 1) fail(ErrorKind::Shape, "backward() needs a scalar loss, got shape " + shape_str(shape()));
    if (!node_->requires_grad) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    // Iterative post-order DFS gives a topological order (inputs first).
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node<T>* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    for (Node<T>* n : order) {
      n->ensure_grad();
      if (!n->leaf) std::fill(n->grad.begin(), n->grad.end(), T(0));
    }
    node_->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* n = *it;
      if (n->leaf || !n->backward) continue;
      n->backward(*n);
    }
  }

 private:
  NodePtr node_;
};

namespace detail {

template <class T>
void check_finite(const std::vector<T>& v, const std::string& op) {
  for (T x : v)
    if (!std::isfinite(x)) fail(ErrorKind::NumericalGuard, "non-finite value produced by " + op);
}

/// New graph node; requires_grad if any input does.
template <class T>
Tensor<T> make(Shape shape, std::vector<T> data, std::string op, std::vector<Tensor<T>> inputs,
               std::function<void(Node<T>&)> backward) {
  check_finite(data, op);
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = std::move(op);
  n->leaf = false;
  for (auto& t : inputs) {
    n->requires_grad = n->requires_grad || t.requires_grad();
    n->parents.push_back(t.node());
  }
  if (n->requires_grad) n->backward = std::move(backward);
  return Tensor<T>(std::move(n));
}

template <class T>
bool wants_grad(const std::shared_ptr<Node<T>>& n) {
  if (!n->requires_grad) return false;
  n->ensure_grad();
  return true;
}

/// Right-aligned broadcasting as in numpy.
inline Shape broadcast_shape(const Shape& a, const Shape& b, const std::string& op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      fail(ErrorKind::Shape, op + ": shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

/// For each output element, the flat index into an input broadcast to `out`.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t n = numel_of(out);
  std::vector<std::size_t> idx(n);
  if (in == out) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
  }
  if (numel_of(in) == 1) return idx;
  const std::size_t r = out.size(), off = r - in.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > off;) {
    const int d = in[i - off];
    stride[i] = d == 1 ? 0 : s;
    s *= static_cast<std::size_t>(d);
  }
  std::vector<int> counter(r, 0);
  std::size_t cur = 0;
  for (std::size_t k = 0; k < n; ++k) {
    idx[k] = cur;
    for (std::size_t i = r; i-- > 0;) {
      cur += stride[i];
      if (++counter[i] < out[i]) break;
      cur -= stride[i] * static_cast<std::size_t>(out[i]);
      counter[i] = 0;
    }
  }
  return idx;
}

/// Binary op with broadcasting. `f` gives the value, `da`/`db` the partials.
template <class T, class F, class DA, class DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const std::string& op, F f, DA da, DB db) {
  const Shape out = broadcast_shape(a.shape(), b.shape(), op);
  auto ia = broadcast_index(a.shape(), out), ib = broadcast_index(b.shape(), out);
  const std::size_t n = numel_of(out);
  std::vector<T> v(n);
  const auto& x = a.data();
  const auto& y = b.data();
  for (std::size_t k = 0; k < n; ++k) v[k] = f(x[ia[k]], y[ib[k]]);
  auto an = a.node(), bn = b.node();
  return make<T>(out, std::move(v), op, {a, b},
                 [an, bn, ia = std::move(ia), ib = std::move(ib), da, db](Node<T>& self) {
                   const bool ga = wants_grad(an), gb = wants_grad(bn);
                   for (std::size_t k = 0; k < self.grad.size(); ++k) {
                     const T g = self.grad[k], xa = an->data[ia[k]], xb = bn->data[ib[k]];
                     if (ga) an->grad[ia[k]] += g * da(xa, xb);
                     if (gb) bn->grad[ib[k]] += g * db(xa, xb);
                   }
                 });
}

template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& a, const std::string& op, F f, D d) {
  std::vector<T> v(a.numel());
  const auto& x = a.data();
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = f(x[k]);
  auto an = a.node();
  return make<T>(a.shape(), std::move(v), op, {a}, [an, d](Node<T>& self) {
    if (!wants_grad(an)) return;
    for (std::size_t k = 0; k < self.grad.size(); ++k) an->grad[k] += self.grad[k] * d(an->data[k], self.data[k]);
  });
}

/// Splits a shape around `axis` into outer * n * inner.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
  Shape reduced;
};

inline AxisSplit split_axis(const Shape& s, int axis, const std::string& op) {
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) fail(ErrorKind::Shape, op + ": axis out of range for shape " + shape_str(s));
  AxisSplit out;
  for (int i = 0; i < axis; ++i) out.outer *= static_cast<std::size_t>(s[i]);
  out.n = static_cast<std::size_t>(s[axis]);
  for (int i = axis + 1; i < r; ++i) out.inner *= static_cast<std::size_t>(s[i]);
  for (int i = 0; i < r; ++i)
    if (i != axis) out.reduced.push_back(s[i]);
  if (out.reduced.empty()) out.reduced.push_back(1);
  return out;
}

}  // namespace detail

// ---- elementwise ---------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

struct DivGuard {
  double eps = 1e-12;
  bool clamp = false;  // inference only: replace |den| < eps by +-eps instead of failing
};

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b, DivGuard guard = {}) {
  const T eps = static_cast<T>(guard.eps);
  for (T y : b.data())
    if (std::abs(y) < eps && !guard.clamp)
      fail(ErrorKind::NumericalGuard, "division denominator below guard " + std::to_string(guard.eps));
  auto g = [eps](T y) { return std::abs(y) >= eps ? y : (y < 0 ? -eps : eps); };
  return detail::binary(
      a, b, "div", [g](T x, T y) { return x / g(y); }, [g](T, T y) { return T(1) / g(y); },
      [g](T x, T y) {
        const T d = g(y);
        return -x / (d * d);
      });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

/// a * s for a constant s.
template <class T>
Tensor<T> scale(const Tensor<T>& a, double s) {
  const T c = static_cast<T>(s);
  return detail::unary(a, "scale", [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, double s) {
  const T c = static_cast<T>(s);
  return detail::unary(a, "add_scalar", [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary(
      a, "relu", [](T x) { return x > 0 ? x : T(0); }, [](T x, T) { return x > 0 ? T(1) : T(0); });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return detail::unary(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Tensor<T> log10(const Tensor<T>& a) {
  for (T x : a.data())
    if (!(x > 0)) fail(ErrorKind::NumericalGuard, "log10 of non-positive value");
  const T inv_ln10 = static_cast<T>(1.0 / std::numbers::ln10);
  return detail::unary(
      a, "log10", [](T x) { return std::log10(x); }, [inv_ln10](T x, T) { return inv_ln10 / x; });
}

template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, "sigmoid", [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}

/// log(1 + exp(beta x)) / beta, evaluated without overflow.
template <class T>
Tensor<T> softplus(const Tensor<T>& a, double beta = 1.0) {
  if (!(beta > 0)) fail(ErrorKind::Config, "softplus beta must be positive");
  const double b = beta;
  return detail::unary(
      a, "softplus",
      [b](T x) {
        const double z = b * x;
        return static_cast<T>((std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)))) / b);
      },
      [b](T x, T) { return static_cast<T>(1.0 / (1.0 + std::exp(-b * x))); });
}

// ---- reductions (double accumulation) ------------------------------------

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T x : a.data()) acc += x;
  auto an = a.node();
  return detail::make<T>({1}, {static_cast<T>(acc)}, "sum", {a}, [an](Node<T>& self) {
    if (!detail::wants_grad(an)) return;
    for (auto& g : an->grad) g += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  double acc = 0.0;
  for (T x : a.data()) acc += x;
  const double n = static_cast<double>(a.numel());
  auto an = a.node();
  return detail::make<T>({1}, {static_cast<T>(acc / n)}, "mean", {a}, [an, n](Node<T>& self) {
    if (!detail::wants_grad(an)) return;
    const T g = static_cast<T>(self.grad[0] / n);
    for (auto& x : an->grad) x += g;
  });
}

template <class T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis) {
  const auto sp = detail::split_axis(a.shape(), axis, "sum_axis");
  std::vector<T> v(sp.outer * sp.inner);
  const auto& x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) acc += x[(o * sp.n + k) * sp.inner + i];
      v[o * sp.inner + i] = static_cast<T>(acc);
    }
  auto an = a.node();
  return detail::make<T>(sp.reduced, std::move(v), "sum_axis", {a}, [an, sp](Node<T>& self) {
    if (!detail::wants_grad(an)) return;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) an->grad[(o * sp.n + k) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis) {
  const auto sp = detail::split_axis(a.shape(), axis, "mean_axis");
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(sp.n));
}

/// Unbiased variance along `axis`.
template <class T>
Tensor<T> variance_axis(const Tensor<T>& a, int axis) {
  const auto sp = detail::split_axis(a.shape(), axis, "variance_axis");
  if (sp.n < 2) fail(ErrorKind::InsufficientFrames, "unbiased variance needs at least 2 samples along the axis");
  const std::size_t m = sp.outer * sp.inner;
  std::vector<T> v(m);
  std::vector<double> mu(m);
  const auto& x = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      double s = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) s += x[(o * sp.n + k) * sp.inner + i];
      const double mean = s / static_cast<double>(sp.n);
      double ss = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double d = x[(o * sp.n + k) * sp.inner + i] - mean;
        ss += d * d;
      }
      mu[o * sp.inner + i] = mean;
      v[o * sp.inner + i] = static_cast<T>(ss / static_cast<double>(sp.n - 1));
    }
  auto an = a.node();
  return detail::make<T>(sp.reduced, std::move(v), "variance_axis", {a}, [an, sp, mu = std::move(mu)](Node<T>& self) {
    if (!detail::wants_grad(an)) return;
    const double c = 2.0 / static_cast<double>(sp.n - 1);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.n; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          const std::size_t j = o * sp.inner + i, src = (o * sp.n + k) * sp.inner + i;
          an->grad[src] += static_cast<T>(self.grad[j] * c * (an->data[src] - mu[j]));
        }
  });
}

// ---- shape ops -----------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    fail(ErrorKind::Shape, "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  auto an = a.node();
  return detail::make<T>(std::move(shape), a.data(), "reshape", {a}, [an](Node<T>& self) {
    if (!detail::wants_grad(an)) return;
    for (std::size_t k = 0; k < self.grad.size(); ++k) an->grad[k] += self.grad[k];
  });
}

/// Drops `margin` pixels from each spatial edge of a [C,H,W] tensor.
template <class T>
Tensor<T> crop2d(const Tensor<T>& a, int margin) {
  if (a.rank() != 3) fail(ErrorKind::Shape, "crop2d expects [C,H,W], got " + shape_str(a.shape()));
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  if (margin < 0 || 2 * margin >= h || 2 * margin >= w)
    fail(ErrorKind::Shape, "crop2d margin " + std::to_string(margin) + " too large for " + shape_str(a.shape()));
  const int oh = h - 2 * margin, ow = w - 2 * margin;
  std::vector<T> v(static_cast<std::size_t>(c) * oh * ow);
  const auto& x = a.data();
  auto src = [=](int ch, int y, int xx) {
    return (static_cast<std::size_t>(ch) * h + y + margin) * w + xx + margin;
  };
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) v[(static_cast<std::size_t>(ch) * oh + y) * ow + xx] = x[src(ch, y, xx)];
  auto an = a.node();
  return detail::make<T>({c, oh, ow}, std::move(v), "crop2d", {a}, [an, c, oh, ow, src](Node<T>& self) {
    if (!detail::wants_grad(an)) return;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx)
          an->grad[src(ch, y, xx)] += self.grad[(static_cast<std::size_t>(ch) * oh + y) * ow + xx];
  });
}

/// 2x2 average pooling with stride 2 on [C,H,W]; an odd trailing row/column is dropped.
template <class T>
Tensor<T> avg_pool2(const Tensor<T>& a) {
  if (a.rank() != 3) fail(ErrorKind::Shape, "avg_pool2 expects [C,H,W], got " + shape_str(a.shape()));
  const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
  const int oh = h / 2, ow = w / 2;
  if (oh < 1 || ow < 1) fail(ErrorKind::Shape, "avg_pool2 input too small: " + shape_str(a.shape()));
  std::vector<T> v(static_cast<std::size_t>(c) * oh * ow);
  const auto& x = a.data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const std::size_t b = (static_cast<std::size_t>(ch) * h + 2 * y) * w + 2 * xx;
        v[(static_cast<std::size_t>(ch) * oh + y) * ow + xx] = T(0.25) * (x[b] + x[b + 1] + x[b + w] + x[b + w + 1]);
      }
  auto an = a.node();
  return detail::make<T>({c, oh, ow}, std::move(v), "avg_pool2", {a}, [an, c, h, w, oh, ow](Node<T>& self) {
    if (!detail::wants_grad(an)) return;
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const T g = T(0.25) * self.grad[(static_cast<std::size_t>(ch) * oh + y) * ow + xx];
          const std::size_t b = (static_cast<std::size_t>(ch) * h + 2 * y) * w + 2 * xx;
          an->grad[b] += g;
          an->grad[b + 1] += g;
          an->grad[b + w] += g;
          an->grad[b + w + 1] += g;
        }
  });
}

// ---- layers --------------------------------------------------------------

/// y = W x + b for x [n], W [m,n], b [m].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<std::type_identity_t<Tensor<T>>>& bias = std::nullopt) {
  if (x.rank() != 1 || weight.rank() != 2 || weight.dim(1) != x.dim(0))
    fail(ErrorKind::Shape, "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  const int m = weight.dim(0), n = weight.dim(1);
  if (bias && bias->shape() != Shape{m})
    fail(ErrorKind::Shape, "linear: bias " + shape_str(bias->shape()) + " vs " + std::to_string(m) + " outputs");
  std::vector<T> v(static_cast<std::size_t>(m));
  const auto& xv = x.data();
  const auto& wv = weight.data();
  for (int i = 0; i < m; ++i) {
    double acc = bias ? bias->data()[i] : 0.0;
    for (int j = 0; j < n; ++j) acc += static_cast<double>(wv[static_cast<std::size_t>(i) * n + j]) * xv[j];
    v[i] = static_cast<T>(acc);
  }
  std::vector<Tensor<T>> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  auto xn = x.node(), wn = weight.node();
  auto bn = bias ? bias->node() : nullptr;
  return detail::make<T>({m}, std::move(v), "linear", inputs, [xn, wn, bn, m, n](Node<T>& self) {
    const bool gx = detail::wants_grad(xn), gw = detail::wants_grad(wn), gb = bn && detail::wants_grad(bn);
    for (int i = 0; i < m; ++i) {
      const T g = self.grad[i];
      if (gb) bn->grad[i] += g;
      for (int j = 0; j < n; ++j) {
        const std::size_t k = static_cast<std::size_t>(i) * n + j;
        if (gw) wn->grad[k] += g * xn->data[j];
        if (gx) xn->grad[j] += g * wn->data[k];
      }
    }
  });
}

/// Stride-1 cross-correlation of [C,H,W] with [O,C,k,k], replicate padding
/// (k-1)/2, so output is [O,H,W].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const std::optional<std::type_identity_t<Tensor<T>>>& bias = std::nullopt) {
  if (input.rank() != 3) fail(ErrorKind::Shape, "conv2d input must be [C,H,W], got " + shape_str(input.shape()));
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3) || weight.dim(2) % 2 == 0)
    fail(ErrorKind::Shape, "conv2d weight must be [O,C,k,k] with odd k, got " + shape_str(weight.shape()));
  if (weight.dim(1) != input.dim(0))
    fail(ErrorKind::Shape, "conv2d channel mismatch: input " + shape_str(input.shape()) + ", weight " +
                               shape_str(weight.shape()));
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2), O = weight.dim(0), K = weight.dim(2);
  if (bias && bias->shape() != Shape{O})
    fail(ErrorKind::Shape, "conv2d bias " + shape_str(bias->shape()) + " vs " + std::to_string(O) + " outputs");
  const int p = (K - 1) / 2, PH = H + 2 * p, PW = W + 2 * p;
  const std::size_t plane = static_cast<std::size_t>(H) * W, pplane = static_cast<std::size_t>(PH) * PW;

  auto padded = std::make_shared<std::vector<T>>(static_cast<std::size_t>(C) * pplane);
  const auto& x = input.data();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < PH; ++y) {
      const int sy = std::clamp(y - p, 0, H - 1);
      T* dst = padded->data() + c * pplane + static_cast<std::size_t>(y) * PW;
      const T* src = x.data() + c * plane + static_cast<std::size_t>(sy) * W;
      for (int xx = 0; xx < PW; ++xx) dst[xx] = src[std::clamp(xx - p, 0, W - 1)];
    }

  std::vector<T> out(static_cast<std::size_t>(O) * plane, T(0));
  const auto& wv = weight.data();
  for (int o = 0; o < O; ++o) {
    T* op = out.data() + o * plane;
    if (bias) std::fill(op, op + plane, bias->data()[o]);
    for (int c = 0; c < C; ++c)
      for (int ky = 0; ky < K; ++ky)
        for (int kx = 0; kx < K; ++kx) {
          const T wk = wv[((static_cast<std::size_t>(o) * C + c) * K + ky) * K + kx];
          if (wk == T(0)) continue;
          for (int y = 0; y < H; ++y) {
            const T* src = padded->data() + c * pplane + static_cast<std::size_t>(y + ky) * PW + kx;
            T* dst = op + static_cast<std::size_t>(y) * W;
            for (int xx = 0; xx < W; ++xx) dst[xx] += wk * src[xx];
          }
        }
  }

  std::vector<Tensor<T>> inputs{input, weight};
  if (bias) inputs.push_back(*bias);
  auto in = input.node(), wn = weight.node();
  auto bn = bias ? bias->node() : nullptr;
  return detail::make<T>(
      {O, H, W}, std::move(out), "conv2d", inputs, [=](Node<T>& self) {
        const bool gi = detail::wants_grad(in), gw = detail::wants_grad(wn), gb = bn && detail::wants_grad(bn);
        const T* g = self.grad.data();
        if (gb)
          for (int o = 0; o < O; ++o) {
            double acc = 0.0;
            for (std::size_t k = 0; k < plane; ++k) acc += g[o * plane + k];
            bn->grad[o] += static_cast<T>(acc);
          }
        if (gw)
          for (int o = 0; o < O; ++o)
            for (int c = 0; c < C; ++c)
              for (int ky = 0; ky < K; ++ky)
                for (int kx = 0; kx < K; ++kx) {
                  double acc = 0.0;
                  for (int y = 0; y < H; ++y) {
                    const T* src = padded->data() + c * pplane + static_cast<std::size_t>(y + ky) * PW + kx;
                    const T* go = g + o * plane + static_cast<std::size_t>(y) * W;
                    T row = T(0);
                    for (int xx = 0; xx < W; ++xx) row += go[xx] * src[xx];
                    acc += row;
                  }
                  wn->grad[((static_cast<std::size_t>(o) * C + c) * K + ky) * K + kx] += static_cast<T>(acc);
                }
        if (gi) {
          std::vector<T> gp(static_cast<std::size_t>(C) * pplane, T(0));
          for (int o = 0; o < O; ++o)
            for (int c = 0; c < C; ++c)
              for (int ky = 0; ky < K; ++ky)
                for (int kx = 0; kx < K; ++kx) {
                  const T wk = wn->data[((static_cast<std::size_t>(o) * C + c) * K + ky) * K + kx];
                  if (wk == T(0)) continue;
                  for (int y = 0; y < H; ++y) {
                    T* dst = gp.data() + c * pplane + static_cast<std::size_t>(y + ky) * PW + kx;
                    const T* go = g + o * plane + static_cast<std::size_t>(y) * W;
                    for (int xx = 0; xx < W; ++xx) dst[xx] += wk * go[xx];
                  }
                }
          // Fold the padded border back onto the replicated edge pixels.
          for (int c = 0; c < C; ++c)
            for (int y = 0; y < PH; ++y) {
              const int sy = std::clamp(y - p, 0, H - 1);
              for (int xx = 0; xx < PW; ++xx)
                in->grad[c * plane + static_cast<std::size_t>(sy) * W + std::clamp(xx - p, 0, W - 1)] +=
                    gp[c * pplane + static_cast<std::size_t>(y) * PW + xx];
            }
        }
      });
}

// ---- optimizers ----------------------------------------------------------

template <class T>
void zero_grads(std::span<Tensor<T>> params) {
  for (auto& p : params) p.zero_grad();
}

template <class T = float>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, double lr, double momentum = 0.0)
      : params_(std::move(params)), lr_(lr), momentum_(momentum) {
    if (!(lr > 0) || !std::isfinite(lr)) fail(ErrorKind::Config, "learning rate must be positive");
    if (!(momentum >= 0 && momentum < 1)) fail(ErrorKind::Config, "momentum must be in [0,1)");
    for (auto& p : params_) velocity_.emplace_back(p.numel(), 0.0);
  }

  void step() {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p.grad().empty()) continue;
      auto& d = p.mutable_data();
      for (std::size_t k = 0; k < d.size(); ++k) {
        velocity_[i][k] = momentum_ * velocity_[i][k] + p.grad()[k];
        d[k] = static_cast<T>(d[k] - lr_ * velocity_[i][k]);
      }
    }
  }

  void zero_grad() { zero_grads<T>(params_); }

 private:
  std::vector<Tensor<T>> params_;
  double lr_, momentum_;
  std::vector<std::vector<double>> velocity_;
};

template <class T = float>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    if (!(lr > 0) || !std::isfinite(lr)) fail(ErrorKind::Config, "learning rate must be positive");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) fail(ErrorKind::Config, "Adam betas must be in [0,1)");
    if (!(eps > 0)) fail(ErrorKind::Config, "Adam eps must be positive");
    for (auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (p.grad().empty()) continue;
      auto& d = p.mutable_data();
      for (std::size_t k = 0; k < d.size(); ++k) {
        const double g = p.grad()[k];
        m_[i][k] = b1_ * m_[i][k] + (1 - b1_) * g;
        v_[i][k] = b2_ * v_[i][k] + (1 - b2_) * g * g;
        const double mh = m_[i][k] / c1, vh = v_[i][k] / c2;
        d[k] = static_cast<T>(d[k] - lr_ * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  void zero_grad() { zero_grads<T>(params_); }
  int steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace cn2::ad
