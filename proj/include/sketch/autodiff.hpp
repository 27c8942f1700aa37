#pragma once

// Minimal reverse-mode differentiation: a per-forward tape of coarse ops
// (dense, conv, pooling, fused GRU cell, activations, losses), parameter
// sets with persistent gradient buffers, Adam / RMSprop, and the binary
// checkpoint format.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "sketch/error.hpp"

namespace sketch::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until zero_grad() or a backward pass touches it

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), values(numel(shape), T(0)) {}
  Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != numel(shape))
      fail(ErrorKind::ShapeMismatch, "tensor " + shape_str(shape) + " got " + std::to_string(values.size()) + " values");
  }

  std::size_t size() const { return values.size(); }
  bool has_grad() const { return grad.size() == values.size(); }
  void zero_grad() { grad.assign(values.size(), T(0)); }
};

/// Named parameters in insertion order (which is also checkpoint order).
template <class T>
class ParameterSet {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> t) {
    if (index_.count(name)) fail(ErrorKind::TopologyMismatch, "duplicate parameter '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(t));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) { return entries_[index_of(name)].second; }
  const Tensor<T>& at(const std::string& name) const { return entries_[index_of(name)].second; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorKind::TopologyMismatch, "missing parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const { return entries_.size(); }
  const std::string& name(std::size_t i) const { return entries_[i].first; }
  Tensor<T>& operator[](std::size_t i) { return entries_[i].second; }
  const Tensor<T>& operator[](std::size_t i) const { return entries_[i].second; }

  void zero_grad() {
    for (auto& [n, t] : entries_) t.zero_grad();
  }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

  template <class U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (const auto& [name, t] : entries_)
      out.add(name, Tensor<U>(t.shape, std::vector<U>(t.values.begin(), t.values.end())));
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
  std::map<std::string, std::size_t> index_;
};

struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

/// One forward pass worth of recorded ops. Nodes are stored in creation order,
/// which is a topological order, so backward is a single reverse sweep.
template <class T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, std::uint32_t)>;

  Var constant(Shape shape, std::vector<T> value) { return make(std::move(shape), std::move(value), false); }

  /// Leaf whose gradient is kept on the tape (inputs under test).
  Var leaf(Shape shape, std::vector<T> value) { return make(std::move(shape), std::move(value), true); }

  /// Parameter leaf; its gradient is accumulated into `sink` during backward.
  Var param(const Tensor<T>& p, std::vector<T>* sink) {
    Var v = make(p.shape, p.values, true);
    nodes_[v.id].sink = sink;
    return v;
  }

  Var push(Shape shape, std::vector<T> value, bool requires_grad, BackFn back) {
    Var v = make(std::move(shape), std::move(value), requires_grad);
    if (requires_grad) nodes_[v.id].back = std::move(back);
    return v;
  }

  const Shape& shape(Var v) const { return nodes_[v.id].shape; }
  std::span<const T> value(Var v) const { return nodes_[v.id].value; }
  T scalar(Var v) const { return nodes_[v.id].value.at(0); }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  std::span<const T> grad(Var v) const { return nodes_[v.id].grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of `v`, allocated as zeros on first use.
  std::vector<T>& grad_buf(Var v) {
    auto& n = nodes_[v.id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
    return n.grad;
  }
  std::vector<T>& grad_buf(std::uint32_t id) { return grad_buf(Var{id}); }

  void backward(Var out, T seed = T(1)) {
    if (nodes_[out.id].value.size() != 1)
      fail(ErrorKind::NonScalarOutput, "backward from " + shape_str(nodes_[out.id].shape));
    if (!nodes_[out.id].requires_grad) return;
    grad_buf(out)[0] += seed;
    for (std::int64_t i = out.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.back) n.back(*this, static_cast<std::uint32_t>(i));
      if (n.sink) {
        auto& s = *n.sink;
        if (s.size() != n.grad.size()) s.assign(n.grad.size(), T(0));
        for (std::size_t k = 0; k < s.size(); ++k) s[k] += n.grad[k];
      }
    }
  }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackFn back;
    std::vector<T>* sink = nullptr;
  };

  Var make(Shape shape, std::vector<T> value, bool requires_grad) {
    if (value.size() != numel(shape))
      fail(ErrorKind::ShapeMismatch, "node " + shape_str(shape) + " got " + std::to_string(value.size()) + " values");
    nodes_.push_back(Node{std::move(shape), std::move(value), {}, requires_grad, {}, nullptr});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops

namespace detail {

inline void expect(bool ok, const char* op, const std::string& expected, const Shape& got) {
  if (!ok) fail(ErrorKind::ShapeMismatch, std::string(op) + ": expected " + expected + ", got " + shape_str(got));
}

template <class T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

}  // namespace detail

/// y = W x (+ b), W stored [out, in].
template <class T>
Var dense(Tape<T>& tape, Var x, Var w, Var b = {}) {
  const auto& ws = tape.shape(w);
  detail::expect(ws.size() == 2, "dense", "rank-2 weight", ws);
  const std::size_t out = ws[0], in = ws[1];
  detail::expect(tape.value(x).size() == in, "dense", "input of " + std::to_string(in) + " values", tape.shape(x));
  if (b.valid()) detail::expect(tape.value(b).size() == out, "dense", "bias [" + std::to_string(out) + "]", tape.shape(b));

  auto xv = tape.value(x), wv = tape.value(w);
  std::vector<T> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    const T* row = wv.data() + o * in;
    T acc = b.valid() ? tape.value(b)[o] : T(0);
    for (std::size_t i = 0; i < in; ++i) acc += row[i] * xv[i];
    y[o] = acc;
  }
  const bool rg = tape.requires_grad(x) || tape.requires_grad(w) || (b.valid() && tape.requires_grad(b));
  return tape.push({out}, std::move(y), rg, [x, w, b, in, out](Tape<T>& t, std::uint32_t self) {
    const auto& gy = t.grad_buf(self);
    auto xv = t.value(x), wv = t.value(w);
    if (t.requires_grad(w)) {
      auto& gw = t.grad_buf(w);
      for (std::size_t o = 0; o < out; ++o)
        if (gy[o] != T(0))
          for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += gy[o] * xv[i];
    }
    if (t.requires_grad(x)) {
      auto& gx = t.grad_buf(x);
      for (std::size_t o = 0; o < out; ++o)
        if (gy[o] != T(0))
          for (std::size_t i = 0; i < in; ++i) gx[i] += gy[o] * wv[o * in + i];
    }
    if (b.valid() && t.requires_grad(b)) {
      auto& gb = t.grad_buf(b);
      for (std::size_t o = 0; o < out; ++o) gb[o] += gy[o];
    }
  });
}

namespace detail {

template <class T, class F, class DF>
Var unary(Tape<T>& tape, Var x, F f, DF df_from_y) {
  auto xv = tape.value(x);
  std::vector<T> y(xv.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return tape.push(tape.shape(x), std::move(y), tape.requires_grad(x), [x, df_from_y](Tape<T>& t, std::uint32_t self) {
    const auto& gy = t.grad_buf(self);
    auto yv = t.value(Var{self});
    auto xv = t.value(x);
    auto& gx = t.grad_buf(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * df_from_y(xv[i], yv[i]);
  });
}

}  // namespace detail

template <class T>
Var sigmoid(Tape<T>& tape, Var x) {
  return detail::unary(tape, x, [](T v) { return detail::sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var tanh(Tape<T>& tape, Var x) {
  return detail::unary(tape, x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var relu(Tape<T>& tape, Var x) {
  return detail::unary(tape, x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

enum class Activation { identity, sigmoid, relu, tanh };

template <class T>
Var activate(Tape<T>& tape, Var x, Activation a) {
  switch (a) {
    case Activation::sigmoid: return sigmoid(tape, x);
    case Activation::relu: return relu(tape, x);
    case Activation::tanh: return tanh(tape, x);
    case Activation::identity: break;
  }
  return x;
}

namespace detail {

template <class T, class F>
Var binary(Tape<T>& tape, Var a, Var b, const char* op, F f, T da_coef_sign, bool multiplicative) {
  detail::expect(tape.value(a).size() == tape.value(b).size(), op, shape_str(tape.shape(a)), tape.shape(b));
  auto av = tape.value(a), bv = tape.value(b);
  std::vector<T> y(av.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(av[i], bv[i]);
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push(tape.shape(a), std::move(y), rg, [a, b, da_coef_sign, multiplicative](Tape<T>& t, std::uint32_t self) {
    const auto& gy = t.grad_buf(self);
    auto av = t.value(a), bv = t.value(b);
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buf(a);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += multiplicative ? gy[i] * bv[i] : gy[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buf(b);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += multiplicative ? gy[i] * av[i] : da_coef_sign * gy[i];
    }
  });
}

}  // namespace detail

template <class T>
Var add(Tape<T>& tape, Var a, Var b) {
  return detail::binary(tape, a, b, "add", [](T x, T y) { return x + y; }, T(1), false);
}

template <class T>
Var sub(Tape<T>& tape, Var a, Var b) {
  return detail::binary(tape, a, b, "sub", [](T x, T y) { return x - y; }, T(-1), false);
}

template <class T>
Var mul(Tape<T>& tape, Var a, Var b) {
  return detail::binary(tape, a, b, "mul", [](T x, T y) { return x * y; }, T(1), true);
}

template <class T>
Var scale(Tape<T>& tape, Var a, T s) {
  auto av = tape.value(a);
  std::vector<T> y(av.begin(), av.end());
  for (auto& v : y) v *= s;
  return tape.push(tape.shape(a), std::move(y), tape.requires_grad(a), [a, s](Tape<T>& t, std::uint32_t self) {
    const auto& gy = t.grad_buf(self);
    auto& ga = t.grad_buf(a);
    for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += s * gy[i];
  });
}

template <class T>
Var reshape(Tape<T>& tape, Var a, Shape shape) {
  detail::expect(numel(shape) == tape.value(a).size(), "reshape", shape_str(shape), tape.shape(a));
  auto av = tape.value(a);
  return tape.push(std::move(shape), std::vector<T>(av.begin(), av.end()), tape.requires_grad(a),
                   [a](Tape<T>& t, std::uint32_t self) {
                     const auto& gy = t.grad_buf(self);
                     auto& ga = t.grad_buf(a);
                     for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                   });
}

/// Flattened concatenation.
template <class T>
Var concat(Tape<T>& tape, const std::vector<Var>& parts) {
  std::vector<T> y;
  bool rg = false;
  for (Var p : parts) {
    auto v = tape.value(p);
    y.insert(y.end(), v.begin(), v.end());
    rg = rg || tape.requires_grad(p);
  }
  const std::size_t n = y.size();
  return tape.push({n}, std::move(y), rg, [parts](Tape<T>& t, std::uint32_t self) {
    const auto& gy = t.grad_buf(self);
    std::size_t off = 0;
    for (Var p : parts) {
      const std::size_t len = t.value(p).size();
      if (t.requires_grad(p)) {
        auto& gp = t.grad_buf(p);
        for (std::size_t i = 0; i < len; ++i) gp[i] += gy[off + i];
      }
      off += len;
    }
  });
}

template <class T>
Var sum(Tape<T>& tape, Var a) {
  auto av = tape.value(a);
  T s = std::accumulate(av.begin(), av.end(), T(0));
  return tape.push({1}, {s}, tape.requires_grad(a), [a](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_buf(self)[0];
    for (auto& v : t.grad_buf(a)) v += g;
  });
}

/// sum_i coef_i * s_i over scalar nodes.
template <class T>
Var weighted_sum(Tape<T>& tape, const std::vector<Var>& scalars, const std::vector<T>& coefs) {
  if (scalars.size() != coefs.size()) fail(ErrorKind::ShapeMismatch, "weighted_sum: term/coefficient count");
  T s = T(0);
  bool rg = false;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    detail::expect(tape.value(scalars[i]).size() == 1, "weighted_sum", "scalar", tape.shape(scalars[i]));
    s += coefs[i] * tape.scalar(scalars[i]);
    rg = rg || tape.requires_grad(scalars[i]);
  }
  return tape.push({1}, {s}, rg, [scalars, coefs](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_buf(self)[0];
    for (std::size_t i = 0; i < scalars.size(); ++i)
      if (t.requires_grad(scalars[i])) t.grad_buf(scalars[i])[0] += coefs[i] * g;
  });
}

/// ||a - b||^2; either side may be a constant.
template <class T>
Var squared_distance(Tape<T>& tape, Var a, Var b) {
  detail::expect(tape.value(a).size() == tape.value(b).size(), "squared_distance", shape_str(tape.shape(a)),
                 tape.shape(b));
  auto av = tape.value(a), bv = tape.value(b);
  T s = T(0);
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.push({1}, {s}, rg, [a, b](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_buf(self)[0];
    auto av = t.value(a), bv = t.value(b);
    if (t.requires_grad(a)) {
      auto& ga = t.grad_buf(a);
      for (std::size_t i = 0; i < av.size(); ++i) ga[i] += T(2) * g * (av[i] - bv[i]);
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buf(b);
      for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= T(2) * g * (av[i] - bv[i]);
    }
  });
}

template <class T>
Var sum_squares(Tape<T>& tape, Var a) {
  auto av = tape.value(a);
  T s = T(0);
  for (T v : av) s += v * v;
  return tape.push({1}, {s}, tape.requires_grad(a), [a](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_buf(self)[0];
    auto av = t.value(a);
    auto& ga = t.grad_buf(a);
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += T(2) * g * av[i];
  });
}

/// Numerically stable softmax.
template <class T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> p(logits.begin(), logits.end());
  const T m = *std::max_element(p.begin(), p.end());
  T z = T(0);
  for (auto& v : p) {
    v = std::exp(v - m);
    z += v;
  }
  for (auto& v : p) v /= z;
  return p;
}

/// -log softmax(logits)[label], natural log.
template <class T>
Var softmax_cross_entropy(Tape<T>& tape, Var logits, std::size_t label) {
  auto lv = tape.value(logits);
  if (label >= lv.size())
    fail(ErrorKind::LabelOutOfRange, "label " + std::to_string(label) + " for " + std::to_string(lv.size()) + " classes");
  const T m = *std::max_element(lv.begin(), lv.end());
  T z = T(0);
  for (T v : lv) z += std::exp(v - m);
  const T loss = std::log(z) + m - lv[label];
  return tape.push({1}, {loss}, tape.requires_grad(logits), [logits, label](Tape<T>& t, std::uint32_t self) {
    const T g = t.grad_buf(self)[0];
    auto p = softmax<T>(t.value(logits));
    auto& gl = t.grad_buf(logits);
    for (std::size_t i = 0; i < p.size(); ++i) gl[i] += g * (p[i] - (i == label ? T(1) : T(0)));
  });
}

/// Same-padded, stride-1 convolution. x: [C, H, W], w: [O, C, K, K], b: [O].
template <class T>
Var conv2d(Tape<T>& tape, Var x, Var w, Var b) {
  const auto& xs = tape.shape(x);
  const auto& ws = tape.shape(w);
  detail::expect(xs.size() == 3, "conv2d", "input [C,H,W]", xs);
  detail::expect(ws.size() == 4 && ws[1] == xs[0] && ws[2] == ws[3] && ws[2] % 2 == 1, "conv2d",
                 "weight [O," + std::to_string(xs[0]) + ",K,K] with odd K", ws);
  const std::size_t C = xs[0], H = xs[1], W = xs[2], O = ws[0], K = ws[2];
  detail::expect(tape.value(b).size() == O, "conv2d", "bias [" + std::to_string(O) + "]", tape.shape(b));
  const auto pad = static_cast<std::ptrdiff_t>(K / 2);

  // Visits every (o, c, ky, kx) with the valid output row/col range so the
  // inner loop is contiguous.
  auto for_taps = [=](auto&& body) {
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < K; ++ky)
          for (std::size_t kx = 0; kx < K; ++kx) {
            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
            const std::size_t y0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dy));
            const std::size_t y1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(H, static_cast<std::ptrdiff_t>(H) - dy));
            const std::size_t x0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dx));
            const std::size_t x1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(W, static_cast<std::ptrdiff_t>(W) - dx));
            body(o, c, ky, kx, dy, dx, y0, y1, x0, x1);
          }
  };

  auto xv = tape.value(x), wv = tape.value(w), bv = tape.value(b);
  std::vector<T> y(O * H * W);
  for (std::size_t o = 0; o < O; ++o) std::fill(y.begin() + o * H * W, y.begin() + (o + 1) * H * W, bv[o]);
  for_taps([&](std::size_t o, std::size_t c, std::size_t ky, std::size_t kx, std::ptrdiff_t dy, std::ptrdiff_t dx,
               std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
    const T k = wv[((o * C + c) * K + ky) * K + kx];
    for (std::size_t r = y0; r < y1; ++r) {
      T* out = y.data() + (o * H + r) * W;
      const T* in = xv.data() + (c * H + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(r) + dy)) * W + dx;
      for (std::size_t q = x0; q < x1; ++q) out[q] += k * in[q];
    }
  });

  const bool rg = tape.requires_grad(x) || tape.requires_grad(w) || tape.requires_grad(b);
  return tape.push({O, H, W}, std::move(y), rg, [=](Tape<T>& t, std::uint32_t self) {
    const auto& gy = t.grad_buf(self);
    auto xv = t.value(x), wv = t.value(w);
    const bool gx_on = t.requires_grad(x), gw_on = t.requires_grad(w);
    std::vector<T>* gx = gx_on ? &t.grad_buf(x) : nullptr;
    std::vector<T>* gw = gw_on ? &t.grad_buf(w) : nullptr;
    for_taps([&](std::size_t o, std::size_t c, std::size_t ky, std::size_t kx, std::ptrdiff_t dy, std::ptrdiff_t dx,
                 std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
      const std::size_t widx = ((o * C + c) * K + ky) * K + kx;
      const T k = wv[widx];
      T acc = T(0);
      for (std::size_t r = y0; r < y1; ++r) {
        const T* g = gy.data() + (o * H + r) * W;
        const std::size_t in_off = (c * H + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(r) + dy)) * W;
        const T* in = xv.data() + in_off + dx;
        if (gw_on)
          for (std::size_t q = x0; q < x1; ++q) acc += g[q] * in[q];
        if (gx_on) {
          T* gin = gx->data() + in_off + dx;
          for (std::size_t q = x0; q < x1; ++q) gin[q] += k * g[q];
        }
      }
      if (gw_on) (*gw)[widx] += acc;
    });
    if (t.requires_grad(b)) {
      auto& gb = t.grad_buf(b);
      for (std::size_t o = 0; o < O; ++o)
        for (std::size_t i = 0; i < H * W; ++i) gb[o] += gy[o * H * W + i];
    }
  });
}

/// 2x2 max pooling with stride 2 (floor on odd sizes); ties go to the first
/// element in row-major window order.
template <class T>
Var maxpool2(Tape<T>& tape, Var x) {
  const auto& xs = tape.shape(x);
  detail::expect(xs.size() == 3 && xs[1] >= 2 && xs[2] >= 2, "maxpool2", "input [C,H>=2,W>=2]", xs);
  const std::size_t C = xs[0], H = xs[1], W = xs[2], OH = H / 2, OW = W / 2;
  auto xv = tape.value(x);
  std::vector<T> y(C * OH * OW);
  std::vector<std::uint32_t> arg(y.size());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t r = 0; r < OH; ++r)
      for (std::size_t q = 0; q < OW; ++q) {
        std::size_t best = (c * H + 2 * r) * W + 2 * q;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t bq = 0; bq < 2; ++bq) {
            std::size_t idx = (c * H + 2 * r + a) * W + 2 * q + bq;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (c * OH + r) * OW + q;
        y[o] = xv[best];
        arg[o] = static_cast<std::uint32_t>(best);
      }
  return tape.push({C, OH, OW}, std::move(y), tape.requires_grad(x), [x, arg = std::move(arg)](Tape<T>& t, std::uint32_t self) {
    const auto& gy = t.grad_buf(self);
    auto& gx = t.grad_buf(x);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[arg[i]] += gy[i];
  });
}

/// Fused GRU cell (reset gate applied to the recurrent candidate term):
///   r = s(Wx_r x + bx_r + Wh_r h + bh_r)
///   z = s(Wx_z x + bx_z + Wh_z h + bh_z)
///   n = tanh(Wx_n x + bx_n + r * (Wh_n h + bh_n))
///   h' = (1 - z) * n + z * h
/// Gate rows of wx/wh/bx/bh are stacked in (r, z, n) order.
template <class T>
Var gru_cell(Tape<T>& tape, Var x, Var h, Var wx, Var wh, Var bx, Var bh) {
  const std::size_t H = tape.value(h).size();
  const std::size_t I = tape.value(x).size();
  detail::expect(tape.shape(wx) == Shape{3 * H, I}, "gru_cell", "Wx " + shape_str({3 * H, I}), tape.shape(wx));
  detail::expect(tape.shape(wh) == Shape{3 * H, H}, "gru_cell", "Wh " + shape_str({3 * H, H}), tape.shape(wh));
  detail::expect(tape.value(bx).size() == 3 * H, "gru_cell", "bx [3H]", tape.shape(bx));
  detail::expect(tape.value(bh).size() == 3 * H, "gru_cell", "bh [3H]", tape.shape(bh));

  auto xv = tape.value(x), hv = tape.value(h), wxv = tape.value(wx), whv = tape.value(wh), bxv = tape.value(bx),
       bhv = tape.value(bh);
  std::vector<T> gx(3 * H), gh(3 * H);
  for (std::size_t o = 0; o < 3 * H; ++o) {
    T a = bxv[o];
    const T* row = wxv.data() + o * I;
    for (std::size_t i = 0; i < I; ++i) a += row[i] * xv[i];
    gx[o] = a;
    T c = bhv[o];
    const T* hrow = whv.data() + o * H;
    for (std::size_t i = 0; i < H; ++i) c += hrow[i] * hv[i];
    gh[o] = c;
  }
  std::vector<T> r(H), z(H), n(H), out(H);
  for (std::size_t j = 0; j < H; ++j) {
    r[j] = detail::sigmoid(gx[j] + gh[j]);
    z[j] = detail::sigmoid(gx[H + j] + gh[H + j]);
    n[j] = std::tanh(gx[2 * H + j] + r[j] * gh[2 * H + j]);
    out[j] = (T(1) - z[j]) * n[j] + z[j] * hv[j];
  }
  std::vector<T> ghn(gh.begin() + static_cast<std::ptrdiff_t>(2 * H), gh.end());
  const bool rg = tape.requires_grad(x) || tape.requires_grad(h) || tape.requires_grad(wx) || tape.requires_grad(wh) ||
                  tape.requires_grad(bx) || tape.requires_grad(bh);
  return tape.push(
      {H}, std::move(out), rg,
      [=, r = std::move(r), z = std::move(z), n = std::move(n), ghn = std::move(ghn)](Tape<T>& t, std::uint32_t self) {
        const auto& gout = t.grad_buf(self);
        auto xv = t.value(x), hv = t.value(h), wxv = t.value(wx), whv = t.value(wh);
        std::vector<T> dgx(3 * H), dgh(3 * H), dh_direct(H);
        for (std::size_t j = 0; j < H; ++j) {
          const T dz = gout[j] * (hv[j] - n[j]);
          const T dn = gout[j] * (T(1) - z[j]);
          dh_direct[j] = gout[j] * z[j];
          const T dan = dn * (T(1) - n[j] * n[j]);
          const T dr = dan * ghn[j];
          const T dar = dr * r[j] * (T(1) - r[j]);
          const T daz = dz * z[j] * (T(1) - z[j]);
          dgx[j] = dar;
          dgx[H + j] = daz;
          dgx[2 * H + j] = dan;
          dgh[j] = dar;
          dgh[H + j] = daz;
          dgh[2 * H + j] = dan * r[j];
        }
        if (t.requires_grad(wx)) {
          auto& g = t.grad_buf(wx);
          for (std::size_t o = 0; o < 3 * H; ++o)
            for (std::size_t i = 0; i < I; ++i) g[o * I + i] += dgx[o] * xv[i];
        }
        if (t.requires_grad(wh)) {
          auto& g = t.grad_buf(wh);
          for (std::size_t o = 0; o < 3 * H; ++o)
            for (std::size_t i = 0; i < H; ++i) g[o * H + i] += dgh[o] * hv[i];
        }
        if (t.requires_grad(bx)) {
          auto& g = t.grad_buf(bx);
          for (std::size_t o = 0; o < 3 * H; ++o) g[o] += dgx[o];
        }
        if (t.requires_grad(bh)) {
          auto& g = t.grad_buf(bh);
          for (std::size_t o = 0; o < 3 * H; ++o) g[o] += dgh[o];
        }
        if (t.requires_grad(x)) {
          auto& g = t.grad_buf(x);
          for (std::size_t o = 0; o < 3 * H; ++o)
            for (std::size_t i = 0; i < I; ++i) g[i] += dgx[o] * wxv[o * I + i];
        }
        if (t.requires_grad(h)) {
          auto& g = t.grad_buf(h);
          for (std::size_t j = 0; j < H; ++j) g[j] += dh_direct[j];
          for (std::size_t o = 0; o < 3 * H; ++o)
            for (std::size_t i = 0; i < H; ++i) g[i] += dgh[o] * whv[o * H + i];
        }
      });
}

/// Parameters of one GRU direction of one layer.
struct GruWeights {
  Var wx, wh, bx, bh;
};

/// Multi-layer bidirectional GRU over `steps`; returns the concatenation of
/// the top layer's final forward state and final backward state (2 * hidden).
/// `weights[layer][dir]`, dir 0 = forward, 1 = backward.
template <class T>
Var gru_bidirectional(Tape<T>& tape, const std::vector<Var>& steps, const std::vector<std::array<GruWeights, 2>>& weights,
                      std::size_t hidden) {
  if (steps.empty()) fail(ErrorKind::EmptySequence, "gru_bidirectional needs at least one step");
  if (weights.empty() || hidden == 0) fail(ErrorKind::TopologyMismatch, "gru needs >= 1 layer and hidden >= 1");
  std::vector<Var> inputs = steps;
  Var last_fwd, last_bwd;
  const Var h0 = tape.constant({hidden}, std::vector<T>(hidden, T(0)));
  for (std::size_t layer = 0; layer < weights.size(); ++layer) {
    const std::size_t n = inputs.size();
    std::vector<Var> fwd(n), bwd(n);
    Var h = h0;
    for (std::size_t t = 0; t < n; ++t) {
      const auto& w = weights[layer][0];
      h = gru_cell(tape, inputs[t], h, w.wx, w.wh, w.bx, w.bh);
      fwd[t] = h;
    }
    h = h0;
    for (std::size_t t = n; t-- > 0;) {
      const auto& w = weights[layer][1];
      h = gru_cell(tape, inputs[t], h, w.wx, w.wh, w.bx, w.bh);
      bwd[t] = h;
    }
    last_fwd = fwd[n - 1];
    last_bwd = bwd[0];
    if (layer + 1 < weights.size())
      for (std::size_t t = 0; t < n; ++t) inputs[t] = concat(tape, {fwd[t], bwd[t]});
  }
  return concat(tape, {last_fwd, last_bwd});
}

// ---------------------------------------------------------------------------
// Parameter binding

/// Maps parameter names to tape leaves, creating each leaf once per tape and
/// routing its gradient into `grads` (one buffer per parameter index).
template <class T>
class Binder {
 public:
  Binder(Tape<T>& tape, const ParameterSet<T>& params, std::vector<std::vector<T>>* grads = nullptr)
      : tape_(tape), params_(params), grads_(grads), cache_(params.size()) {}

  Var operator()(const std::string& name) {
    const std::size_t i = params_.index_of(name);
    if (!cache_[i].valid()) {
      if (grads_)
        cache_[i] = tape_.param(params_[i], &(*grads_)[i]);
      else
        cache_[i] = tape_.constant(params_[i].shape, params_[i].values);
    }
    return cache_[i];
  }

  Tape<T>& tape() { return tape_; }

 private:
  Tape<T>& tape_;
  const ParameterSet<T>& params_;
  std::vector<std::vector<T>>* grads_;
  std::vector<Var> cache_;
};

// ---------------------------------------------------------------------------
// Initialization and optimizers

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <class T>
void init_uniform(Tensor<T>& t, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : t.values) v = static_cast<T>(u(rng));
}

enum class OptimizerKind { adam, rmsprop };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double decay = 0.9;  // RMSprop
  double eps = 1e-8;
};

template <class T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }

  /// Updates every parameter whose name satisfies `select`.
  template <class Select>
  void step(ParameterSet<T>& params, Select&& select) {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (select(params.name(i)) && !params[i].has_grad())
        fail(ErrorKind::MissingGrads, "parameter '" + params.name(i) + "' has no gradient");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!select(params.name(i))) continue;
      auto& p = params[i];
      auto& s = state_[params.name(i)];
      if (s.m.size() != p.size()) {
        s.m.assign(p.size(), 0.0);
        s.v.assign(p.size(), 0.0);
        s.t = 0;
      }
      ++s.t;
      if (cfg_.kind == OptimizerKind::adam) {
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(s.t));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(s.t));
        for (std::size_t k = 0; k < p.size(); ++k) {
          const double g = static_cast<double>(p.grad[k]);
          s.m[k] = cfg_.beta1 * s.m[k] + (1.0 - cfg_.beta1) * g;
          s.v[k] = cfg_.beta2 * s.v[k] + (1.0 - cfg_.beta2) * g * g;
          const double mhat = s.m[k] / c1, vhat = s.v[k] / c2;
          p.values[k] = static_cast<T>(static_cast<double>(p.values[k]) - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
      } else {
        for (std::size_t k = 0; k < p.size(); ++k) {
          const double g = static_cast<double>(p.grad[k]);
          s.v[k] = cfg_.decay * s.v[k] + (1.0 - cfg_.decay) * g * g;
          p.values[k] = static_cast<T>(static_cast<double>(p.values[k]) - cfg_.lr * g / (std::sqrt(s.v[k]) + cfg_.eps));
        }
      }
    }
  }

  void step(ParameterSet<T>& params) {
    step(params, [](const std::string&) { return true; });
  }

 private:
  struct State {
    std::vector<double> m, v;
    std::uint64_t t = 0;
  };
  OptimizerConfig cfg_;
  std::map<std::string, State> state_;
};

// ---------------------------------------------------------------------------
// Checkpoint file: "SFCK", u32 version, then per parameter
//   u32 name length, name bytes, u8 dtype (0 = f32, 1 = f64), u32 rank,
//   u64 dims[rank], raw little-endian values.

namespace io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <class V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V get(std::istream& in, ErrorKind kind) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(V))) fail(kind, "truncated file");
  return v;
}

}  // namespace io

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(std::ostream& out, const ParameterSet<T>& params) {
  out.write("SFCK", 4);
  io::put<std::uint32_t>(out, kCheckpointVersion);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.name(i);
    const auto& t = params[i];
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::put<std::uint8_t>(out, std::is_same_v<T, float> ? 0 : 1);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) io::put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.values.data()), static_cast<std::streamsize>(t.values.size() * sizeof(T)));
  }
}

template <class T>
ParameterSet<T> load_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "SFCK", 4) != 0) fail(ErrorKind::BadCheckpoint, "bad magic");
  if (io::get<std::uint32_t>(in, ErrorKind::BadCheckpoint) != kCheckpointVersion)
    fail(ErrorKind::BadCheckpoint, "unsupported version");
  ParameterSet<T> params;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto len = io::get<std::uint32_t>(in, ErrorKind::BadCheckpoint);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) fail(ErrorKind::BadCheckpoint, "truncated name");
    const auto dtype = io::get<std::uint8_t>(in, ErrorKind::BadCheckpoint);
    if (dtype > 1) fail(ErrorKind::BadCheckpoint, "unknown dtype tag");
    const auto rank = io::get<std::uint32_t>(in, ErrorKind::BadCheckpoint);
    Shape shape(rank);
    for (auto& d : shape) d = io::get<std::uint64_t>(in, ErrorKind::BadCheckpoint);
    std::vector<T> values(numel(shape));
    for (auto& v : values)
      v = dtype == 0 ? static_cast<T>(io::get<float>(in, ErrorKind::BadCheckpoint))
                     : static_cast<T>(io::get<double>(in, ErrorKind::BadCheckpoint));
    params.add(name, Tensor<T>(std::move(shape), std::move(values)));
  }
  return params;
}

}  // namespace sketch::ad
