#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "agmm/numeric/tensor.hpp"

namespace agmm {

enum class ElementOp { add, sub, mul, div, exp, log, neg, relu, sigmoid, square, sqrt };

inline bool is_binary(ElementOp op) {
  return op == ElementOp::add || op == ElementOp::sub || op == ElementOp::mul ||
         op == ElementOp::div;
}

inline const char* op_name(ElementOp op) {
  switch (op) {
    case ElementOp::add: return "add";
    case ElementOp::sub: return "sub";
    case ElementOp::mul: return "mul";
    case ElementOp::div: return "div";
    case ElementOp::exp: return "exp";
    case ElementOp::log: return "log";
    case ElementOp::neg: return "neg";
    case ElementOp::relu: return "relu";
    case ElementOp::sigmoid: return "sigmoid";
    case ElementOp::square: return "square";
    case ElementOp::sqrt: return "sqrt";
  }
  return "?";
}

namespace detail {

template <class Real>
Tensor<Real> unary(ElementOp op, const Tensor<Real>& a, std::optional<Real> clamp_min) {
  const auto x = a.data();
  std::vector<Real> y(x.size());
  // Operands below clamp_min are raised to it and receive no gradient.
  std::vector<unsigned char> clamped;
  if (clamp_min) clamped.assign(x.size(), 0);
  auto operand = [&](std::size_t i) {
    if (clamp_min && x[i] < *clamp_min) {
      clamped[i] = 1;
      return *clamp_min;
    }
    return x[i];
  };

  switch (op) {
    case ElementOp::exp:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::exp(operand(i));
      break;
    case ElementOp::log:
      for (std::size_t i = 0; i < x.size(); ++i) {
        Real v = operand(i);
        if (!(v > Real(0)))
          throw DomainError("log of non-positive value " + std::to_string(double(v)));
        y[i] = std::log(v);
      }
      break;
    case ElementOp::sqrt:
      for (std::size_t i = 0; i < x.size(); ++i) {
        Real v = operand(i);
        if (!(v > Real(0)))
          throw DomainError("sqrt of non-positive value " + std::to_string(double(v)));
        y[i] = std::sqrt(v);
      }
      break;
    case ElementOp::neg:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = -operand(i);
      break;
    case ElementOp::relu:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::max(operand(i), Real(0));
      break;
    case ElementOp::sigmoid:
      for (std::size_t i = 0; i < x.size(); ++i) {
        Real v = operand(i);
        y[i] = v >= 0 ? Real(1) / (Real(1) + std::exp(-v)) : std::exp(v) / (Real(1) + std::exp(v));
      }
      break;
    case ElementOp::square:
      for (std::size_t i = 0; i < x.size(); ++i) {
        Real v = operand(i);
        y[i] = v * v;
      }
      break;
    default:
      throw std::invalid_argument(std::string("not a unary op: ") + op_name(op));
  }
  if (tracing_branches()) {
    if (op == ElementOp::relu)
      for (auto v : x) trace_branch(v > Real(0));
    for (auto c : clamped) trace_branch(c);
  }

  return make_result<Real>(
      a.shape(), std::move(y), {a},
      [op, clamped = std::move(clamped), clamp_min](Node<Real>& self) {
        auto& in = *self.parents[0];
        in.ensure_grad();
        const auto& g = self.grad;
        const auto& yv = self.data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (!clamped.empty() && clamped[i]) continue;
          Real xv = in.data[i];
          Real d = 0;
          switch (op) {
            case ElementOp::exp: d = yv[i]; break;
            case ElementOp::log: d = Real(1) / xv; break;
            case ElementOp::sqrt: d = Real(0.5) / yv[i]; break;
            case ElementOp::neg: d = Real(-1); break;
            case ElementOp::relu: d = xv > 0 ? Real(1) : Real(0); break;
            case ElementOp::sigmoid: d = yv[i] * (Real(1) - yv[i]); break;
            case ElementOp::square: d = Real(2) * xv; break;
            default: break;
          }
          in.grad[i] += g[i] * d;
        }
        (void)clamp_min;
      });
}

template <class Real>
Tensor<Real> binary(ElementOp op, const Tensor<Real>& a, const Tensor<Real>& b) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = a.size() == 1 && !same;
  const bool b_scalar = b.size() == 1 && !same;
  if (!same && !a_scalar && !b_scalar)
    throw ShapeError(std::string(op_name(op)) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are incompatible");
  const Shape out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = numel(out_shape);
  const auto x = a.data();
  const auto z = b.data();
  auto xa = [&](std::size_t i) { return a_scalar ? x[0] : x[i]; };
  auto zb = [&](std::size_t i) { return b_scalar ? z[0] : z[i]; };
  std::vector<Real> y(n);
  switch (op) {
    case ElementOp::add: for (std::size_t i = 0; i < n; ++i) y[i] = xa(i) + zb(i); break;
    case ElementOp::sub: for (std::size_t i = 0; i < n; ++i) y[i] = xa(i) - zb(i); break;
    case ElementOp::mul: for (std::size_t i = 0; i < n; ++i) y[i] = xa(i) * zb(i); break;
    case ElementOp::div:
      for (std::size_t i = 0; i < n; ++i) {
        if (zb(i) == Real(0)) throw DomainError("division by zero");
        y[i] = xa(i) / zb(i);
      }
      break;
    default:
      throw std::invalid_argument(std::string("not a binary op: ") + op_name(op));
  }

  return make_result<Real>(out_shape, std::move(y), {a, b},
                           [op, a_scalar, b_scalar](Node<Real>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    const std::size_t n = g.size();
    auto xa = [&](std::size_t i) { return a_scalar ? pa.data[0] : pa.data[i]; };
    auto zb = [&](std::size_t i) { return b_scalar ? pb.data[0] : pb.data[i]; };
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        Real d = 0;
        switch (op) {
          case ElementOp::add: case ElementOp::sub: d = 1; break;
          case ElementOp::mul: d = zb(i); break;
          case ElementOp::div: d = Real(1) / zb(i); break;
          default: break;
        }
        pa.grad[a_scalar ? 0 : i] += g[i] * d;
      }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        Real d = 0;
        switch (op) {
          case ElementOp::add: d = 1; break;
          case ElementOp::sub: d = -1; break;
          case ElementOp::mul: d = xa(i); break;
          case ElementOp::div: d = -xa(i) / (zb(i) * zb(i)); break;
          default: break;
        }
        pb.grad[b_scalar ? 0 : i] += g[i] * d;
      }
    }
  });
}

}  // namespace detail

/// Value-wise application of `op`. Binary ops take identical shapes or a
/// one-element operand on either side. `clamp_min` (log, sqrt and friends)
/// raises operands to the floor before applying the function.
template <class Real>
Tensor<Real> elementwise(ElementOp op, const Tensor<Real>& a,
                         const std::optional<Tensor<Real>>& b = std::nullopt,
                         std::optional<Real> clamp_min = std::nullopt) {
  if (is_binary(op)) {
    if (!b) throw std::invalid_argument(std::string(op_name(op)) + " needs two operands");
    return detail::binary(op, a, *b);
  }
  return detail::unary(op, a, clamp_min);
}

template <class Real> Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) { return detail::binary(ElementOp::add, a, b); }
template <class Real> Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) { return detail::binary(ElementOp::sub, a, b); }
template <class Real> Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) { return detail::binary(ElementOp::mul, a, b); }
template <class Real> Tensor<Real> div(const Tensor<Real>& a, const Tensor<Real>& b) { return detail::binary(ElementOp::div, a, b); }
template <class Real> Tensor<Real> exp(const Tensor<Real>& a) { return detail::unary(ElementOp::exp, a, std::optional<Real>{}); }
template <class Real> Tensor<Real> log(const Tensor<Real>& a, std::type_identity_t<std::optional<Real>> clamp_min = std::nullopt) { return detail::unary(ElementOp::log, a, clamp_min); }
template <class Real> Tensor<Real> sqrt(const Tensor<Real>& a, std::type_identity_t<std::optional<Real>> clamp_min = std::nullopt) { return detail::unary(ElementOp::sqrt, a, clamp_min); }
template <class Real> Tensor<Real> neg(const Tensor<Real>& a) { return detail::unary(ElementOp::neg, a, std::optional<Real>{}); }
template <class Real> Tensor<Real> relu(const Tensor<Real>& a) { return detail::unary(ElementOp::relu, a, std::optional<Real>{}); }
template <class Real> Tensor<Real> sigmoid(const Tensor<Real>& a) { return detail::unary(ElementOp::sigmoid, a, std::optional<Real>{}); }
template <class Real> Tensor<Real> square(const Tensor<Real>& a) { return detail::unary(ElementOp::square, a, std::optional<Real>{}); }

template <class Real> Tensor<Real> operator+(const Tensor<Real>& a, const Tensor<Real>& b) { return add(a, b); }
template <class Real> Tensor<Real> operator-(const Tensor<Real>& a, const Tensor<Real>& b) { return sub(a, b); }
template <class Real> Tensor<Real> operator*(const Tensor<Real>& a, const Tensor<Real>& b) { return mul(a, b); }
template <class Real> Tensor<Real> operator/(const Tensor<Real>& a, const Tensor<Real>& b) { return div(a, b); }
template <class Real> Tensor<Real> operator-(const Tensor<Real>& a) { return neg(a); }

template <class Real> Tensor<Real> operator*(Real s, const Tensor<Real>& a) { return mul(Tensor<Real>::scalar(s), a); }
template <class Real> Tensor<Real> operator*(const Tensor<Real>& a, Real s) { return mul(a, Tensor<Real>::scalar(s)); }
template <class Real> Tensor<Real> operator+(const Tensor<Real>& a, Real s) { return add(a, Tensor<Real>::scalar(s)); }
template <class Real> Tensor<Real> operator-(Real s, const Tensor<Real>& a) { return sub(Tensor<Real>::scalar(s), a); }
template <class Real> Tensor<Real> operator/(const Tensor<Real>& a, Real s) { return div(a, Tensor<Real>::scalar(s)); }

/// Clamps into [lo, hi]; gradient passes only where the value was inside.
template <class Real>
Tensor<Real> clamp(const Tensor<Real>& a, std::type_identity_t<Real> lo, std::type_identity_t<Real> hi) {
  const auto x = a.data();
  std::vector<Real> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::clamp(x[i], lo, hi);
  if (detail::tracing_branches())
    for (auto v : x) detail::trace_branch(v < lo ? 0u : v > hi ? 2u : 1u);
  return detail::make_result<Real>(a.shape(), std::move(y), {a}, [lo, hi](detail::Node<Real>& self) {
    auto& in = *self.parents[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (in.data[i] >= lo && in.data[i] <= hi) in.grad[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceOp { sum, mean, max_index };

namespace detail {

// Maps every input flat index to its output flat index after dropping `axes`.
inline std::vector<std::size_t> reduction_map(const Shape& shape, const std::vector<bool>& drop,
                                              Shape& out_shape) {
  out_shape.clear();
  for (std::size_t d = 0; d < shape.size(); ++d)
    if (!drop[d]) out_shape.push_back(shape[d]);
  std::vector<std::size_t> out_stride(shape.size(), 0);
  std::size_t s = 1;
  for (std::size_t d = shape.size(); d-- > 0;) {
    if (!drop[d]) {
      out_stride[d] = s;
      s *= shape[d];
    }
  }
  const std::size_t n = numel(shape);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) o += idx[d] * out_stride[d];
    map[i] = o;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace detail

/// Reduces over `axes`, dropping them from the shape. max_index returns the
/// lowest index of the maximum along a single axis and is never recorded.
template <class Real>
Tensor<Real> reduce(ReduceOp op, const Tensor<Real>& a, const std::vector<std::size_t>& axes) {
  if (axes.empty()) throw ShapeError("reduce: empty axis list");
  std::vector<bool> drop(a.rank(), false);
  std::size_t extent = 1;
  for (auto ax : axes) {
    if (ax >= a.rank())
      throw ShapeError("reduce: axis " + std::to_string(ax) + " out of range for " + shape_str(a.shape()));
    if (drop[ax]) throw ShapeError("reduce: duplicate axis " + std::to_string(ax));
    drop[ax] = true;
    extent *= a.extent(ax);
  }
  if (extent == 0) throw ShapeError("reduce: empty reduction set");

  if (op == ReduceOp::max_index) {
    if (axes.size() != 1) throw ShapeError("max_index reduces exactly one axis");
    const std::size_t ax = axes[0];
    Shape out_shape;
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < a.rank(); ++d) {
      if (d < ax) outer *= a.extent(d);
      if (d > ax) inner *= a.extent(d);
      if (d != ax) out_shape.push_back(a.extent(d));
    }
    const std::size_t len = a.extent(ax);
    const auto x = a.data();
    std::vector<Real> y(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        std::size_t best = 0;
        Real bv = x[o * len * inner + i];
        for (std::size_t k = 1; k < len; ++k) {
          Real v = x[(o * len + k) * inner + i];
          if (v > bv) {
            bv = v;
            best = k;
          }
        }
        y[o * inner + i] = Real(best);
      }
    return Tensor<Real>::from(std::move(out_shape), std::move(y));
  }

  const Real scale = op == ReduceOp::mean ? Real(1) / Real(extent) : Real(1);

  // Contiguous block of reduced axes: index as [outer, mid, inner] directly.
  const auto first = std::size_t(std::find(drop.begin(), drop.end(), true) - drop.begin());
  const std::size_t last = first + axes.size();
  if (std::all_of(drop.begin() + std::ptrdiff_t(first), drop.begin() + std::ptrdiff_t(last), [](bool b) { return b; })) {
    Shape out_shape;
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < a.rank(); ++d) {
      if (d < first) outer *= a.extent(d);
      if (d >= last) inner *= a.extent(d);
      if (!drop[d]) out_shape.push_back(a.extent(d));
    }
    const std::size_t mid = extent;
    const auto x = a.data();
    std::vector<Real> y(outer * inner, Real(0));
    for (std::size_t o = 0; o < outer; ++o) {
      Real* yo = y.data() + o * inner;
      for (std::size_t m = 0; m < mid; ++m) {
        const Real* xo = x.data() + (o * mid + m) * inner;
        for (std::size_t i = 0; i < inner; ++i) yo[i] += xo[i];
      }
    }
    if (op == ReduceOp::mean)
      for (auto& v : y) v *= scale;
    return detail::make_result<Real>(
        std::move(out_shape), std::move(y), {a}, [outer, mid, inner, scale](detail::Node<Real>& self) {
          auto& in = *self.parents[0];
          in.ensure_grad();
          for (std::size_t o = 0; o < outer; ++o) {
            const Real* go = self.grad.data() + o * inner;
            for (std::size_t m = 0; m < mid; ++m) {
              Real* gi = in.grad.data() + (o * mid + m) * inner;
              for (std::size_t i = 0; i < inner; ++i) gi[i] += go[i] * scale;
            }
          }
        });
  }

  Shape out_shape;
  auto map = detail::reduction_map(a.shape(), drop, out_shape);
  std::vector<Real> y(numel(out_shape), Real(0));
  const auto x = a.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[map[i]] += x[i];
  if (op == ReduceOp::mean)
    for (auto& v : y) v *= scale;

  return detail::make_result<Real>(
      std::move(out_shape), std::move(y), {a},
      [map = std::move(map), scale](detail::Node<Real>& self) {
        auto& in = *self.parents[0];
        in.ensure_grad();
        for (std::size_t i = 0; i < map.size(); ++i) in.grad[i] += self.grad[map[i]] * scale;
      });
}

template <class Real> Tensor<Real> sum(const Tensor<Real>& a, const std::vector<std::size_t>& axes) { return reduce(ReduceOp::sum, a, axes); }
template <class Real> Tensor<Real> mean(const Tensor<Real>& a, const std::vector<std::size_t>& axes) { return reduce(ReduceOp::mean, a, axes); }

template <class Real>
std::vector<std::size_t> all_axes(const Tensor<Real>& a) {
  std::vector<std::size_t> ax(a.rank());
  std::iota(ax.begin(), ax.end(), std::size_t{0});
  return ax;
}
template <class Real> Tensor<Real> sum_all(const Tensor<Real>& a) { return a.rank() ? sum(a, all_axes(a)) : a; }
template <class Real> Tensor<Real> mean_all(const Tensor<Real>& a) { return a.rank() ? mean(a, all_axes(a)) : a; }

// ---------------------------------------------------------------------------
// Layout operations

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<Real> y(a.data().begin(), a.data().end());
  return detail::make_result<Real>(std::move(shape), std::move(y), {a}, [](detail::Node<Real>& self) {
    auto& in = *self.parents[0];
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
  });
}

/// Gathers `indices` along `axis`.
template <class Real>
Tensor<Real> index_select(const Tensor<Real>& a, std::size_t axis, std::vector<std::size_t> indices) {
  if (axis >= a.rank()) throw ShapeError("index_select: axis out of range for " + shape_str(a.shape()));
  if (indices.empty()) throw ShapeError("index_select: empty index list");
  const std::size_t len = a.extent(axis);
  for (auto i : indices)
    if (i >= len) throw ShapeError("index_select: index " + std::to_string(i) + " >= " + std::to_string(len));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < a.rank(); ++d) {
    if (d < axis) outer *= a.extent(d);
    if (d > axis) inner *= a.extent(d);
  }
  Shape out_shape = a.shape();
  out_shape[axis] = indices.size();
  const auto x = a.data();
  std::vector<Real> y(outer * indices.size() * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < indices.size(); ++k)
      std::copy_n(x.begin() + (o * len + indices[k]) * inner, inner,
                  y.begin() + (o * indices.size() + k) * inner);
  return detail::make_result<Real>(
      std::move(out_shape), std::move(y), {a},
      [indices = std::move(indices), outer, inner, len](detail::Node<Real>& self) {
        auto& in = *self.parents[0];
        in.ensure_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t k = 0; k < indices.size(); ++k)
            for (std::size_t j = 0; j < inner; ++j)
              in.grad[(o * len + indices[k]) * inner + j] += self.grad[(o * indices.size() + k) * inner + j];
      });
}

/// Inserts a new axis of extent `count` at position `axis`, repeating values.
template <class Real>
Tensor<Real> expand(const Tensor<Real>& a, std::size_t axis, std::size_t count) {
  if (axis > a.rank()) throw ShapeError("expand: axis out of range for " + shape_str(a.shape()));
  if (count == 0) throw ShapeError("expand: zero extent");
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < a.rank(); ++d) (d < axis ? outer : inner) *= a.extent(d);
  Shape out_shape = a.shape();
  out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
  const auto x = a.data();
  std::vector<Real> y(outer * count * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < count; ++k)
      std::copy_n(x.begin() + o * inner, inner, y.begin() + (o * count + k) * inner);
  return detail::make_result<Real>(std::move(out_shape), std::move(y), {a},
                                   [outer, inner, count](detail::Node<Real>& self) {
    auto& in = *self.parents[0];
    in.ensure_grad();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < count; ++k)
        for (std::size_t j = 0; j < inner; ++j)
          in.grad[o * inner + j] += self.grad[(o * count + k) * inner + j];
  });
}

/// Stacks equally shaped tensors along a new leading axis.
template <class Real>
Tensor<Real> stack(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  const Shape& s = parts.front().shape();
  for (const auto& p : parts)
    if (p.shape() != s) throw ShapeError("stack: shapes " + shape_str(s) + " and " + shape_str(p.shape()));
  const std::size_t n = parts.front().size();
  std::vector<Real> y;
  y.reserve(n * parts.size());
  for (const auto& p : parts) y.insert(y.end(), p.data().begin(), p.data().end());
  Shape out_shape = s;
  out_shape.insert(out_shape.begin(), parts.size());
  return detail::make_result<Real>(std::move(out_shape), std::move(y), parts, [n](detail::Node<Real>& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto& in = *self.parents[k];
      if (!in.requires_grad) continue;
      in.ensure_grad();
      for (std::size_t j = 0; j < n; ++j) in.grad[j] += self.grad[k * n + j];
    }
  });
}

/// Softmax along `axis`.
template <class Real>
Tensor<Real> softmax(const Tensor<Real>& a, std::size_t axis) {
  if (axis >= a.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(a.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < a.rank(); ++d) {
    if (d < axis) outer *= a.extent(d);
    if (d > axis) inner *= a.extent(d);
  }
  const std::size_t len = a.extent(axis);
  const auto x = a.data();
  std::vector<Real> y(x.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      Real m = x[base];
      for (std::size_t k = 1; k < len; ++k) m = std::max(m, x[base + k * inner]);
      Real z = 0;
      for (std::size_t k = 0; k < len; ++k) {
        Real e = std::exp(x[base + k * inner] - m);
        y[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) y[base + k * inner] /= z;
    }
  return detail::make_result<Real>(a.shape(), std::move(y), {a},
                                   [outer, inner, len](detail::Node<Real>& self) {
    auto& in = *self.parents[0];
    in.ensure_grad();
    const auto& y = self.data;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        Real dot = 0;
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k)
          in.grad[base + k * inner] += y[base + k * inner] * (g[base + k * inner] - dot);
      }
  });
}

/// Throws if any value is NaN or infinite.
template <class Real>
void require_finite(const Tensor<Real>& t, const std::string& what) {
  for (auto v : t.data())
    if (!std::isfinite(v)) throw DomainError("non-finite value in " + what + " " + shape_str(t.shape()));
}

}  // namespace agmm
