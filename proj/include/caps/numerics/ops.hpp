#pragma once

// Differentiable primitives over Tape-recorded Arrays. Broadcasting is limited
// to trailing-axis expansion: the smaller operand's shape must be a suffix of
// the larger one's.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "caps/numerics/tape.hpp"

namespace caps {

namespace detail {

inline bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ConfigError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

enum class Binary { kAdd, kSub, kMul };

inline Var binary(Binary op, Var a, Var b) {
  Tape& tape = *a.tape;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool a_big = is_suffix(sb, sa);
  if (!a_big && !is_suffix(sa, sb)) {
    throw ConfigError("cannot broadcast " + shape_str(sa) + " with " + shape_str(sb));
  }
  const Array& av = a.value();
  const Array& bv = b.value();
  const Shape out_shape = a_big ? sa : sb;
  const std::size_t n = shape_size(out_shape);
  const std::size_t na = av.size(), nb = bv.size();
  Array out(out_shape);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[i % na], y = bv[i % nb];
    out[i] = op == Binary::kAdd ? x + y : op == Binary::kSub ? x - y : x * y;
  }
  const OpKind kind = op == Binary::kAdd ? OpKind::kAdd : op == Binary::kSub ? OpKind::kSub : OpKind::kMul;
  return tape.record(kind, {a, b}, std::move(out), [a, b, op, n, na, nb](const Array& g, std::span<Array* const> gi) {
    const Array& av = a.value();
    const Array& bv = b.value();
    if (gi[0]) {
      Array& ga = *gi[0];
      for (std::size_t i = 0; i < n; ++i) ga[i % na] += op == Binary::kMul ? g[i] * bv[i % nb] : g[i];
    }
    if (gi[1]) {
      Array& gb = *gi[1];
      for (std::size_t i = 0; i < n; ++i) {
        gb[i % nb] += op == Binary::kMul ? g[i] * av[i % na] : op == Binary::kSub ? -g[i] : g[i];
      }
    }
  });
}

/// Elementwise unary with derivative expressed through (input, output).
template <class Fwd, class Deriv>
Var unary(OpKind kind, Var a, Fwd fwd, Deriv deriv) {
  Tape& tape = *a.tape;
  const Array& av = a.value();
  Array out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  const Var self = tape.next();
  return tape.record(kind, {a}, std::move(out), [a, self, deriv](const Array& g, std::span<Array* const> gi) {
    const Array& x = a.value();
    const Array& y = self.value();
    Array& ga = *gi[0];
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * deriv(x[i], y[i]);
  });
}

}  // namespace detail

inline Var add(Var a, Var b) { return detail::binary(detail::Binary::kAdd, a, b); }
inline Var sub(Var a, Var b) { return detail::binary(detail::Binary::kSub, a, b); }
inline Var mul(Var a, Var b) { return detail::binary(detail::Binary::kMul, a, b); }

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

inline Var exp(Var a) {
  return detail::unary(
      OpKind::kExp, a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
  for (double x : a.value().data()) {
    if (!(x > 0.0)) throw NumericError("log of non-positive value " + std::to_string(x));
  }
  return detail::unary(
      OpKind::kLog, a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// log(1 + e^z) via the stable split max(z, 0) + log1p(e^{-|z|}).
inline Var softplus(Var a) {
  return detail::unary(
      OpKind::kSoftplus, a, [](double x) { return detail::softplus(x); },
      [](double x, double) { return detail::sigmoid(x); });
}

inline Var neg(Var a) {
  return detail::unary(
      OpKind::kNeg, a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Var operator-(Var a) { return neg(a); }

inline Var recip(Var a) {
  for (double x : a.value().data()) {
    if (x == 0.0) throw NumericError("reciprocal of zero");
  }
  return detail::unary(
      OpKind::kRecip, a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

inline Var square(Var a) {
  return detail::unary(
      OpKind::kSquare, a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var scale(Var a, double c) {
  return detail::unary(
      OpKind::kScale, a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_scalar(Var a, double c) {
  return detail::unary(
      OpKind::kAddScalar, a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

/// Exact (erf-based) GELU.
inline Var gelu(Var a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary(
      OpKind::kGelu, a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

/// Elementwise maximum of equal-shaped operands; ties route the gradient to `a`.
inline Var max_pair(Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("max_pair shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Array& av = a.value();
  const Array& bv = b.value();
  Array out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::max(av[i], bv[i]);
  return a.tape->record(OpKind::kMaxPair, {a, b}, std::move(out), [a, b](const Array& g, std::span<Array* const> gi) {
    const Array& av = a.value();
    const Array& bv = b.value();
    for (std::size_t i = 0; i < av.size(); ++i) {
      const bool pick_a = av[i] >= bv[i];
      if (pick_a && gi[0]) (*gi[0])[i] += g[i];
      if (!pick_a && gi[1]) (*gi[1])[i] += g[i];
    }
  });
}

/// a[..., k] x b[k, n] -> [..., n]; leading axes of `a` are flattened into rows.
inline Var matmul(Var a, Var b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.empty() || sb.size() != 2 || sa.back() != sb[0]) {
    throw ConfigError("matmul shape mismatch " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t k = sb[0], n = sb[1], m = a.value().size() / k;
  Shape out_shape = sa;
  out_shape.back() = n;
  Array out(out_shape);
  const double* A = a.value().data().data();
  const double* B = b.value().data().data();
  double* O = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = O + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return a.tape->record(OpKind::kMatmul, {a, b}, std::move(out), [a, b, m, k, n](const Array& g, std::span<Array* const> gi) {
    const double* A = a.value().data().data();
    const double* B = b.value().data().data();
    const double* G = g.data().data();
    if (gi[0]) {
      double* GA = gi[0]->data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* brow = B + p * n;
          const double* grow = G + i * n;
          for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
          GA[i * k + p] += acc;
        }
      }
    }
    if (gi[1]) {
      double* GB = gi[1]->data().data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = A[i * k + p];
          const double* grow = G + i * n;
          double* gbrow = GB + p * n;
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
        }
      }
    }
  });
}

/// Inclusive prefix sum along `axis`; its gradient is the reverse prefix sum.
inline Var cumsum(Var a, std::size_t axis) {
  const auto [outer, len, inner] = detail::split_axis(a.shape(), axis);
  const Array& av = a.value();
  Array out(av.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      double acc = 0.0;
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t idx = (o * len + t) * inner + in;
        acc += av[idx];
        out[idx] = acc;
      }
    }
  }
  return a.tape->record(OpKind::kCumsum, {a}, std::move(out), [outer, len, inner](const Array& g, std::span<Array* const> gi) {
    Array& ga = *gi[0];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        double acc = 0.0;
        for (std::size_t t = len; t-- > 0;) {
          const std::size_t idx = (o * len + t) * inner + in;
          acc += g[idx];
          ga[idx] += acc;
        }
      }
    }
  });
}

/// Inclusive running maximum along `axis`; gradient flows to the first argmax.
inline Var cummax(Var a, std::size_t axis) {
  const auto [outer, len, inner] = detail::split_axis(a.shape(), axis);
  const Array& av = a.value();
  Array out(av.shape());
  std::vector<std::size_t> source(av.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      double best = -std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t t = 0; t < len; ++t) {
        const std::size_t idx = (o * len + t) * inner + in;
        if (t == 0 || av[idx] > best) {
          best = av[idx];
          arg = idx;
        }
        out[idx] = best;
        source[idx] = arg;
      }
    }
  }
  return a.tape->record(OpKind::kCummax, {a}, std::move(out), [source = std::move(source)](const Array& g, std::span<Array* const> gi) {
    Array& ga = *gi[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[source[i]] += g[i];
  });
}

inline Var sum(Var a) {
  double acc = 0.0;
  for (double x : a.value().data()) acc += x;
  return a.tape->record(OpKind::kSum, {a}, Array::scalar(acc), [](const Array& g, std::span<Array* const> gi) {
    const double s = g[0];
    for (double& x : gi[0]->data()) x += s;
  });
}

inline Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  double acc = 0.0;
  for (double x : a.value().data()) acc += x;
  return a.tape->record(OpKind::kMean, {a}, Array::scalar(acc / n), [n](const Array& g, std::span<Array* const> gi) {
    const double s = g[0] / n;
    for (double& x : gi[0]->data()) x += s;
  });
}

inline Var reshape(Var a, Shape shape) {
  Array out = a.value().reshaped(std::move(shape));
  return a.tape->record(OpKind::kReshape, {a}, std::move(out), [](const Array& g, std::span<Array* const> gi) {
    Array& ga = *gi[0];
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// Concatenation along `axis`; all other extents must agree.
inline Var concat(Var a, Var b, std::size_t axis) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || axis >= sa.size()) throw ConfigError("concat rank mismatch");
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (i != axis && sa[i] != sb[i]) {
      throw ConfigError("concat shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    }
  }
  const auto ta = detail::split_axis(sa, axis);
  const std::size_t la = sa[axis] * ta.inner, lb = sb[axis] * ta.inner;
  Shape out_shape = sa;
  out_shape[axis] += sb[axis];
  Array out(out_shape);
  const Array& av = a.value();
  const Array& bv = b.value();
  for (std::size_t o = 0; o < ta.outer; ++o) {
    std::copy_n(&av.data()[o * la], la, &out.data()[o * (la + lb)]);
    std::copy_n(&bv.data()[o * lb], lb, &out.data()[o * (la + lb) + la]);
  }
  return a.tape->record(OpKind::kConcat, {a, b}, std::move(out), [outer = ta.outer, la, lb](const Array& g, std::span<Array* const> gi) {
    for (std::size_t o = 0; o < outer; ++o) {
      if (gi[0]) {
        for (std::size_t j = 0; j < la; ++j) (*gi[0])[o * la + j] += g[o * (la + lb) + j];
      }
      if (gi[1]) {
        for (std::size_t j = 0; j < lb; ++j) (*gi[1])[o * lb + j] += g[o * (la + lb) + la + j];
      }
    }
  });
}

/// Half-open range [begin, end) along `axis`.
inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto [outer, len, inner] = detail::split_axis(a.shape(), axis);
  if (begin > end || end > len) throw ConfigError("slice bounds out of range");
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  Array out(out_shape);
  const std::size_t w = (end - begin) * inner;
  const Array& av = a.value();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(&av.data()[(o * len + begin) * inner], w, &out.data()[o * w]);
  }
  return a.tape->record(OpKind::kSlice, {a}, std::move(out), [outer, len, inner, begin, w](const Array& g, std::span<Array* const> gi) {
    Array& ga = *gi[0];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < w; ++j) ga[(o * len + begin) * inner + j] += g[o * w + j];
    }
  });
}

/// y = gain * x / sqrt(mean(x^2) + eps) over the trailing axis.
inline Var rms_norm(Var x, Var gain, double eps = 1e-8) {
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d}) throw ConfigError("rms_norm gain must have shape [" + std::to_string(d) + "]");
  const Array& xv = x.value();
  const Array& gv = gain.value();
  const std::size_t rows = xv.size() / d;
  Array out(xv.shape());
  std::vector<double> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &xv.data()[r * d];
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = gv[j] * xr[j] * inv[r];
  }
  return x.tape->record(OpKind::kRmsNorm, {x, gain}, std::move(out), [x, gain, d, rows, inv = std::move(inv)](const Array& g, std::span<Array* const> gi) {
    const Array& xv = x.value();
    const Array& gv = gain.value();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = &xv.data()[r * d];
      const double* gr = &g.data()[r * d];
      if (gi[1]) {
        for (std::size_t j = 0; j < d; ++j) (*gi[1])[j] += gr[j] * xr[j] * inv[r];
      }
      if (gi[0]) {
        // d/dx_j of gain_j x_j s with s = (mean x^2 + eps)^{-1/2}
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += gr[j] * gv[j] * xr[j];
        const double c = dot * inv[r] * inv[r] * inv[r] / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) (*gi[0])[r * d + j] += gr[j] * gv[j] * inv[r] - c * xr[j];
      }
    }
  });
}

}  // namespace caps
