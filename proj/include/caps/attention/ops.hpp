#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "caps/attention/kernels.hpp"
#include "caps/numerics/ops.hpp"

namespace caps {

/// Rotates coordinate pairs (x_{2l}, x_{2l+1}) of x[S, T, H, d_h] by angle
/// positions[t] * omega[h, l]. omega has shape [H, d_h / 2].
inline Var rotate(Var x, Var omega, std::vector<double> positions) {
  const Shape& sx = x.shape();
  if (sx.size() != 4 || sx[3] % 2 != 0) throw ConfigError("rotate expects [S,T,H,d_h] with even d_h, got " + shape_str(sx));
  const std::size_t S = sx[0], T = sx[1], H = sx[2], dh = sx[3], half = dh / 2;
  if (omega.shape() != Shape{H, half}) throw ConfigError("rotate: omega must be [H, d_h/2]");
  if (positions.size() != T) throw ConfigError("rotate: one position per time step required");

  const Array& xv = x.value();
  const Array& wv = omega.value();
  // cos/sin table [T, H, half]
  std::vector<double> cs(T * H * half), sn(T * H * half);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < H * half; ++j) {
      const double theta = positions[t] * wv[j];
      cs[t * H * half + j] = std::cos(theta);
      sn[t * H * half + j] = std::sin(theta);
    }
  }
  Array out(sx);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < H * half; ++j) {
        const std::size_t base = ((s * T + t) * H * half + j) * 2;
        const double c = cs[t * H * half + j], n = sn[t * H * half + j];
        const double x0 = xv[base], x1 = xv[base + 1];
        out[base] = c * x0 - n * x1;
        out[base + 1] = n * x0 + c * x1;
      }
    }
  }
  const Var self = x.tape->next();
  return x.tape->record(
      OpKind::kRotate, {x, omega}, std::move(out),
      [self, S, T, H, half, cs = std::move(cs), sn = std::move(sn), positions = std::move(positions)](
          const Array& g, std::span<Array* const> gi) {
        const Array& y = self.value();
        for (std::size_t s = 0; s < S; ++s) {
          for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t j = 0; j < H * half; ++j) {
              const std::size_t base = ((s * T + t) * H * half + j) * 2;
              const double c = cs[t * H * half + j], n = sn[t * H * half + j];
              const double g0 = g[base], g1 = g[base + 1];
              if (gi[0]) {
                (*gi[0])[base] += c * g0 + n * g1;
                (*gi[0])[base + 1] += -n * g0 + c * g1;
              }
              if (gi[1]) (*gi[1])[j] += positions[t] * (-g0 * y[base + 1] + g1 * y[base]);
            }
          }
        }
      });
}

namespace detail {

struct AttentionShape {
  std::size_t S, T, H, dh;
};

inline AttentionShape check_attention_inputs(Var q, Var k, Var v, Var p, Var delta, Var gtilde) {
  const Shape& sq = q.shape();
  if (sq.size() != 4) throw ConfigError("attention expects q of shape [S,T,H,d_h], got " + shape_str(sq));
  if (k.shape() != sq || v.shape() != sq) throw ConfigError("attention: q, k, v shapes differ");
  const Shape sg{sq[0], sq[1], sq[2]};
  if (p.shape() != sg || delta.shape() != sg || gtilde.shape() != sg) {
    throw ConfigError("attention: gate signals must have shape " + shape_str(sg));
  }
  if (sq[1] == 0) throw ConfigError("attention over an empty sequence");
  return {sq[0], sq[1], sq[2], sq[3]};
}

inline kernel::Inputs kernel_inputs(Var q, Var k, Var v, Var p, Var delta, Var gtilde) {
  return {q.value().data().data(), k.value().data().data(),     v.value().data().data(),
          p.value().data().data(), delta.value().data().data(), gtilde.value().data().data()};
}

inline double* grad_ptr(Array* a) { return a ? a->data().data() : nullptr; }

}  // namespace detail

/// Recurrent CAPS attention (identity score map). Inputs: rotated q, k and v of
/// shape [S,T,H,d_h]; gate signals p, delta, g~ of shape [S,T,H].
inline Var caps_attend_linear(Var q, Var k, Var v, Var p, Var delta, Var gtilde, const PathFlags& paths,
                              double scale, FlopCount* count = nullptr) {
  const auto [S, T, H, dh] = detail::check_attention_inputs(q, k, v, p, delta, gtilde);
  if (!paths.any()) throw ConfigError("at least one attention path must be enabled");
  const kernel::Inputs in = detail::kernel_inputs(q, k, v, p, delta, gtilde);
  Array out(q.shape());
  Tape& tape = *q.tape;
  const bool keep = tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v) ||
                    tape.requires_grad(p) || tape.requires_grad(delta) || tape.requires_grad(gtilde);
  auto saved = std::make_shared<std::vector<kernel::LinearSaved>>(keep ? S * H : 0);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t h = 0; h < H; ++h) {
      kernel::linear_forward(in, kernel::make_slice(s, h, T, H, dh), paths, scale, out.data().data(),
                             keep ? &(*saved)[s * H + h] : nullptr, count);
    }
  }
  return tape.record(OpKind::kCapsLinear, {q, k, v, p, delta, gtilde}, std::move(out),
                     [q, k, v, p, delta, gtilde, paths, scale, S, T, H, dh, saved](const Array& g, std::span<Array* const> gi) {
                       const kernel::Inputs in = detail::kernel_inputs(q, k, v, p, delta, gtilde);
                       const kernel::Grads grads{detail::grad_ptr(gi[0]), detail::grad_ptr(gi[1]), detail::grad_ptr(gi[2]),
                                                 detail::grad_ptr(gi[3]), detail::grad_ptr(gi[4]), detail::grad_ptr(gi[5])};
                       for (std::size_t s = 0; s < S; ++s) {
                         for (std::size_t h = 0; h < H; ++h) {
                           kernel::linear_backward(in, kernel::make_slice(s, h, T, H, dh), paths, scale,
                                                   g.data().data(), (*saved)[s * H + h], grads);
                         }
                       }
                     });
}

/// Materialized CAPS attention; supports both score maps.
inline Var caps_attend_quadratic(Var q, Var k, Var v, Var p, Var delta, Var gtilde, const PathFlags& paths,
                                 PhiMode phi, double scale, FlopCount* count = nullptr) {
  const auto [S, T, H, dh] = detail::check_attention_inputs(q, k, v, p, delta, gtilde);
  if (!paths.any()) throw ConfigError("at least one attention path must be enabled");
  const kernel::Inputs in = detail::kernel_inputs(q, k, v, p, delta, gtilde);
  Array out(q.shape());
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t h = 0; h < H; ++h) {
      kernel::quadratic_forward(in, kernel::make_slice(s, h, T, H, dh), paths, phi, scale, out.data().data(), count);
    }
  }
  return q.tape->record(OpKind::kCapsQuadratic, {q, k, v, p, delta, gtilde}, std::move(out),
                        [q, k, v, p, delta, gtilde, paths, phi, scale, S, T, H, dh](const Array& g, std::span<Array* const> gi) {
                          const kernel::Inputs in = detail::kernel_inputs(q, k, v, p, delta, gtilde);
                          const kernel::Grads grads{detail::grad_ptr(gi[0]), detail::grad_ptr(gi[1]), detail::grad_ptr(gi[2]),
                                                    detail::grad_ptr(gi[3]), detail::grad_ptr(gi[4]), detail::grad_ptr(gi[5])};
                          for (std::size_t s = 0; s < S; ++s) {
                            for (std::size_t h = 0; h < H; ++h) {
                              kernel::quadratic_backward(in, kernel::make_slice(s, h, T, H, dh), paths, phi, scale,
                                                         g.data().data(), grads);
                            }
                          }
                        });
}

}  // namespace caps
