#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "caps/attention/layer.hpp"

namespace caps {

struct ForecasterConfig {
  std::size_t lookback = 96;
  std::size_t horizon = 24;
  std::size_t channels = 1;
  std::size_t target_channels = 1;
  /// Channel indices decoded as targets; empty means the leading
  /// `target_channels` channels.
  std::vector<std::size_t> targets{};
  std::size_t num_layers = 3;
  CapsConfig caps{};
  std::size_t d_channel_token = 8;
  std::size_t d_value_token = 8;
  std::size_t ffn_expansion = 4;
  bool channel_dropout = true;
  double init_std = 0.02;

  std::size_t hidden() const noexcept { return d_channel_token + d_value_token; }
  std::size_t sequence_length() const noexcept { return lookback + horizon; }

  std::vector<std::size_t> target_indices() const {
    if (!targets.empty()) return targets;
    std::vector<std::size_t> idx;
    for (std::size_t c = 0; c < target_channels; ++c) idx.push_back(c);
    return idx;
  }

  void validate() const {
    caps.validate();
    if (lookback == 0 || horizon == 0) throw ConfigError("lookback and horizon must be >= 1");
    if (channels == 0) throw ConfigError("channels must be >= 1");
    if (target_channels == 0 || target_channels > channels) throw ConfigError("target_channels must be in [1, channels]");
    if (!targets.empty()) {
      if (targets.size() != target_channels) throw ConfigError("targets list length must equal target_channels");
      for (std::size_t c : targets) {
        if (c >= channels) throw ConfigError("target index " + std::to_string(c) + " out of range");
      }
    }
    if (num_layers == 0) throw ConfigError("num_layers must be >= 1");
    if (d_value_token == 0) throw ConfigError("d_value_token must be >= 1");
    if (hidden() % caps.num_heads != 0) throw ConfigError("hidden width must be divisible by num_heads");
    if (ffn_expansion == 0) throw ConfigError("ffn_expansion must be >= 1");
    if (!(init_std >= 0.0)) throw ConfigError("init_std must be >= 0");
  }
};

/// One encoder block. w_o: [H*d_h, d]; norm gains: [d]; ffn_in: [d, e*d];
/// ffn_out: [e*d, d].
template <class T>
struct LayerSlots {
  KernelSlots<T> kernel;
  T w_o, norm_attn, norm_ffn, ffn_in, ffn_out;
};

/// w_ext: [L, horizon]; w_chan: [C, d_ct]; value_embed: [C, d_vt] (shared by
/// tokenizer and decoder).
template <class T>
struct ForecasterSlots {
  T w_ext, w_chan, value_embed;
  std::vector<LayerSlots<T>> layers;

  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    f(std::string("w_ext"), self.w_ext);
    f(std::string("w_chan"), self.w_chan);
    f(std::string("value_embed"), self.value_embed);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string pre = "layers." + std::to_string(i) + ".";
      l.kernel.for_each([&](const char* name, auto& slot) { f(pre + name, slot); });
      f(pre + "w_o", l.w_o);
      f(pre + "norm_attn", l.norm_attn);
      f(pre + "norm_ffn", l.norm_ffn);
      f(pre + "ffn_in", l.ffn_in);
      f(pre + "ffn_out", l.ffn_out);
    }
  }
  template <class F> void for_each(F&& f) { visit(*this, f); }
  template <class F> void for_each(F&& f) const { visit(*this, f); }

  /// Same structure with every slot mapped through f(name, slot).
  template <class U, class F>
  ForecasterSlots<U> transform(F&& f) const {
    ForecasterSlots<U> out;
    out.layers.resize(layers.size());
    std::vector<U*> dst;
    out.for_each([&](const std::string&, U& slot) { dst.push_back(&slot); });
    std::size_t i = 0;
    for_each([&](const std::string& name, const T& slot) { *dst[i++] = f(name, slot); });
    return out;
  }
};

using ForecasterParams = ForecasterSlots<Array>;

inline ForecasterParams init_params(const ForecasterConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.hidden(), hd = cfg.caps.num_heads * cfg.caps.head_dim, f = cfg.ffn_expansion * d;
  const double out_std = cfg.init_std / std::sqrt(2.0 * static_cast<double>(cfg.num_layers));
  auto normal = [&](Shape shape, double std) {
    Array a(std::move(shape));
    for (double& x : a.data()) x = rng.normal(0.0, std);
    return a;
  };
  ForecasterParams p;
  p.w_ext = normal({cfg.lookback, cfg.horizon}, cfg.init_std);
  p.w_chan = normal({cfg.channels, cfg.d_channel_token}, cfg.init_std);
  p.value_embed = normal({cfg.channels, cfg.d_value_token}, cfg.init_std);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    LayerSlots<Array> l;
    l.kernel = init_kernel_params(d, cfg.caps, cfg.init_std, rng);
    l.w_o = normal({hd, d}, out_std);
    l.norm_attn = Array({d}, 1.0);
    l.norm_ffn = Array({d}, 1.0);
    l.ffn_in = normal({d, f}, cfg.init_std);
    l.ffn_out = normal({f, d}, out_std);
    p.layers.push_back(std::move(l));
  }
  return p;
}

inline std::size_t param_count(const ForecasterConfig& cfg) {
  const std::size_t d = cfg.hidden(), H = cfg.caps.num_heads, hd = H * cfg.caps.head_dim, f = cfg.ffn_expansion * d;
  const std::size_t per_layer = 3 * d * hd + 3 * d * H + hd / 2 + hd * d + 2 * d + 2 * d * f;
  return cfg.lookback * cfg.horizon + cfg.channels * (cfg.d_channel_token + cfg.d_value_token) +
         cfg.num_layers * per_layer;
}

inline std::size_t param_count(const ForecasterParams& params) {
  std::size_t n = 0;
  params.for_each([&](const std::string&, const Array& a) { n += a.size(); });
  return n;
}

// --- normalization -------------------------------------------------------------

struct Normalized {
  Array values;   // [B, C, L]
  Array anchors;  // [B, C]
};

inline Normalized last_value_normalize(const Array& x) {
  if (x.rank() != 3 || x.dim(2) == 0) throw ConfigError("normalize expects [B,C,L] with L >= 1, got " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0) * x.dim(1), L = x.dim(2);
  Normalized n{Array(x.shape()), Array({x.dim(0), x.dim(1)})};
  for (std::size_t r = 0; r < rows; ++r) {
    const double a = x[r * L + L - 1];
    n.anchors[r] = a;
    for (std::size_t t = 0; t < L; ++t) n.values[r * L + t] = x[r * L + t] - a;
  }
  return n;
}

/// y[B, C_t, horizon] + anchors[B, C_t] per channel.
inline Array denormalize(const Array& y, const Array& anchors) {
  if (y.rank() != 3 || anchors.shape() != Shape{y.dim(0), y.dim(1)}) {
    throw ConfigError("denormalize: anchors " + shape_str(anchors.shape()) + " do not match " + shape_str(y.shape()));
  }
  Array out(y.shape());
  const std::size_t n = y.dim(2);
  for (std::size_t r = 0; r < anchors.size(); ++r) {
    for (std::size_t t = 0; t < n; ++t) out[r * n + t] = y[r * n + t] + anchors[r];
  }
  return out;
}

/// Anchors of the target channels, [B, C_t].
inline Array select_channels(const Array& anchors, const std::vector<std::size_t>& idx) {
  const std::size_t B = anchors.dim(0), C = anchors.dim(1);
  Array out({B, idx.size()});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < idx.size(); ++k) out[b * idx.size() + k] = anchors[b * C + idx[k]];
  }
  return out;
}

// --- channel dropout ---------------------------------------------------------------

/// Masks channels of one sample with probability r each, conditioned on at least
/// one survivor. Survivors are scaled by 1 / P(kept | some channel survives) =
/// (1 - r^C) / (1 - r), which keeps every channel's expectation unchanged.
inline void drop_channels(std::span<double> sample, std::size_t C, double r, Rng& rng) {
  if (!(r >= 0.0 && r < 1.0)) throw ConfigError("dropout ratio must lie in [0, 1)");
  const std::size_t L = sample.size() / C;
  const double survive_scale = (1.0 - std::pow(r, static_cast<double>(C))) / (1.0 - r);
  bool need = true;
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t remaining = C - c;
    double p_keep = 1.0 - r;
    if (need) p_keep = remaining == 1 ? 1.0 : (1.0 - r) / (1.0 - std::pow(r, static_cast<double>(remaining)));
    const bool keep = rng.uniform() < p_keep;
    need = need && !keep;
    for (std::size_t t = 0; t < L; ++t) sample[c * L + t] = keep ? sample[c * L + t] * survive_scale : 0.0;
  }
}

/// Random-ratio channel dropout with a fixed ratio per sample.
inline Array channel_dropout(const Array& x, std::span<const double> ratios, std::span<Rng> rngs) {
  if (x.rank() != 3) throw ConfigError("channel_dropout expects [B,C,L]");
  if (ratios.size() != x.dim(0) || rngs.size() != x.dim(0)) throw ConfigError("channel_dropout: one ratio and rng per sample");
  Array out = x;
  const std::size_t stride = x.dim(1) * x.dim(2);
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    drop_channels(out.data().subspan(b * stride, stride), x.dim(1), ratios[b], rngs[b]);
  }
  return out;
}

/// Draws r_b ~ Uniform(0, 1) from each sample's stream, then masks.
inline Array channel_dropout(const Array& x, std::span<Rng> rngs) {
  if (x.rank() != 3 || rngs.size() != x.dim(0)) throw ConfigError("channel_dropout: one rng per sample");
  std::vector<double> ratios(x.dim(0));
  for (std::size_t b = 0; b < ratios.size(); ++b) ratios[b] = rngs[b].uniform();
  return channel_dropout(x, ratios, rngs);
}

/// [x~; x~ W_ext] along time: [B, C, L] -> [B, C, L + horizon].
inline Var extend_horizon(Var x, Var w_ext) {
  if (x.shape().size() != 3 || w_ext.shape().size() != 2 || w_ext.shape()[0] != x.shape()[2]) {
    throw ConfigError("extend_horizon: W_ext " + shape_str(w_ext.shape()) + " does not fit input " + shape_str(x.shape()));
  }
  return concat(x, matmul(x, w_ext), 2);
}

// --- tokenization and decoding ---------------------------------------------------------

/// x_ext[B, C, T] -> [B, C, T, d_ct + d_vt]: cross-channel token w_chan^T x_{.,t}
/// (same for every channel) followed by the value token x_{c,t} V_c.
inline Var tokenize(Var x_ext, Var w_chan, Var value_embed) {
  const Shape& sx = x_ext.shape();
  if (sx.size() != 3) throw ConfigError("tokenize expects [B,C,T], got " + shape_str(sx));
  const std::size_t B = sx[0], C = sx[1], T = sx[2];
  if (w_chan.shape().size() != 2 || w_chan.shape()[0] != C || value_embed.shape().size() != 2 ||
      value_embed.shape()[0] != C) {
    throw ConfigError("tokenize: embedding tables must have C rows");
  }
  const std::size_t dc = w_chan.shape()[1], dv = value_embed.shape()[1], d = dc + dv;
  const Array& xv = x_ext.value();
  const Array& wc = w_chan.value();
  const Array& ve = value_embed.value();
  Array out({B, C, T, d});
  std::vector<double> token(dc);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      std::fill(token.begin(), token.end(), 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        const double xc = xv[(b * C + c) * T + t];
        for (std::size_t j = 0; j < dc; ++j) token[j] += xc * wc[c * dc + j];
      }
      for (std::size_t c = 0; c < C; ++c) {
        double* o = &out.data()[((b * C + c) * T + t) * d];
        const double xc = xv[(b * C + c) * T + t];
        for (std::size_t j = 0; j < dc; ++j) o[j] = token[j];
        for (std::size_t j = 0; j < dv; ++j) o[dc + j] = xc * ve[c * dv + j];
      }
    }
  }
  return x_ext.tape->record(
      OpKind::kTokenize, {x_ext, w_chan, value_embed}, std::move(out),
      [x_ext, w_chan, value_embed, B, C, T, dc, dv, d](const Array& g, std::span<Array* const> gi) {
        const Array& xv = x_ext.value();
        const Array& wc = w_chan.value();
        const Array& ve = value_embed.value();
        std::vector<double> gtok(dc);
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t t = 0; t < T; ++t) {
            std::fill(gtok.begin(), gtok.end(), 0.0);
            for (std::size_t c = 0; c < C; ++c) {
              const double* gr = &g.data()[((b * C + c) * T + t) * d];
              for (std::size_t j = 0; j < dc; ++j) gtok[j] += gr[j];
              const std::size_t xi = (b * C + c) * T + t;
              if (gi[0]) {
                double acc = 0.0;
                for (std::size_t j = 0; j < dv; ++j) acc += gr[dc + j] * ve[c * dv + j];
                (*gi[0])[xi] += acc;
              }
              if (gi[2]) {
                for (std::size_t j = 0; j < dv; ++j) (*gi[2])[c * dv + j] += gr[dc + j] * xv[xi];
              }
            }
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t xi = (b * C + c) * T + t;
              if (gi[0]) {
                double acc = 0.0;
                for (std::size_t j = 0; j < dc; ++j) acc += gtok[j] * wc[c * dc + j];
                (*gi[0])[xi] += acc;
              }
              if (gi[1]) {
                for (std::size_t j = 0; j < dc; ++j) (*gi[1])[c * dc + j] += gtok[j] * xv[xi];
              }
            }
          }
        }
      });
}

/// h[B*C, T, d] -> y[B, C_t, horizon] with y = h[., L + s, d_ct:] . V_c over the
/// target channels.
inline Var decode(Var h, Var value_embed, const std::vector<std::size_t>& targets, std::size_t channels,
                  std::size_t lookback) {
  const Shape& sh = h.shape();
  const std::size_t dv = value_embed.shape().at(1);
  if (sh.size() != 3 || sh[0] % channels != 0 || sh[2] < dv || sh[1] <= lookback) {
    throw ConfigError("decode: unexpected hidden shape " + shape_str(sh));
  }
  const std::size_t B = sh[0] / channels, T = sh[1], d = sh[2], dc = d - dv, hor = T - lookback, K = targets.size();
  const Array& hv = h.value();
  const Array& ve = value_embed.value();
  Array out({B, K, hor});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t c = targets[k];
      for (std::size_t s = 0; s < hor; ++s) {
        const double* hr = &hv.data()[((b * channels + c) * T + lookback + s) * d + dc];
        double acc = 0.0;
        for (std::size_t j = 0; j < dv; ++j) acc += hr[j] * ve[c * dv + j];
        out[(b * K + k) * hor + s] = acc;
      }
    }
  }
  return h.tape->record(OpKind::kDecode, {h, value_embed}, std::move(out),
                        [h, value_embed, targets, channels, lookback, B, T, d, dc, dv, hor, K](
                            const Array& g, std::span<Array* const> gi) {
                          const Array& hv = h.value();
                          const Array& ve = value_embed.value();
                          for (std::size_t b = 0; b < B; ++b) {
                            for (std::size_t k = 0; k < K; ++k) {
                              const std::size_t c = targets[k];
                              for (std::size_t s = 0; s < hor; ++s) {
                                const std::size_t row = ((b * channels + c) * T + lookback + s) * d + dc;
                                const double go = g[(b * K + k) * hor + s];
                                for (std::size_t j = 0; j < dv; ++j) {
                                  if (gi[0]) (*gi[0])[row + j] += go * ve[c * dv + j];
                                  if (gi[1]) (*gi[1])[c * dv + j] += go * hv[row + j];
                                }
                              }
                            }
                          }
                        });
}

// --- forward -----------------------------------------------------------------------------

enum class Mode { kTrain, kEval };

/// Binds parameters to a tape: leaves when gradients are wanted, else constants.
inline ForecasterSlots<Var> bind(Tape& tape, const ForecasterParams& params, bool trainable) {
  return params.transform<Var>(
      [&](const std::string&, const Array& a) { return trainable ? tape.leaf(a) : tape.constant(a); });
}

/// Receives (layer index, normalized attention input [B*C, T, d]).
using LayerObserver = std::function<void(std::size_t, const Array&)>;

/// Hidden states after the encoder stack, [B*C, T, d].
inline Var encode(Var tokens, const ForecasterSlots<Var>& p, const ForecasterConfig& cfg, FlopCount* count = nullptr,
                  const LayerObserver& observe = {}) {
  const Shape& st = tokens.shape();
  const std::size_t S = st[0] * st[1], T = st[2], d = st[3];
  const std::size_t hd = cfg.caps.num_heads * cfg.caps.head_dim;
  Var h = reshape(tokens, {S, T, d});
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const auto& l = p.layers[i];
    const Var a = rms_norm(h, l.norm_attn);
    if (observe) observe(i, a.value());
    const Var att = caps_attention(a, l.kernel, cfg.caps, count);
    h = h + matmul(reshape(att, {S, T, hd}), l.w_o);
    h = h + matmul(gelu(matmul(rms_norm(h, l.norm_ffn), l.ffn_in)), l.ffn_out);
    if (!h.value().all_finite()) throw NumericError("non-finite activation in encoder layer " + std::to_string(i));
  }
  return h;
}

/// Forecast [B, C_t, horizon] in the input's units. `rngs` holds one stream per
/// sample and is only read in training mode with channel dropout enabled.
inline Var forward(Tape& tape, const ForecasterSlots<Var>& p, const ForecasterConfig& cfg, const Array& x, Mode mode,
                   std::span<Rng> rngs = {}, FlopCount* count = nullptr, const LayerObserver& observe = {}) {
  if (x.rank() != 3 || x.dim(1) != cfg.channels || x.dim(2) != cfg.lookback) {
    throw ConfigError("forward expects input [B," + std::to_string(cfg.channels) + "," + std::to_string(cfg.lookback) +
                      "], got " + shape_str(x.shape()));
  }
  // Masking acts on the centered series so a dropped channel keeps its anchor.
  const bool drop = mode == Mode::kTrain && cfg.channel_dropout;
  const Normalized n = last_value_normalize(x);
  const Var xn = tape.constant(drop ? channel_dropout(n.values, rngs) : n.values);
  const Var x_ext = extend_horizon(xn, p.w_ext);
  const Var h = encode(tokenize(x_ext, p.w_chan, p.value_embed), p, cfg, count, observe);
  const std::vector<std::size_t> targets = cfg.target_indices();
  const Var y = decode(h, p.value_embed, targets, cfg.channels, cfg.lookback);
  const Array anchors = select_channels(n.anchors, targets);
  Array shift(y.shape());
  for (std::size_t r = 0; r < anchors.size(); ++r) {
    for (std::size_t s = 0; s < cfg.horizon; ++s) shift[r * cfg.horizon + s] = anchors[r];
  }
  return y + tape.constant(std::move(shift));
}

/// Inference without gradients.
inline Array predict(const ForecasterParams& params, const ForecasterConfig& cfg, const Array& x) {
  Tape tape;
  return forward(tape, bind(tape, params, false), cfg, x, Mode::kEval).value();
}

}  // namespace caps
