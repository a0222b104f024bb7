#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "caps/model/forecaster.hpp"
#include "caps/training/fit.hpp"

namespace caps {

/// Per-layer score decomposition of one (batch element, channel) sequence, each
/// computed with the materialized evaluator on that layer's normalized input.
inline std::vector<ScoreDecomposition> decompose(const ForecasterParams& params, const ForecasterConfig& cfg,
                                                 const Array& x, std::size_t batch_index, std::size_t channel) {
  if (x.rank() != 3 || batch_index >= x.dim(0) || channel >= cfg.channels) {
    throw ConfigError("decompose: batch element or channel out of range for input " + shape_str(x.shape()));
  }
  const std::size_t row = batch_index * cfg.channels + channel;
  std::vector<Array> inputs(cfg.num_layers);
  Tape tape;
  forward(tape, bind(tape, params, false), cfg, x, Mode::kEval, {}, nullptr, [&](std::size_t layer, const Array& a) {
    const std::size_t T = a.dim(1), d = a.dim(2);
    Array h({T, d});
    std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(row * T * d), T * d, h.data().begin());
    inputs[layer] = std::move(h);
  });
  std::vector<ScoreDecomposition> out;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    out.push_back(attend_quadratic(inputs[l], params.layers[l].kernel, cfg.caps).decomposition);
  }
  return out;
}

/// Long-format CSV: layer,head,t,i,G,A,B,rot_score,total (causal pairs only).
inline void write_decomposition_csv(const std::string& path, const std::vector<ScoreDecomposition>& layers) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write " + path);
  os << "layer,head,t,i,G,A,B,rot_score,total\n";
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const ScoreDecomposition& s = layers[l];
    const std::size_t T = s.G.dim(0), H = s.G.dim(2);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i <= t; ++i) {
          const std::size_t k = (t * T + i) * H + h;
          os << l << ',' << h << ',' << t << ',' << i << ',' << format_double(s.G[k]) << ',' << format_double(s.A[k])
             << ',' << format_double(s.B[k]) << ',' << format_double(s.rot_score[k]) << ','
             << format_double(s.total[k]) << '\n';
        }
  }
  if (!os) throw ConfigError("failed writing " + path);
}

inline std::vector<ScoreDecomposition> export_decomposition(const ForecasterParams& params,
                                                            const ForecasterConfig& cfg, const Array& x,
                                                            const std::string& path, std::size_t batch_index = 0,
                                                            std::size_t channel = 0) {
  auto layers = decompose(params, cfg, x, batch_index, channel);
  write_decomposition_csv(path, layers);
  return layers;
}

}  // namespace caps
