#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "caps/errors.hpp"
#include "caps/numerics/array.hpp"
#include "caps/numerics/rng.hpp"

namespace caps {

struct SeriesTable {
  std::vector<std::string> names;
  Array values;  // [T_total, C]
  std::vector<std::string> timestamps;
  std::vector<std::size_t> targets;  // channel indices forecast by the model

  std::size_t length() const { return values.empty() ? 0 : values.dim(0); }
  std::size_t channels() const { return names.size(); }
};

inline std::vector<std::size_t> resolve_targets(const std::vector<std::string>& names,
                                                const std::vector<std::string>& wanted) {
  std::vector<std::size_t> idx;
  if (wanted.empty()) {
    for (std::size_t c = 0; c < names.size(); ++c) idx.push_back(c);
    return idx;
  }
  for (const auto& w : wanted) {
    const auto it = std::find(names.begin(), names.end(), w);
    if (it == names.end()) throw ConfigError("unknown target channel '" + w + "'");
    idx.push_back(static_cast<std::size_t>(it - names.begin()));
  }
  return idx;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(std::string s) {
  const auto not_space = [](unsigned char ch) { return !std::isspace(ch); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

}  // namespace detail

/// Reads a comma-separated file whose first column is a timestamp and whose
/// remaining columns are numeric channels. Empty `target_names` selects every
/// channel.
inline SeriesTable load_csv(const std::string& path, const std::vector<std::string>& target_names = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open data file " + path);
  std::string line;
  if (!std::getline(in, line)) throw IngestionError(path + ": missing header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  if (header.size() < 2) throw IngestionError(path + ": need a timestamp column and at least one channel");
  SeriesTable table;
  for (std::size_t i = 1; i < header.size(); ++i) table.names.push_back(detail::trim(header[i]));
  table.targets = resolve_targets(table.names, target_names);

  const std::size_t C = table.names.size();
  std::vector<double> data;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != C + 1) {
      throw IngestionError(path + ": row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                           " cells, expected " + std::to_string(C + 1));
    }
    table.timestamps.push_back(detail::trim(cells[0]));
    for (std::size_t c = 0; c < C; ++c) {
      const std::string v = detail::trim(cells[c + 1]);
      double x = 0.0;
      const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
      if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(x)) {
        throw IngestionError(path + ": row " + std::to_string(row) + " column '" + table.names[c] +
                             "' has a missing or non-numeric value");
      }
      data.push_back(x);
    }
  }
  if (table.timestamps.empty()) throw IngestionError(path + ": no data rows");
  table.values = Array({table.timestamps.size(), C}, std::move(data));
  return table;
}

// --- splitting ------------------------------------------------------------------------

struct Range {
  std::size_t begin = 0, end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const Range&, const Range&) = default;
};

/// Chronological train/val/test ranges with floored boundaries. Each range must
/// hold at least one window of `window` = L + horizon steps.
inline std::array<Range, 3> split(std::size_t length, std::array<double, 3> ratios, std::size_t window) {
  for (double r : ratios) {
    if (!(r > 0.0)) throw ConfigError("split ratios must be positive");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  const double n = static_cast<double>(length);
  // the small slack keeps e.g. 0.7 * 100 from flooring to 69
  const auto b1 = static_cast<std::size_t>(std::floor(ratios[0] * n + 1e-9));
  const auto b2 = b1 + static_cast<std::size_t>(std::floor(ratios[1] * n + 1e-9));
  const std::array<Range, 3> out{Range{0, b1}, Range{b1, b2}, Range{b2, length}};
  const char* names[] = {"train", "val", "test"};
  for (std::size_t i = 0; i < 3; ++i) {
    if (out[i].size() < window) {
      throw ConfigError(std::string(names[i]) + " range has " + std::to_string(out[i].size()) +
                        " steps, fewer than lookback + horizon = " + std::to_string(window));
    }
  }
  return out;
}

// --- windows --------------------------------------------------------------------------

struct WindowBatch {
  Array inputs;   // [B, C, L]
  Array targets;  // [B, C_t, horizon]
  std::vector<std::size_t> starts;
};

inline std::size_t window_count(const Range& r, std::size_t lookback, std::size_t horizon) {
  return r.size() >= lookback + horizon ? r.size() - (lookback + horizon) + 1 : 0;
}

/// Start indices of every stride-1 window lying inside `r`.
inline std::vector<std::size_t> window_starts(const Range& r, std::size_t lookback, std::size_t horizon) {
  std::vector<std::size_t> s(window_count(r, lookback, horizon));
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = r.begin + i;
  return s;
}

inline WindowBatch make_batch(const SeriesTable& table, std::span<const std::size_t> starts, std::size_t lookback,
                              std::size_t horizon) {
  const std::size_t C = table.channels(), K = table.targets.size(), B = starts.size();
  WindowBatch batch{Array({B, C, lookback}), Array({B, K, horizon}), {starts.begin(), starts.end()}};
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t s = starts[b];
    if (s + lookback + horizon > table.length()) throw ConfigError("window exceeds series length");
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t t = 0; t < lookback; ++t) batch.inputs[(b * C + c) * lookback + t] = table.values[(s + t) * C + c];
    }
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t c = table.targets[k];
      for (std::size_t t = 0; t < horizon; ++t) {
        batch.targets[(b * K + k) * horizon + t] = table.values[(s + lookback + t) * C + c];
      }
    }
  }
  return batch;
}

/// Deterministic permutation of `starts` for one epoch.
inline std::vector<std::size_t> shuffled(std::vector<std::size_t> starts, std::uint64_t seed, std::uint64_t epoch) {
  Rng rng = Rng(seed, 0x5348554646ULL).fork(epoch);
  for (std::size_t i = starts.size(); i > 1; --i) std::swap(starts[i - 1], starts[rng.below(i)]);
  return starts;
}

// --- metrics and scaling -----------------------------------------------------------------

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
};

inline Metrics metrics(const Array& pred, const Array& truth) {
  if (pred.shape() != truth.shape()) {
    throw ConfigError("metrics: shape " + shape_str(pred.shape()) + " vs " + shape_str(truth.shape()));
  }
  if (pred.empty()) throw ConfigError("metrics of an empty array");
  Metrics m;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - truth[i];
    m.mse += e * e;
    m.mae += std::abs(e);
  }
  m.mse /= static_cast<double>(pred.size());
  m.mae /= static_cast<double>(pred.size());
  return m;
}

/// Per-channel z-scoring with statistics fitted on `fit` (usually the training
/// range). Off by default; only last-value normalization is part of the model.
struct ChannelScaler {
  std::vector<double> mean, std;

  static ChannelScaler fit(const SeriesTable& t, const Range& fit) {
    const std::size_t C = t.channels();
    ChannelScaler s{std::vector<double>(C, 0.0), std::vector<double>(C, 0.0)};
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t i = fit.begin; i < fit.end; ++i) s.mean[c] += t.values[i * C + c];
      s.mean[c] /= static_cast<double>(fit.size());
      for (std::size_t i = fit.begin; i < fit.end; ++i) {
        const double d = t.values[i * C + c] - s.mean[c];
        s.std[c] += d * d;
      }
      s.std[c] = std::sqrt(s.std[c] / static_cast<double>(fit.size()));
      if (s.std[c] == 0.0) s.std[c] = 1.0;
    }
    return s;
  }

  void apply(SeriesTable& t) const {
    const std::size_t C = t.channels();
    for (std::size_t i = 0; i < t.values.size(); ++i) t.values[i] = (t.values[i] - mean[i % C]) / std[i % C];
  }
};

}  // namespace caps
