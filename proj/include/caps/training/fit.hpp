#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "caps/data/series.hpp"
#include "caps/model/forecaster.hpp"
#include "caps/training/optim.hpp"

namespace caps {

struct TrainPolicy {
  std::size_t effective_batch = 32;
  std::size_t micro_batch = 32;
  std::size_t accumulation_steps = 1;
  double clip_norm = 1.0;
  std::size_t patience = 12;
  std::size_t epochs = 50;
  /// Caps optimizer steps per epoch (0 = one pass over all training windows).
  std::size_t max_steps_per_epoch = 0;
  /// Caps validation windows, taken evenly spaced (0 = all).
  std::size_t max_val_windows = 0;
  std::uint64_t seed = 2026;
  bool channel_dropout = true;
  OptimConfig optim{};

  void validate() const {
    if (micro_batch == 0 || accumulation_steps == 0) throw ConfigError("micro_batch and accumulation_steps must be >= 1");
    if (micro_batch * accumulation_steps != effective_batch) {
      throw ConfigError("micro_batch * accumulation_steps must equal effective_batch");
    }
    if (patience == 0) throw ConfigError("patience must be >= 1");
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
    optim.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_mse = 0.0;
  double val_mse = 0.0;
  double lr = 0.0;
};

struct FitResult {
  ForecasterParams best;
  std::size_t best_epoch = 0;
  double best_val_mse = 0.0;
  std::vector<EpochRecord> history;
  std::vector<std::string> events;  // e.g. skipped non-finite steps
};

/// Worker count from CAPS_THREADS (default 1).
inline std::size_t worker_threads() {
  const char* env = std::getenv("CAPS_THREADS");
  if (!env || !*env) return 1;
  const long n = std::strtol(env, nullptr, 10);
  return n > 0 ? static_cast<std::size_t>(n) : 1;
}

/// Runs job(i) for i in [0, n) on up to `threads` workers. Each index writes only
/// its own output slot, so the result is independent of scheduling.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) job(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline std::vector<Array*> param_pointers(ForecasterParams& p) {
  std::vector<Array*> out;
  p.for_each([&](const std::string&, Array& a) { out.push_back(&a); });
  return out;
}

/// Dropout stream of one training window in one epoch.
inline Rng window_rng(std::uint64_t seed, std::size_t epoch, std::size_t window_start) {
  return Rng(seed, 0x44524f50ULL).fork(epoch).fork(window_start);
}

struct MicroResult {
  std::vector<Array> grads;
  double loss = 0.0;
};

/// Loss and parameter gradients of one micro-batch on its own tape.
inline MicroResult micro_gradients(const ForecasterParams& params, const ForecasterConfig& cfg, const WindowBatch& batch,
                                   Mode mode, std::uint64_t seed, std::size_t epoch) {
  Tape tape;
  const ForecasterSlots<Var> slots = bind(tape, params, true);
  std::vector<Rng> rngs;
  for (std::size_t s : batch.starts) rngs.push_back(window_rng(seed, epoch, s));
  const Var loss = mse_loss(forward(tape, slots, cfg, batch.inputs, mode, rngs), tape.constant(batch.targets));
  tape.backward(loss);
  MicroResult r;
  r.loss = loss.value().item();
  slots.for_each([&](const std::string&, const Var& v) { r.grads.push_back(tape.grad(v)); });
  return r;
}

/// Mean loss and gradients of one optimizer step whose windows are split into
/// micro-batches. Micro-batch gradients are weighted by their share of windows and
/// reduced in index order.
inline MicroResult step_gradients(const ForecasterParams& params, const ForecasterConfig& cfg, const SeriesTable& table,
                                  std::span<const std::size_t> starts, std::size_t micro, Mode mode,
                                  std::uint64_t seed, std::size_t epoch, std::size_t threads = 1) {
  const std::size_t n = starts.size(), parts = (n + micro - 1) / micro;
  std::vector<MicroResult> results(parts);
  parallel_for(parts, threads, [&](std::size_t i) {
    const auto sub = starts.subspan(i * micro, std::min(micro, n - i * micro));
    results[i] = micro_gradients(params, cfg, make_batch(table, sub, cfg.lookback, cfg.horizon), mode, seed, epoch);
  });
  MicroResult total;
  for (std::size_t i = 0; i < parts; ++i) {
    const double w = static_cast<double>(std::min(micro, n - i * micro)) / static_cast<double>(n);
    total.loss += w * results[i].loss;
    if (total.grads.empty()) {
      for (const Array& g : results[i].grads) total.grads.emplace_back(g.shape(), 0.0);
    }
    for (std::size_t k = 0; k < total.grads.size(); ++k) {
      for (std::size_t j = 0; j < total.grads[k].size(); ++j) total.grads[k][j] += w * results[i].grads[k][j];
    }
  }
  return total;
}

inline std::vector<std::size_t> evenly_spaced(const std::vector<std::size_t>& s, std::size_t cap) {
  if (cap == 0 || s.size() <= cap) return s;
  std::vector<std::size_t> out(cap);
  for (std::size_t i = 0; i < cap; ++i) out[i] = s[i * s.size() / cap];
  return out;
}

/// Eval-mode forecasts and metrics over the given windows.
inline Metrics evaluate(const ForecasterParams& params, const ForecasterConfig& cfg, const SeriesTable& table,
                        const std::vector<std::size_t>& starts, std::size_t batch = 64, std::size_t threads = 1) {
  if (starts.empty()) throw ConfigError("evaluate: no windows");
  const std::size_t parts = (starts.size() + batch - 1) / batch;
  std::vector<Metrics> part(parts);
  parallel_for(parts, threads, [&](std::size_t i) {
    const auto sub = std::span<const std::size_t>(starts).subspan(i * batch, std::min(batch, starts.size() - i * batch));
    const WindowBatch b = make_batch(table, sub, cfg.lookback, cfg.horizon);
    part[i] = metrics(predict(params, cfg, b.inputs), b.targets);
  });
  Metrics m;
  for (std::size_t i = 0; i < parts; ++i) {
    const double w = static_cast<double>(std::min(batch, starts.size() - i * batch)) / static_cast<double>(starts.size());
    m.mse += w * part[i].mse;
    m.mae += w * part[i].mae;
  }
  return m;
}

/// Last-value baseline on the same windows.
inline Metrics naive_metrics(const SeriesTable& table, const std::vector<std::size_t>& starts, std::size_t lookback,
                             std::size_t horizon) {
  const WindowBatch b = make_batch(table, starts, lookback, horizon);
  Array pred(b.targets.shape());
  const std::size_t C = table.channels(), K = table.targets.size();
  for (std::size_t i = 0; i < starts.size(); ++i)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t t = 0; t < horizon; ++t) {
        pred[(i * K + k) * horizon + t] = b.inputs[(i * C + table.targets[k]) * lookback + lookback - 1];
      }
  return metrics(pred, b.targets);
}

/// Trains from `init` with early stopping on validation MSE (original units).
inline FitResult fit(ForecasterConfig cfg, ForecasterParams init, const SeriesTable& table, const Range& train,
                     const Range& val, const TrainPolicy& policy) {
  policy.validate();
  cfg.channel_dropout = policy.channel_dropout;
  cfg.targets = table.targets;
  cfg.target_channels = table.targets.size();
  cfg.validate();
  const auto train_starts = window_starts(train, cfg.lookback, cfg.horizon);
  const auto val_starts = evenly_spaced(window_starts(val, cfg.lookback, cfg.horizon), policy.max_val_windows);
  if (train_starts.empty() || val_starts.empty()) throw ConfigError("fit: empty train or validation windows");

  std::size_t steps_per_epoch = (train_starts.size() + policy.effective_batch - 1) / policy.effective_batch;
  if (policy.max_steps_per_epoch > 0) steps_per_epoch = std::min(steps_per_epoch, policy.max_steps_per_epoch);
  const std::size_t total_steps = steps_per_epoch * policy.epochs;
  const std::size_t threads = worker_threads();

  FitResult res;
  ForecasterParams params = std::move(init);
  std::vector<Array*> ptrs = param_pointers(params);
  OptimState state;
  std::size_t step = 0, since_best = 0;
  res.best = params;
  res.best_val_mse = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 1; epoch <= policy.epochs; ++epoch) {
    const auto order = shuffled(train_starts, policy.seed, epoch);
    double train_loss = 0.0, lr = 0.0;
    std::size_t seen = 0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t begin = s * policy.effective_batch;
      const std::size_t n = std::min(policy.effective_batch, order.size() - begin);
      const auto starts = std::span<const std::size_t>(order).subspan(begin, n);
      MicroResult g = step_gradients(params, cfg, table, starts, policy.micro_batch, Mode::kTrain, policy.seed, epoch,
                                     threads);
      train_loss += g.loss * static_cast<double>(n);
      seen += n;
      clip_global_norm(g.grads, policy.clip_norm);
      lr = one_cycle_lr(std::min(step, total_steps), total_steps, policy.optim);
      if (!adamw_step(ptrs, g.grads, state, lr, policy.optim)) {
        res.events.push_back("epoch " + std::to_string(epoch) + " step " + std::to_string(s) +
                             ": non-finite gradient, step skipped");
      }
      ++step;
    }
    const double val = evaluate(params, cfg, table, val_starts, 64, threads).mse;
    res.history.push_back({epoch, train_loss / static_cast<double>(seen), val, lr});
    if (val < res.best_val_mse) {
      res.best_val_mse = val;
      res.best_epoch = epoch;
      res.best = params;
      since_best = 0;
    } else if (++since_best >= policy.patience) {
      break;
    }
  }
  return res;
}

inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw ConfigError("cannot write " + path);
  os << "epoch,train_mse,val_mse,lr\n";
  for (const auto& r : history) {
    os << r.epoch << ',' << format_double(r.train_mse) << ',' << format_double(r.val_mse) << ',' << format_double(r.lr)
       << '\n';
  }
}

}  // namespace caps
