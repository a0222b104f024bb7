#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "caps/cli/run_config.hpp"
#include "caps/diagnostics/decomposition.hpp"
#include "caps/diagnostics/flops.hpp"
#include "caps/diagnostics/propositions.hpp"
#include "caps/model/checkpoint.hpp"

namespace caps::cli {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kConfigError = 2, kNumericError = 3 };

/// Command-line overrides layered over the config file.
struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> disable;   // ablate
  std::optional<std::string> horizons;  // eval
  std::optional<std::string> t_list;    // bench
  std::ostream* log = &std::cerr;
};

inline RunConfig resolve(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  RunConfig rc = load_run_config(o.config);
  if (o.seed) rc.run.seed = rc.train.seed = *o.seed;
  if (o.out) rc.run.out = *o.out;
  if (o.horizons) rc.run.horizons = detail::parse_list<std::size_t>("--horizons", *o.horizons);
  if (o.t_list) rc.run.t_list = detail::parse_list<std::size_t>("--t-list", *o.t_list);
  return rc;
}

// --- files --------------------------------------------------------------------------

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// SHA-1 of "blob <size>\0" + content, matching `git hash-object`.
inline std::string git_blob_sha1(const std::string& content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s += hex[md[i] >> 4];
    s += hex[md[i] & 15];
  }
  return s;
}

inline std::filesystem::path prepare_out(const RunConfig& rc) {
  std::filesystem::path out(rc.run.out);
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw ConfigError("cannot create output directory " + out.string() + ": " + ec.message());
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os || !(os << text)) throw ConfigError("cannot write " + path.string());
}

// --- data and model ------------------------------------------------------------------

struct Dataset {
  SeriesTable table;
  std::array<Range, 3> ranges;
};

inline Dataset load_dataset(const RunConfig& rc) {
  Dataset d;
  if (rc.dataset.synthetic) {
    d.table = generate_synthetic(*rc.dataset.synthetic).table;
    d.table.targets = resolve_targets(d.table.names, rc.dataset.targets);
  } else {
    d.table = load_csv(rc.dataset.csv, rc.dataset.targets);
  }
  d.ranges = split(d.table.length(), rc.dataset.split, rc.model.lookback + rc.model.horizon);
  if (rc.dataset.standardize) ChannelScaler::fit(d.table, d.ranges[0]).apply(d.table);
  return d;
}

inline ForecasterConfig model_config(const RunConfig& rc, const SeriesTable& table) {
  ForecasterConfig c = rc.model;
  c.channels = table.channels();
  c.targets = table.targets;
  c.target_channels = table.targets.size();
  c.channel_dropout = rc.train.channel_dropout;
  c.validate();
  return c;
}

struct SplitMetrics {
  Metrics model, naive;
  std::size_t windows = 0;
};

/// Model and last-value metrics on the first `h` forecast steps of every window.
inline SplitMetrics horizon_metrics(const ForecasterParams& p, const ForecasterConfig& c, const SeriesTable& table,
                                    const Range& r, std::size_t h) {
  if (h == 0 || h > c.horizon) {
    throw ConfigError("horizon " + std::to_string(h) + " outside [1, " + std::to_string(c.horizon) + "]");
  }
  const auto starts = window_starts(r, c.lookback, c.horizon);
  if (starts.empty()) throw ConfigError("split has no complete windows");
  const std::size_t K = c.target_channels, threads = worker_threads(), batch = 64;
  const std::size_t parts = (starts.size() + batch - 1) / batch;
  std::vector<std::array<double, 4>> sums(parts, {0, 0, 0, 0});
  parallel_for(parts, threads, [&](std::size_t i) {
    const auto sub = std::span<const std::size_t>(starts).subspan(i * batch, std::min(batch, starts.size() - i * batch));
    const WindowBatch b = make_batch(table, sub, c.lookback, c.horizon);
    const Array pred = predict(p, c, b.inputs);
    for (std::size_t w = 0; w < sub.size(); ++w)
      for (std::size_t k = 0; k < K; ++k) {
        const double last = b.inputs[(w * table.channels() + c.targets[k]) * c.lookback + c.lookback - 1];
        for (std::size_t t = 0; t < h; ++t) {
          const std::size_t idx = (w * K + k) * c.horizon + t;
          const double e = pred[idx] - b.targets[idx], n = last - b.targets[idx];
          sums[i][0] += e * e;
          sums[i][1] += std::abs(e);
          sums[i][2] += n * n;
          sums[i][3] += std::abs(n);
        }
      }
  });
  std::array<double, 4> total{0, 0, 0, 0};
  for (const auto& s : sums)
    for (std::size_t j = 0; j < 4; ++j) total[j] += s[j];
  const double n = static_cast<double>(starts.size() * K * h);
  return {{total[0] / n, total[1] / n}, {total[2] / n, total[3] / n}, starts.size()};
}

inline std::string metrics_csv_header() { return "split,horizon,windows,mse,mae,naive_mse,naive_mae\n"; }

inline std::string metrics_csv_row(const std::string& split_name, std::size_t h, const SplitMetrics& m) {
  return split_name + "," + std::to_string(h) + "," + std::to_string(m.windows) + "," + format_double(m.model.mse) +
         "," + format_double(m.model.mae) + "," + format_double(m.naive.mse) + "," + format_double(m.naive.mae) + "\n";
}

// --- train / ablate -------------------------------------------------------------------

struct TrainOutcome {
  FitResult fit;
  ForecasterConfig config;
  SplitMetrics val, test;
};

inline TrainOutcome train_run(const RunConfig& rc, const Dataset& data, std::ostream& log) {
  const ForecasterConfig c = model_config(rc, data.table);
  Rng rng = Rng(rc.run.seed, 0x494e4954ULL);
  TrainOutcome o;
  o.config = c;
  o.fit = fit(c, init_params(c, rng), data.table, data.ranges[0], data.ranges[1], rc.train);
  for (const auto& e : o.fit.events) log << "warning: " << e << "\n";
  for (const auto& r : o.fit.history) {
    log << "epoch " << r.epoch << " train_mse " << format_double(r.train_mse) << " val_mse "
        << format_double(r.val_mse) << "\n";
  }
  if (!std::isfinite(o.fit.best_val_mse)) throw NumericError("training produced no finite validation loss");
  o.val = horizon_metrics(o.fit.best, c, data.table, data.ranges[1], c.horizon);
  o.test = horizon_metrics(o.fit.best, c, data.table, data.ranges[2], c.horizon);
  return o;
}

inline void write_train_outputs(const RunConfig& rc, const TrainOutcome& o, const std::filesystem::path& out,
                                const std::string& command) {
  write_text(out / "config.ini", to_ini(rc));
  save_checkpoint((out / "model.ckpt").string(), o.config, o.fit.best);
  write_history_csv((out / "metrics.csv").string(), o.fit.history);
  write_text(out / "test_metrics.csv", metrics_csv_header() + metrics_csv_row("val", o.config.horizon, o.val) +
                                           metrics_csv_row("test", o.config.horizon, o.test));
  nlohmann::json inputs = nlohmann::json::object();
  if (!rc.source.empty()) inputs["config"] = {{"path", rc.source}, {"git_blob_sha1", git_blob_sha1(read_file(rc.source))}};
  if (!rc.dataset.csv.empty()) {
    inputs["csv"] = {{"path", rc.dataset.csv}, {"git_blob_sha1", git_blob_sha1(read_file(rc.dataset.csv))}};
  }
  const nlohmann::json manifest = {{"command", command},
                                   {"seed", rc.run.seed},
                                   {"model", to_json(o.config)},
                                   {"param_count", param_count(o.fit.best)},
                                   {"best_epoch", o.fit.best_epoch},
                                   {"best_val_mse", o.fit.best_val_mse},
                                   {"test_mse", o.test.model.mse},
                                   {"naive_test_mse", o.test.naive.mse},
                                   {"epochs_run", o.fit.history.size()},
                                   {"events", o.fit.events},
                                   {"inputs", inputs}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
}

inline int cmd_train(const Options& opt) {
  const RunConfig rc = resolve(opt);
  const Dataset data = load_dataset(rc);
  const auto out = prepare_out(rc);
  const TrainOutcome o = train_run(rc, data, *opt.log);
  write_train_outputs(rc, o, out, "train");
  std::cout << "best epoch " << o.fit.best_epoch << " val_mse " << format_double(o.fit.best_val_mse) << " test_mse "
            << format_double(o.test.model.mse) << " naive_test_mse " << format_double(o.test.naive.mse) << "\n";
  return kOk;
}

/// Disabled path names ("riemann,prefix") applied to `paths`.
inline PathFlags disable_paths(PathFlags paths, const std::string& list) {
  for (const auto& p : detail::split_list(list)) {
    if (p == "riemann") paths.riemann = false;
    else if (p == "prefix") paths.prefix = false;
    else if (p == "clock") paths.clock = false;
    else throw ConfigError("--disable: unknown path '" + p + "' (expected riemann|prefix|clock)");
  }
  if (!paths.any()) throw ConfigError("--disable would remove every attention path");
  return paths;
}

inline int cmd_ablate(const Options& opt) {
  RunConfig rc = resolve(opt);
  const std::string disabled = opt.disable.value_or("");
  rc.model.caps.paths = disable_paths(rc.model.caps.paths, disabled);
  const Dataset data = load_dataset(rc);
  const auto out = prepare_out(rc);
  const TrainOutcome o = train_run(rc, data, *opt.log);
  write_train_outputs(rc, o, out, "ablate");
  std::string tag;
  for (const auto& p : detail::split_list(disabled)) tag += (tag.empty() ? "" : ";") + p;
  write_text(out / "ablation.csv",
             "disabled,enabled,val_mse,test_mse,test_mae,naive_test_mse\n\"" + tag + "\",\"" +
                 detail::paths_string(rc.model.caps.paths) + "\"," + format_double(o.val.model.mse) + "," +
                 format_double(o.test.model.mse) + "," + format_double(o.test.model.mae) + "," +
                 format_double(o.test.naive.mse) + "\n");
  std::cout << "disabled {" << tag << "} test_mse " << format_double(o.test.model.mse) << "\n";
  return kOk;
}

// --- eval ---------------------------------------------------------------------------

inline Checkpoint load_run_checkpoint(const RunConfig& rc) {
  const auto path = std::filesystem::path(rc.run.out) / "model.ckpt";
  if (!std::filesystem::exists(path)) throw ConfigError("no checkpoint at " + path.string() + " (run train first)");
  return load_checkpoint(path.string());
}

inline int cmd_eval(const Options& opt) {
  const RunConfig rc = resolve(opt);
  const Dataset data = load_dataset(rc);
  const Checkpoint ck = load_run_checkpoint(rc);
  if (ck.config.channels != data.table.channels() || ck.config.targets != data.table.targets) {
    throw ConfigError("checkpoint channels or targets do not match the dataset");
  }
  std::vector<std::size_t> hs = rc.run.horizons;
  if (hs.empty()) hs.push_back(ck.config.horizon);
  std::string csv = metrics_csv_header();
  for (std::size_t h : hs) {
    for (std::size_t s : {1, 2}) {
      const SplitMetrics m = horizon_metrics(ck.params, ck.config, data.table, data.ranges[s], h);
      csv += metrics_csv_row(s == 1 ? "val" : "test", h, m);
    }
  }
  write_text(std::filesystem::path(rc.run.out) / "eval.csv", csv);
  std::cout << csv;
  return kOk;
}

// --- synth --------------------------------------------------------------------------

inline int cmd_synth(const Options& opt) {
  const RunConfig rc = resolve(opt);
  if (!rc.dataset.synthetic) throw ConfigError("synth requires a [synthetic] section");
  const SyntheticSeries s = generate_synthetic(*rc.dataset.synthetic);
  const auto out = prepare_out(rc);
  const std::size_t T = s.table.length(), C = s.table.channels();
  std::ostringstream series, parts;
  series << "t";
  for (const auto& n : s.table.names) series << ',' << n;
  series << '\n';
  parts << "t,channel,trend,seasonal,shock,impulse,noise\n";
  for (std::size_t t = 0; t < T; ++t) {
    series << s.table.timestamps[t];
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t k = t * C + c;
      series << ',' << format_double(s.table.values[k]);
      parts << s.table.timestamps[t] << ',' << s.table.names[c] << ',' << format_double(s.trend[k]) << ','
            << format_double(s.seasonal[k]) << ',' << format_double(s.shock[k]) << ',' << format_double(s.impulses[k])
            << ',' << format_double(s.noise[k]) << '\n';
    }
    series << '\n';
  }
  write_text(out / "synthetic.csv", series.str());
  write_text(out / "components.csv", parts.str());
  write_text(out / "config.ini", to_ini(rc));
  std::cout << "wrote " << T << " x " << C << " series to " << (out / "synthetic.csv").string() << "\n";
  return kOk;
}

// --- verify ---------------------------------------------------------------------------

struct VerifyOptions {
  std::size_t trials = 100;
  std::uint64_t seed = 2026;
  std::vector<std::size_t> flop_lengths{64, 128, 256, 512};
  GateHook hook{};  // mutation fixtures only
};

/// Full proposition suite, recurrent/materialized sweep and FLOP scaling checks.
inline std::vector<PropositionReport> run_verification(const VerifyOptions& v) {
  std::vector<PropositionReport> reports;
  Rng root(v.seed, 0x564552494659ULL);
  Rng r2 = root.fork(2);
  reports.push_back(verify_prop2(16, v.trials, r2));
  CapsConfig kc;
  kc.num_heads = 2;
  for (std::size_t T : {8, 16, 32, 64}) {
    Rng r3 = root.fork(300 + T);
    for (auto& r : verify_prop3(kc, T, v.trials, r3, v.hook)) reports.push_back(std::move(r));
  }
  Rng r6 = root.fork(6);
  reports.push_back(verify_riemann_reduction(32, v.trials, r6));
  Rng r1 = root.fork(1);
  reports.push_back(verify_equivalence({8, 32, 64}, {4, 8, 16}, r1));

  std::vector<double> x, lin, soft;
  CapsConfig soft_cfg = kc;
  soft_cfg.phi_mode = PhiMode::kSoftmax;
  for (std::size_t T : v.flop_lengths) {
    x.push_back(static_cast<double>(T));
    lin.push_back(static_cast<double>(count_flops(kc, 16, T, 10, false).count.mults));
    soft.push_back(static_cast<double>(count_flops(soft_cfg, 16, T, 10, false).count.mults));
  }
  PropositionReport fl{"flops.linear_affine", polyfit_residual(x, lin, 1), 1e-12};
  fl.params = {{"T", v.flop_lengths}, {"mults", lin}};
  fl.finish();
  PropositionReport fs{"flops.softmax_quadratic", polyfit_residual(x, soft, 2), 1e-12};
  fs.params = {{"T", v.flop_lengths}, {"mults", soft}};
  fs.finish();
  reports.push_back(fl);
  reports.push_back(fs);
  return reports;
}

inline int report_verification(const std::vector<PropositionReport>& reports, const std::filesystem::path& out) {
  write_reports_jsonl((out / "reports.jsonl").string(), reports);
  bool ok = true;
  for (const auto& r : reports) {
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.id << " max_violation " << r.max_violation << " tolerance "
              << r.tolerance << "\n";
    if (!r.pass) {
      ok = false;
      std::cerr << "failing report: " << to_json(r).dump() << "\n";
    }
  }
  return ok ? kOk : kVerifyFailed;
}

inline int cmd_verify(const Options& opt, const GateHook& hook = {}) {
  VerifyOptions v;
  std::filesystem::path out = opt.out.value_or("out");
  if (!opt.config.empty()) {
    const RunConfig rc = resolve(opt);
    v.trials = rc.run.verify_trials;
    v.seed = rc.run.seed;
    out = rc.run.out;
  } else if (opt.seed) {
    v.seed = *opt.seed;
  }
  v.hook = hook;
  std::filesystem::create_directories(out);
  return report_verification(run_verification(v), out);
}

// --- bench ----------------------------------------------------------------------------

inline int cmd_bench(const Options& opt) {
  RunConfig rc;
  if (!opt.config.empty()) {
    rc = resolve(opt);
  } else {
    if (opt.out) rc.run.out = *opt.out;
    if (opt.t_list) rc.run.t_list = detail::parse_list<std::size_t>("--t-list", *opt.t_list);
  }
  if (rc.run.t_list.empty()) throw ConfigError("bench needs a non-empty T list");
  const auto out = prepare_out(rc);
  const std::size_t d = rc.model.hidden();
  std::ostringstream csv;
  csv << "mode,T,d,heads,head_dim,mults,adds,transcendentals,state_update_mults,wall_time\n";
  for (PhiMode mode : {PhiMode::kIdentity, PhiMode::kSoftmax}) {
    CapsConfig c = rc.model.caps;
    c.phi_mode = mode;
    c.score_scale.reset();
    std::vector<double> x, y;
    for (std::size_t T : rc.run.t_list) {
      const FlopReport r = count_flops(c, d, T);
      csv << r.mode << ',' << r.T << ',' << r.d << ',' << r.heads << ',' << r.head_dim << ',' << r.count.mults << ','
          << r.count.adds << ',' << r.count.transcendentals << ',' << r.count.state_update_mults << ','
          << format_double(r.wall_time) << '\n';
      x.push_back(static_cast<double>(T));
      y.push_back(static_cast<double>(r.count.mults));
    }
    const int degree = mode == PhiMode::kIdentity ? 1 : 2;
    if (x.size() > static_cast<std::size_t>(degree)) {
      std::cout << to_string(mode) << ": degree-" << degree << " fit of mults vs T, max relative residual "
                << polyfit_residual(x, y, degree) << "\n";
    }
  }
  write_text(out / "bench.csv", csv.str());
  std::cout << csv.str();
  return kOk;
}

// --- inspect --------------------------------------------------------------------------

inline int cmd_inspect(const Options& opt) {
  const RunConfig rc = resolve(opt);
  const Dataset data = load_dataset(rc);
  const Checkpoint ck = load_run_checkpoint(rc);
  const auto starts = window_starts(data.ranges[2], ck.config.lookback, ck.config.horizon);
  if (rc.run.inspect_window >= starts.size()) throw ConfigError("run.inspect_window beyond the test windows");
  std::size_t channel = ck.config.target_indices().front();
  if (!rc.run.inspect_channel.empty()) channel = resolve_targets(data.table.names, {rc.run.inspect_channel}).front();
  const std::vector<std::size_t> one{starts[rc.run.inspect_window]};
  const WindowBatch b = make_batch(data.table, one, ck.config.lookback, ck.config.horizon);
  const auto path = std::filesystem::path(rc.run.out) / "decomposition.csv";
  export_decomposition(ck.params, ck.config, b.inputs, path.string(), 0, channel);
  std::cout << "wrote " << path.string() << " (window start " << one[0] << ", channel " << data.table.names[channel]
            << ")\n";
  return kOk;
}

}  // namespace caps::cli
