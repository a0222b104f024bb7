#include <iostream>

#include <CLI11.hpp>

#include "caps/cli/commands.hpp"

namespace {

using caps::cli::Options;

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "run configuration (INI)");
  sub->add_option("--seed", o.seed, "override run.seed");
  sub->add_option("--out", o.out, "output directory (overrides run.out)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CAPS attention forecasting engine"};
  app.require_subcommand(1);
  Options o;

  auto* train = app.add_subcommand("train", "fit a forecaster and write checkpoint, metrics and manifest");
  auto* eval = app.add_subcommand("eval", "evaluate the checkpoint in --out on validation and test windows");
  auto* synth = app.add_subcommand("synth", "write the synthetic series described by the config");
  auto* ablate = app.add_subcommand("ablate", "train with some attention paths disabled");
  auto* verify = app.add_subcommand("verify", "run the numerical property suite");
  auto* bench = app.add_subcommand("bench", "FLOP counts and timings across sequence lengths");
  auto* inspect = app.add_subcommand("inspect", "export the per-path score decomposition of one test window");
  for (auto* s : {train, eval, synth, ablate, verify, bench, inspect}) add_common(s, o);
  ablate->add_option("--disable", o.disable, "paths to disable: riemann,prefix,clock");
  eval->add_option("--horizons", o.horizons, "comma-separated forecast steps to score");
  bench->add_option("--t-list", o.t_list, "comma-separated sequence lengths");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return caps::cli::kConfigError;
  }

  try {
    if (*train) return caps::cli::cmd_train(o);
    if (*eval) return caps::cli::cmd_eval(o);
    if (*synth) return caps::cli::cmd_synth(o);
    if (*ablate) return caps::cli::cmd_ablate(o);
    if (*verify) return caps::cli::cmd_verify(o);
    if (*bench) return caps::cli::cmd_bench(o);
    if (*inspect) return caps::cli::cmd_inspect(o);
  } catch (const caps::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return caps::cli::kNumericError;
  } catch (const caps::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return caps::cli::kConfigError;
  } catch (const caps::IngestionError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return caps::cli::kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return caps::cli::kNumericError;
  }
  return caps::cli::kConfigError;
}
