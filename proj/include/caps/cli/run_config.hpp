#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "caps/data/synthetic.hpp"
#include "caps/model/forecaster.hpp"
#include "caps/training/fit.hpp"

namespace caps {

struct DatasetSection {
  std::string csv;  // resolved against the config file's directory
  std::optional<SyntheticSpec> synthetic;
  std::vector<std::string> targets;  // empty: every channel
  std::array<double, 3> split{0.7, 0.1, 0.2};
  bool standardize = false;
};

struct RunSection {
  std::uint64_t seed = 2026;
  std::string out = "out";
  std::vector<std::size_t> horizons;  // eval; empty means the model horizon
  std::vector<std::size_t> t_list{64, 128, 256, 512};
  std::size_t verify_trials = 100;
  std::size_t inspect_window = 0;  // index into the test windows
  std::string inspect_channel;     // empty: first target
};

struct RunConfig {
  DatasetSection dataset;
  ForecasterConfig model;
  TrainPolicy train;
  RunSection run;
  std::string source;  // path the config was read from
};

// --- value parsing ----------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream ss(s);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_value(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if constexpr (std::is_same_v<T, bool>) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError(key + ": expected a boolean, got '" + v + "'");
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else {
    T x{};
    const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
    if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) {
      throw ConfigError(key + ": cannot parse '" + v + "'");
    }
    return x;
  }
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& raw) {
  std::vector<T> out;
  for (const auto& item : split_list(raw)) out.push_back(parse_value<T>(key, item));
  return out;
}

/// Reads known keys of one section and rejects the rest.
class Section {
 public:
  Section(std::string name, const boost::property_tree::ptree* tree) : name_(std::move(name)), tree_(tree) {}

  template <class T>
  void get(const std::string& key, T& into) {
    seen_.insert(key);
    if (const auto raw = find(key)) into = parse_value<T>(name_ + "." + key, *raw);
  }

  template <class T>
  void get_list(const std::string& key, std::vector<T>& into) {
    seen_.insert(key);
    if (const auto raw = find(key)) into = parse_list<T>(name_ + "." + key, *raw);
  }

  /// Raw value of `key`, marking it as known.
  std::optional<std::string> take(const std::string& key) {
    seen_.insert(key);
    return find(key);
  }

  std::optional<std::string> find(const std::string& key) const {
    if (!tree_) return std::nullopt;
    const auto it = tree_->find(key);
    if (it == tree_->not_found()) return std::nullopt;
    return it->second.data();
  }

  void reject_unknown() const {
    if (!tree_) return;
    for (const auto& [key, _] : *tree_) {
      if (!seen_.count(key)) throw ConfigError("unknown key '" + key + "' in section [" + name_ + "]");
    }
  }

 private:
  std::string name_;
  const boost::property_tree::ptree* tree_;
  std::set<std::string> seen_;
};

inline PathFlags parse_paths(const std::string& key, const std::string& raw) {
  PathFlags f{false, false, false};
  for (const auto& p : split_list(raw)) {
    if (p == "riemann") f.riemann = true;
    else if (p == "prefix") f.prefix = true;
    else if (p == "clock") f.clock = true;
    else throw ConfigError(key + ": unknown path '" + p + "' (expected riemann|prefix|clock)");
  }
  return f;
}

inline std::string paths_string(const PathFlags& f) {
  std::string s;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ",";
    s += name;
  };
  add(f.riemann, "riemann");
  add(f.prefix, "prefix");
  add(f.clock, "clock");
  return s;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ',';
    if constexpr (std::is_floating_point_v<T>) os << format_double(v[i]);
    else os << v[i];
  }
  return os.str();
}

}  // namespace detail

/// Parses an INI run configuration; every key is optional and falls back to the
/// defaults of the corresponding structs.
inline RunConfig parse_run_config(const std::string& text, const std::string& base_dir = ".") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  static const std::set<std::string> sections{"dataset", "synthetic", "model", "train", "run"};
  for (const auto& [name, child] : tree) {
    if (!sections.count(name)) throw ConfigError("unknown config section [" + name + "]");
    if (child.empty() && !child.data().empty()) throw ConfigError("key '" + name + "' outside any section");
  }
  auto section = [&](const std::string& name) {
    const auto it = tree.find(name);
    return detail::Section(name, it == tree.not_found() ? nullptr : &it->second);
  };

  RunConfig rc;
  {
    auto s = section("dataset");
    s.get("csv", rc.dataset.csv);
    s.get_list("targets", rc.dataset.targets);
    std::vector<double> ratios;
    s.get_list("split", ratios);
    if (!ratios.empty()) {
      if (ratios.size() != 3) throw ConfigError("dataset.split needs three ratios");
      rc.dataset.split = {ratios[0], ratios[1], ratios[2]};
    }
    s.get("standardize", rc.dataset.standardize);
    s.reject_unknown();
  }
  if (tree.find("synthetic") != tree.not_found()) {
    auto s = section("synthetic");
    SyntheticSpec sp;
    s.get("length", sp.length);
    s.get("channels", sp.channels);
    s.get("mu0", sp.mu0);
    s.get("beta", sp.beta);
    s.get("amp", sp.amp);
    s.get("omega", sp.omega);
    double period = 0.0;
    s.get("period", period);
    if (period > 0.0) sp.omega = 2.0 * std::numbers::pi / period;
    s.get("phase", sp.phase);
    s.get("rho", sp.rho);
    s.get("impulse_prob", sp.impulse_prob);
    s.get("impulse_std", sp.impulse_std);
    s.get("noise_std", sp.noise_std);
    s.get("seed", sp.seed);
    s.reject_unknown();
    rc.dataset.synthetic = sp;
  }
  if (rc.dataset.csv.empty() == !rc.dataset.synthetic.has_value()) {
    throw ConfigError("exactly one of dataset.csv or a [synthetic] section is required");
  }
  if (!rc.dataset.csv.empty()) {
    std::filesystem::path p(rc.dataset.csv);
    if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
    rc.dataset.csv = p.lexically_normal().string();
    if (!std::filesystem::exists(rc.dataset.csv)) throw ConfigError("dataset.csv not found: " + rc.dataset.csv);
  }
  {
    auto s = section("model");
    ForecasterConfig& m = rc.model;
    s.get("lookback", m.lookback);
    s.get("horizon", m.horizon);
    s.get("num_layers", m.num_layers);
    s.get("num_heads", m.caps.num_heads);
    s.get("head_dim", m.caps.head_dim);
    std::string phi = to_string(m.caps.phi_mode);
    s.get("phi", phi);
    m.caps.phi_mode = parse_phi_mode(phi);
    if (const auto raw = s.take("paths")) m.caps.paths = detail::parse_paths("model.paths", *raw);
    s.get("clock_epsilon", m.caps.clock_epsilon);
    if (const auto raw = s.take("score_scale")) {
      m.caps.score_scale = detail::parse_value<double>("model.score_scale", *raw);
    }
    std::string rope = "standard";
    s.get("rope", rope);
    if (rope == "uniform") m.caps.rope.kind = RopeInit::Kind::kUniform;
    else if (rope != "standard") throw ConfigError("model.rope: expected standard|uniform");
    s.get("rope_base", m.caps.rope.base);
    s.get("rope_lo", m.caps.rope.lo);
    s.get("rope_hi", m.caps.rope.hi);
    s.get("d_channel_token", m.d_channel_token);
    s.get("d_value_token", m.d_value_token);
    s.get("ffn_expansion", m.ffn_expansion);
    s.get("init_std", m.init_std);
    s.reject_unknown();
  }
  {
    auto s = section("train");
    TrainPolicy& t = rc.train;
    s.get("effective_batch", t.effective_batch);
    t.micro_batch = t.effective_batch;
    s.get("micro_batch", t.micro_batch);
    t.accumulation_steps = t.micro_batch ? t.effective_batch / t.micro_batch : 0;
    s.get("accumulation_steps", t.accumulation_steps);
    s.get("clip_norm", t.clip_norm);
    s.get("patience", t.patience);
    s.get("epochs", t.epochs);
    s.get("max_steps_per_epoch", t.max_steps_per_epoch);
    s.get("max_val_windows", t.max_val_windows);
    s.get("channel_dropout", t.channel_dropout);
    s.get("max_lr", t.optim.max_lr);
    s.get("weight_decay", t.optim.weight_decay);
    s.get("beta1", t.optim.beta1);
    s.get("beta2", t.optim.beta2);
    s.get("eps", t.optim.eps);
    s.get("warmup_fraction", t.optim.warmup_fraction);
    s.get("div_factor", t.optim.div_factor);
    s.get("final_div_factor", t.optim.final_div_factor);
    s.reject_unknown();
  }
  {
    auto s = section("run");
    s.get("seed", rc.run.seed);
    s.get("out", rc.run.out);
    s.get_list("horizons", rc.run.horizons);
    s.get_list("t_list", rc.run.t_list);
    s.get("verify_trials", rc.run.verify_trials);
    s.get("inspect_window", rc.run.inspect_window);
    s.get("inspect_channel", rc.run.inspect_channel);
    s.reject_unknown();
  }
  rc.train.seed = rc.run.seed;
  rc.model.channel_dropout = rc.train.channel_dropout;
  rc.train.validate();
  rc.model.caps.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto dir = std::filesystem::path(path).parent_path();
  RunConfig rc = parse_run_config(ss.str(), dir.empty() ? "." : dir.string());
  rc.source = path;
  return rc;
}

/// Canonical INI text with every resolved value; re-parsing it yields the same
/// configuration.
inline std::string to_ini(const RunConfig& rc) {
  std::ostringstream os;
  const auto& d = rc.dataset;
  os << "[dataset]\n";
  if (!d.csv.empty()) os << "csv = " << std::filesystem::absolute(d.csv).lexically_normal().string() << "\n";
  if (!d.targets.empty()) os << "targets = " << detail::join(d.targets) << "\n";
  os << "split = " << detail::join(std::vector<double>(d.split.begin(), d.split.end())) << "\n";
  os << "standardize = " << (d.standardize ? "true" : "false") << "\n";
  if (d.synthetic) {
    const SyntheticSpec& s = *d.synthetic;
    os << "\n[synthetic]\nlength = " << s.length << "\nchannels = " << s.channels << "\nmu0 = " << format_double(s.mu0)
       << "\nbeta = " << format_double(s.beta) << "\namp = " << format_double(s.amp)
       << "\nomega = " << format_double(s.omega) << "\nphase = " << format_double(s.phase)
       << "\nrho = " << format_double(s.rho) << "\nimpulse_prob = " << format_double(s.impulse_prob)
       << "\nimpulse_std = " << format_double(s.impulse_std) << "\nnoise_std = " << format_double(s.noise_std)
       << "\nseed = " << s.seed << "\n";
  }
  const ForecasterConfig& m = rc.model;
  os << "\n[model]\nlookback = " << m.lookback << "\nhorizon = " << m.horizon << "\nnum_layers = " << m.num_layers
     << "\nnum_heads = " << m.caps.num_heads << "\nhead_dim = " << m.caps.head_dim
     << "\nphi = " << to_string(m.caps.phi_mode) << "\npaths = " << detail::paths_string(m.caps.paths)
     << "\nclock_epsilon = " << format_double(m.caps.clock_epsilon) << "\n";
  if (m.caps.score_scale) os << "score_scale = " << format_double(*m.caps.score_scale) << "\n";
  os << "rope = " << (m.caps.rope.kind == RopeInit::Kind::kUniform ? "uniform" : "standard")
     << "\nrope_base = " << format_double(m.caps.rope.base) << "\nrope_lo = " << format_double(m.caps.rope.lo)
     << "\nrope_hi = " << format_double(m.caps.rope.hi) << "\nd_channel_token = " << m.d_channel_token
     << "\nd_value_token = " << m.d_value_token << "\nffn_expansion = " << m.ffn_expansion
     << "\ninit_std = " << format_double(m.init_std) << "\n";
  const TrainPolicy& t = rc.train;
  os << "\n[train]\neffective_batch = " << t.effective_batch << "\nmicro_batch = " << t.micro_batch
     << "\naccumulation_steps = " << t.accumulation_steps << "\nclip_norm = " << format_double(t.clip_norm)
     << "\npatience = " << t.patience << "\nepochs = " << t.epochs << "\nmax_steps_per_epoch = " << t.max_steps_per_epoch
     << "\nmax_val_windows = " << t.max_val_windows << "\nchannel_dropout = " << (t.channel_dropout ? "true" : "false")
     << "\nmax_lr = " << format_double(t.optim.max_lr) << "\nweight_decay = " << format_double(t.optim.weight_decay)
     << "\nbeta1 = " << format_double(t.optim.beta1) << "\nbeta2 = " << format_double(t.optim.beta2)
     << "\neps = " << format_double(t.optim.eps) << "\nwarmup_fraction = " << format_double(t.optim.warmup_fraction)
     << "\ndiv_factor = " << format_double(t.optim.div_factor)
     << "\nfinal_div_factor = " << format_double(t.optim.final_div_factor) << "\n";
  const RunSection& r = rc.run;
  os << "\n[run]\nseed = " << r.seed << "\nout = " << r.out << "\n";
  if (!r.horizons.empty()) os << "horizons = " << detail::join(r.horizons) << "\n";
  os << "t_list = " << detail::join(r.t_list) << "\nverify_trials = " << r.verify_trials
     << "\ninspect_window = " << r.inspect_window << "\n";
  if (!r.inspect_channel.empty()) os << "inspect_channel = " << r.inspect_channel << "\n";
  return os.str();
}

}  // namespace caps
