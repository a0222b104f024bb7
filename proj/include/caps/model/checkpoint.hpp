#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "caps/model/forecaster.hpp"

namespace caps {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline nlohmann::json to_json(const CapsConfig& c) {
  nlohmann::json j{{"num_heads", c.num_heads},
                   {"head_dim", c.head_dim},
                   {"phi_mode", to_string(c.phi_mode)},
                   {"paths", {{"riemann", c.paths.riemann}, {"prefix", c.paths.prefix}, {"clock", c.paths.clock}}},
                   {"clock_epsilon", c.clock_epsilon},
                   {"rope",
                    {{"kind", c.rope.kind == RopeInit::Kind::kStandard ? "standard" : "uniform"},
                     {"base", c.rope.base},
                     {"lo", c.rope.lo},
                     {"hi", c.rope.hi}}}};
  j["score_scale"] = c.score_scale ? nlohmann::json(*c.score_scale) : nlohmann::json(nullptr);
  return j;
}

inline CapsConfig caps_config_from_json(const nlohmann::json& j) {
  CapsConfig c;
  c.num_heads = j.at("num_heads").get<std::size_t>();
  c.head_dim = j.at("head_dim").get<std::size_t>();
  c.phi_mode = parse_phi_mode(j.at("phi_mode").get<std::string>());
  c.paths = {j.at("paths").at("riemann").get<bool>(), j.at("paths").at("prefix").get<bool>(),
             j.at("paths").at("clock").get<bool>()};
  c.clock_epsilon = j.at("clock_epsilon").get<double>();
  const auto& r = j.at("rope");
  c.rope.kind = r.at("kind").get<std::string>() == "uniform" ? RopeInit::Kind::kUniform : RopeInit::Kind::kStandard;
  c.rope.base = r.at("base").get<double>();
  c.rope.lo = r.at("lo").get<double>();
  c.rope.hi = r.at("hi").get<double>();
  if (!j.at("score_scale").is_null()) c.score_scale = j.at("score_scale").get<double>();
  return c;
}

inline nlohmann::json to_json(const ForecasterConfig& c) {
  return {{"lookback", c.lookback},
          {"horizon", c.horizon},
          {"channels", c.channels},
          {"target_channels", c.target_channels},
          {"targets", c.targets},
          {"num_layers", c.num_layers},
          {"caps", to_json(c.caps)},
          {"d_channel_token", c.d_channel_token},
          {"d_value_token", c.d_value_token},
          {"ffn_expansion", c.ffn_expansion},
          {"channel_dropout", c.channel_dropout},
          {"init_std", c.init_std}};
}

inline ForecasterConfig forecaster_config_from_json(const nlohmann::json& j) {
  ForecasterConfig c;
  c.lookback = j.at("lookback").get<std::size_t>();
  c.horizon = j.at("horizon").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.target_channels = j.at("target_channels").get<std::size_t>();
  c.targets = j.at("targets").get<std::vector<std::size_t>>();
  c.num_layers = j.at("num_layers").get<std::size_t>();
  c.caps = caps_config_from_json(j.at("caps"));
  c.d_channel_token = j.at("d_channel_token").get<std::size_t>();
  c.d_value_token = j.at("d_value_token").get<std::size_t>();
  c.ffn_expansion = j.at("ffn_expansion").get<std::size_t>();
  c.channel_dropout = j.at("channel_dropout").get<bool>();
  c.init_std = j.at("init_std").get<double>();
  return c;
}

// Layout (little-endian):
//   "CAPSCKPT" | u32 version | u64 n + config JSON | u32 tensor count |
//   per tensor: u32 n + name | u32 rank | u64 dims[rank] | f64 payload

inline constexpr char kCheckpointMagic[8] = {'C', 'A', 'P', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ForecasterConfig config;
  ForecasterParams params;
};

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ConfigError("truncated checkpoint " + path);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ForecasterConfig& cfg, const ForecasterParams& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot write checkpoint " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  const std::string js = to_json(cfg).dump();
  detail::put<std::uint64_t>(os, js.size());
  os.write(js.data(), static_cast<std::streamsize>(js.size()));
  std::uint32_t count = 0;
  params.for_each([&](const std::string&, const Array&) { ++count; });
  detail::put<std::uint32_t>(os, count);
  params.for_each([&](const std::string& name, const Array& a) {
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(a.rank()));
    for (std::size_t d : a.shape()) detail::put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(a.data().data()), static_cast<std::streamsize>(a.size() * sizeof(double)));
  });
  if (!os) throw ConfigError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw ConfigError("not a checkpoint: " + path);
  const auto version = detail::get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  std::string js(detail::get<std::uint64_t>(is, path), '\0');
  if (!is.read(js.data(), static_cast<std::streamsize>(js.size()))) throw ConfigError("truncated checkpoint " + path);
  Checkpoint ck;
  try {
    ck.config = forecaster_config_from_json(nlohmann::json::parse(js));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad checkpoint header: " + std::string(e.what()));
  }
  ck.config.validate();
  // Shapes come from a fresh structure; the file must match it tensor by tensor.
  Rng rng(0);
  ck.params = init_params(ck.config, rng);
  std::uint32_t expected = 0;
  ck.params.for_each([&](const std::string&, const Array&) { ++expected; });
  if (detail::get<std::uint32_t>(is, path) != expected) throw ConfigError("checkpoint tensor count mismatch");
  ck.params.for_each([&](const std::string& name, Array& a) {
    std::string got(detail::get<std::uint32_t>(is, path), '\0');
    is.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (got != name) throw ConfigError("checkpoint tensor '" + got + "' where '" + name + "' expected");
    Shape shape(detail::get<std::uint32_t>(is, path));
    for (auto& d : shape) d = detail::get<std::uint64_t>(is, path);
    if (shape != a.shape()) throw ConfigError("checkpoint tensor " + name + " has shape " + shape_str(shape));
    if (!is.read(reinterpret_cast<char*>(a.data().data()), static_cast<std::streamsize>(a.size() * sizeof(double)))) {
      throw ConfigError("truncated checkpoint " + path);
    }
  });
  return ck;
}

}  // namespace caps
