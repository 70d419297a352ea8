#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dmssd/common.hpp"
#include "dmssd/env.hpp"

namespace dmssd {

struct PpoConfig {
  double gamma = 0.99;
  double gae_lambda = 0.92;
  double clip_range = 0.2;
  double ent_coef = 0.001;
  double learning_rate = 0.001;
  int iterations = 150;
  int rollout_steps = 2048;
  int epochs = 10;
  int minibatch_size = 64;
  double vf_coef = 0.5;
  double max_grad_norm = 0.5;
  int hidden = 64;

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("ppo: gamma must lie in (0, 1]");
    if (!(gae_lambda > 0.0 && gae_lambda <= 1.0)) throw ConfigError("ppo: gae_lambda must lie in (0, 1]");
    if (!(clip_range > 0.0)) throw ConfigError("ppo: clip_range must be positive");
    if (ent_coef < 0.0 || vf_coef < 0.0) throw ConfigError("ppo: loss coefficients must be non-negative");
    if (!(learning_rate > 0.0)) throw ConfigError("ppo: learning_rate must be positive");
    if (iterations < 0) throw ConfigError("ppo: iterations must be non-negative");
    if (rollout_steps < 1 || minibatch_size < 1 || epochs < 1) throw ConfigError("ppo: sizes must be positive");
    if (rollout_steps % minibatch_size != 0)
      throw ConfigError("ppo: rollout_steps must be divisible by minibatch_size");
    if (!(max_grad_norm > 0.0)) throw ConfigError("ppo: max_grad_norm must be positive");
    if (hidden < 1) throw ConfigError("ppo: hidden must be positive");
  }
};

// Everything a training run needs. Serialises to the flat `key = value`
// format, one field per line.
struct TrainConfig {
  EnvConfig env;
  PpoConfig ppo;
  std::uint64_t seed = 0;
  int checkpoint_every = 10;
  bool record_timing = false;  // wall-clock seconds in the metrics CSV break bit-reproducibility

  void validate() const {
    env.validate();
    ppo.validate();
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  }
};

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (!in || !(in >> std::ws).eof()) throw ConfigError("config: bad value '" + value + "' for " + key);
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("config: bad boolean '" + value + "' for " + key);
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

// Shortest text that reads back to the same value.
template <class T>
std::string to_text(T v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

#define DMSSD_NUM_FIELD(name, member, type)                                                              \
  {                                                                                                       \
    name, Field {                                                                                        \
      [](TrainConfig& c, const std::string& v) { c.member = parse_number<type>(name, v); },             \
          [](const TrainConfig& c) { return to_text(c.member); }                                         \
    }                                                                                                     \
  }

inline const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      DMSSD_NUM_FIELD("width", env.width, int),
      DMSSD_NUM_FIELD("height", env.height, int),
      DMSSD_NUM_FIELD("static_density", env.static_density, double),
      DMSSD_NUM_FIELD("dynamic_density", env.dynamic_density, double),
      DMSSD_NUM_FIELD("map_seed", env.map_seed, std::uint64_t),
      DMSSD_NUM_FIELD("n_p", env.n_p, int),
      DMSSD_NUM_FIELD("r_goal", env.r_goal, double),
      DMSSD_NUM_FIELD("r1", env.r1, double),
      DMSSD_NUM_FIELD("r2", env.r2, double),
      DMSSD_NUM_FIELD("r3", env.r3, double),
      DMSSD_NUM_FIELD("max_episode_steps", env.max_episode_steps, int),
      DMSSD_NUM_FIELD("coordinate_scale", env.coordinate_scale, double),
      DMSSD_NUM_FIELD("fixed_robot_count", env.fixed_robot_count, int),
      {"variant", Field{[](TrainConfig& c, const std::string& v) { c.env.variant = parse_variant(v); },
                        [](const TrainConfig& c) { return std::string(variant_name(c.env.variant)); }}},
      DMSSD_NUM_FIELD("close_radius", env.close_radius, int),
      DMSSD_NUM_FIELD("gamma", ppo.gamma, double),
      DMSSD_NUM_FIELD("gae_lambda", ppo.gae_lambda, double),
      DMSSD_NUM_FIELD("clip_range", ppo.clip_range, double),
      DMSSD_NUM_FIELD("ent_coef", ppo.ent_coef, double),
      DMSSD_NUM_FIELD("learning_rate", ppo.learning_rate, double),
      DMSSD_NUM_FIELD("iterations", ppo.iterations, int),
      DMSSD_NUM_FIELD("rollout_steps", ppo.rollout_steps, int),
      DMSSD_NUM_FIELD("epochs", ppo.epochs, int),
      DMSSD_NUM_FIELD("minibatch_size", ppo.minibatch_size, int),
      DMSSD_NUM_FIELD("vf_coef", ppo.vf_coef, double),
      DMSSD_NUM_FIELD("max_grad_norm", ppo.max_grad_norm, double),
      DMSSD_NUM_FIELD("hidden", ppo.hidden, int),
      DMSSD_NUM_FIELD("seed", seed, std::uint64_t),
      DMSSD_NUM_FIELD("checkpoint_every", checkpoint_every, int),
      {"record_timing", Field{[](TrainConfig& c, const std::string& v) { c.record_timing = parse_bool("record_timing", v); },
                              [](const TrainConfig& c) { return std::string(c.record_timing ? "true" : "false"); }}},
  };
  return table;
}

#undef DMSSD_NUM_FIELD

}  // namespace detail

inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, field] : detail::fields()) {
    if (name == key) {
      field.set(cfg, detail::trim(value));
      return;
    }
  }
  throw ConfigError("config: unknown key '" + key + "'");
}

// Applies `key=value` (or `key = value`) text.
inline void apply_override(TrainConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("config: expected key=value, got '" + assignment + "'");
  set_config_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void read_config(std::istream& in, TrainConfig& cfg) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    try {
      apply_override(cfg, line);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(e.what()) + " (line " + std::to_string(lineno) + ")");
    }
  }
}

inline TrainConfig load_config(const std::string& path, TrainConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  read_config(in, base);
  return base;
}

inline void write_config(std::ostream& out, const TrainConfig& cfg) {
  for (const auto& [name, field] : detail::fields()) out << name << " = " << field.get(cfg) << '\n';
}

inline std::string config_to_string(const TrainConfig& cfg) {
  std::ostringstream out;
  write_config(out, cfg);
  return out.str();
}

}  // namespace dmssd
