#pragma once

// Flat `key = value` run configuration. Every key is greppable; precedence
// is flag > file > default, with an environment hook (VGT_SEED) for the
// seed only. One root seed feeds every named random stream.

#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "vgt/data.hpp"
#include "vgt/eval.hpp"
#include "vgt/net.hpp"
#include "vgt/noise.hpp"
#include "vgt/syngen.hpp"
#include "vgt/train.hpp"

namespace vgt {

// Exit-code carriers for the CLI: 2 config, 3 data, 4 numeric.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  DomainConfig domain;
  SynConfig syn;
  NoiseConfig noise;
  ModelConfig model;
  TrainConfig train;
  PresenceRule presence;
  std::uint64_t seed = 1;
  int threads = 1;
  std::string site = "syn";
  double duration = 600.0;  // syngen corpus length, seconds
  double test_frac = 0.2;
  int loops = 20;

  // Propagates the root seed and the tied dimensions, then validates.
  void finalize() {
    syn.seed = seed;
    noise.seed = seed;
    train.seed = seed;
    train.threads = threads;
    syn.dt_raw = domain.dt / domain.stride;
    model.maxS = domain.maxS;
    model.hist_len = domain.hist_len;
    model.pred_len = domain.pred_len;
    domain.validate();
    syn.validate();
    noise.validate();
    model.validate();
    presence.validate();
    if (test_frac < 0 || test_frac >= 1) throw ConfigError("test_frac must be in [0,1)");
    if (loops < 1) throw ConfigError("loops must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }
};

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long i = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

}  // namespace detail

using KeySetter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

inline const std::map<std::string, KeySetter>& config_keys() {
  using namespace detail;
  static const std::map<std::string, KeySetter> keys = {
      {"domain.L", [](RunConfig& c, const std::string& k, const std::string& v) { c.domain.L = parse_double(k, v); }},
      {"domain.Wd", [](RunConfig& c, const std::string& k, const std::string& v) { c.domain.Wd = parse_double(k, v); }},
      {"domain.maxS", [](RunConfig& c, const std::string& k, const std::string& v) { c.domain.maxS = static_cast<int>(parse_int(k, v)); }},
      {"domain.hist_len", [](RunConfig& c, const std::string& k, const std::string& v) { c.domain.hist_len = static_cast<int>(parse_int(k, v)); }},
      {"domain.pred_len", [](RunConfig& c, const std::string& k, const std::string& v) { c.domain.pred_len = static_cast<int>(parse_int(k, v)); }},
      {"domain.stride", [](RunConfig& c, const std::string& k, const std::string& v) { c.domain.stride = static_cast<int>(parse_int(k, v)); }},
      {"domain.dt", [](RunConfig& c, const std::string& k, const std::string& v) { c.domain.dt = parse_double(k, v); }},
      {"domain.len_cap", [](RunConfig& c, const std::string& k, const std::string& v) { c.domain.len_cap = parse_double(k, v); }},
      {"domain.wid_cap", [](RunConfig& c, const std::string& k, const std::string& v) { c.domain.wid_cap = parse_double(k, v); }},
      {"syn.lanes", [](RunConfig& c, const std::string& k, const std::string& v) { c.syn.lanes = static_cast<int>(parse_int(k, v)); }},
      {"syn.lane_width", [](RunConfig& c, const std::string& k, const std::string& v) { c.syn.lane_width = parse_double(k, v); }},
      {"syn.road_len", [](RunConfig& c, const std::string& k, const std::string& v) { c.syn.road_len = parse_double(k, v); }},
      {"syn.v_free", [](RunConfig& c, const std::string& k, const std::string& v) { c.syn.v_free = parse_double(k, v); }},
      {"syn.min_gap", [](RunConfig& c, const std::string& k, const std::string& v) { c.syn.min_gap = parse_double(k, v); }},
      {"syn.reaction", [](RunConfig& c, const std::string& k, const std::string& v) { c.syn.reaction = parse_double(k, v); }},
      {"syn.spawn_rate", [](RunConfig& c, const std::string& k, const std::string& v) { c.syn.spawn_rate = parse_double(k, v); }},
      {"syn.lane_change_prob", [](RunConfig& c, const std::string& k, const std::string& v) { c.syn.lane_change_prob = parse_double(k, v); }},
      {"noise.mask_rate", [](RunConfig& c, const std::string& k, const std::string& v) { c.noise.mask_rate = parse_double(k, v); }},
      {"noise.lambda", [](RunConfig& c, const std::string& k, const std::string& v) { c.noise.lambda = parse_double(k, v); }},
      {"noise.p_mask", [](RunConfig& c, const std::string& k, const std::string& v) { c.noise.p_mask = parse_double(k, v); }},
      {"noise.p_swap", [](RunConfig& c, const std::string& k, const std::string& v) { c.noise.p_swap = parse_double(k, v); }},
      {"model.d_model", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.d_model = static_cast<int>(parse_int(k, v)); }},
      {"model.n_heads", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.n_heads = static_cast<int>(parse_int(k, v)); }},
      {"model.n_enc", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.n_enc = static_cast<int>(parse_int(k, v)); }},
      {"model.n_dec", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.n_dec = static_cast<int>(parse_int(k, v)); }},
      {"model.d_ff", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.d_ff = static_cast<int>(parse_int(k, v)); }},
      {"model.dropout", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.dropout = parse_double(k, v); }},
      {"model.paper_cross_wiring", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.paper_cross_wiring = parse_bool(k, v); }},
      {"train.base_lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.base_lr = parse_double(k, v); }},
      {"train.warmup_steps", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.warmup_steps = parse_int(k, v); }},
      {"train.total_steps", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.total_steps = parse_int(k, v); }},
      {"train.batch_size", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.batch_size = static_cast<int>(parse_int(k, v)); }},
      {"train.epochs", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.epochs = static_cast<int>(parse_int(k, v)); }},
      {"train.adam_beta1", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.adam_beta1 = parse_double(k, v); }},
      {"train.adam_beta2", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.adam_beta2 = parse_double(k, v); }},
      {"train.adam_eps", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.adam_eps = parse_double(k, v); }},
      {"train.clip_norm", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.clip_norm = parse_double(k, v); }},
      {"train.aux_denoise_loss", [](RunConfig& c, const std::string& k, const std::string& v) { c.train.aux_denoise_loss = parse_bool(k, v); }},
      {"presence.eps_w", [](RunConfig& c, const std::string& k, const std::string& v) { c.presence.eps_w = parse_double(k, v); }},
      {"presence.eps_h", [](RunConfig& c, const std::string& k, const std::string& v) { c.presence.eps_h = parse_double(k, v); }},
      {"seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_u64(k, v); }},
      {"threads", [](RunConfig& c, const std::string& k, const std::string& v) { c.threads = static_cast<int>(parse_int(k, v)); }},
      {"site", [](RunConfig& c, const std::string&, const std::string& v) { c.site = v; }},
      {"duration", [](RunConfig& c, const std::string& k, const std::string& v) { c.duration = parse_double(k, v); }},
      {"test_frac", [](RunConfig& c, const std::string& k, const std::string& v) { c.test_frac = parse_double(k, v); }},
      {"loops", [](RunConfig& c, const std::string& k, const std::string& v) { c.loops = static_cast<int>(parse_int(k, v)); }},
  };
  return keys;
}

inline std::string valid_key_listing() {
  std::string out;
  for (const auto& [k, _] : config_keys()) {
    if (!out.empty()) out += ", ";
    out += k;
  }
  return out;
}

inline void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
  const auto& keys = config_keys();
  auto it = keys.find(key);
  if (it == keys.end())
    throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid_key_listing());
  it->second(cfg, key, value);
}

// Parses `key = value` lines; '#' starts a comment, blank lines are skipped.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> kv;
  std::size_t lineno = 0;
  for (const std::string& raw : split(text, '\n')) {
    ++lineno;
    std::string line = raw;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    kv.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return kv;
}

// Layered construction: defaults, then file values, then the VGT_SEED
// environment hook, then flag overrides.
inline RunConfig make_run_config(const std::vector<std::pair<std::string, std::string>>& file_kv,
                                 const std::vector<std::pair<std::string, std::string>>& flag_kv,
                                 const char* env_seed = nullptr) {
  RunConfig cfg;
  for (const auto& [k, v] : file_kv) apply_kv(cfg, k, v);
  if (env_seed != nullptr && *env_seed != '\0') apply_kv(cfg, "seed", env_seed);
  for (const auto& [k, v] : flag_kv) apply_kv(cfg, k, v);
  cfg.finalize();
  return cfg;
}

}  // namespace vgt
