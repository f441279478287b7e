#ifndef FLAGTRADER_CONFIG_HPP
#define FLAGTRADER_CONFIG_HPP

#include <charconv>
#include <filesystem>
#include <cstdint>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "flagtrader/errors.hpp"
#include "flagtrader/market_data.hpp"
#include "flagtrader/policy_model.hpp"
#include "flagtrader/ppo.hpp"
#include "flagtrader/text_state.hpp"
#include "flagtrader/trading_env.hpp"

namespace flagtrader {

/// Where the price series comes from: a CSV file, or a synthetic generator
/// when `path` is empty.
struct DataSpec {
  std::string path;
  SyntheticSpec synthetic{"alternating", 86};
  std::size_t warmup = 20;
  double risk_free_rate = 0.0;
};

struct RunConfig {
  ModelConfig model;
  PpoConfig ppo;
  DataSpec data;
  EnvOptions env;
  std::string prompt_template;  // path; empty selects the built-in template
  double periods_per_year = 252.0;
  std::size_t checkpoint_interval = 0;  // iterations; 0 writes only the final checkpoint
  std::uint64_t seed = 1;
  std::string output_dir = "out";

  void validate() const {
    model.validate();
    ppo.validate();
    if (!(env.initial_cash > 0.0)) throw ConfigError("env.initial_cash must be positive");
    if (!(periods_per_year > 0.0)) throw ConfigError("metrics.periods_per_year must be positive");
    if (data.warmup == 0) throw ConfigError("data.warmup must be positive");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  }
};

namespace detail {

inline std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

template <typename N>
N parse_number(const std::string& key, std::string_view text) {
  N value{};
  const auto r = std::from_chars(text.data(), text.data() + text.size(), value);
  if (r.ec != std::errc() || r.ptr != text.data() + text.size())
    throw ConfigError("config key '" + key + "': cannot parse '" + std::string(text) + "' as a number");
  return value;
}

inline bool parse_bool(const std::string& key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + std::string(text) + "'");
}

struct Binding {
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

template <typename N>
Binding number(const std::string& key, N& ref) {
  return {[&ref] {
            if constexpr (std::is_floating_point_v<N>) return format_number(ref);
            else return std::to_string(ref);
          },
          [&ref, key](const std::string& v) { ref = parse_number<N>(key, v); }};
}

inline Binding boolean(const std::string& key, bool& ref) {
  return {[&ref] { return std::string(ref ? "true" : "false"); },
          [&ref, key](const std::string& v) { ref = parse_bool(key, v); }};
}

inline Binding text(std::string& ref) {
  return {[&ref] { return ref; }, [&ref](const std::string& v) { ref = v; }};
}

inline std::map<std::string, Binding> bindings(RunConfig& c) {
  std::map<std::string, Binding> b;
  auto& m = c.model;
  b["model.d_model"] = number("model.d_model", m.d_model);
  b["model.n_layers"] = number("model.n_layers", m.n_layers);
  b["model.n_heads"] = number("model.n_heads", m.n_heads);
  b["model.d_ff"] = number("model.d_ff", m.d_ff);
  b["model.max_seq_len"] = number("model.max_seq_len", m.max_seq_len);
  b["model.n_frozen"] = number("model.n_frozen", m.n_frozen);
  b["model.n_trainable"] = number("model.n_trainable", m.n_trainable);
  b["model.lora_rank"] = number("model.lora_rank", m.lora_rank);
  b["model.lora_enabled"] = boolean("model.lora_enabled", m.lora_enabled);
  b["model.post_norm"] = boolean("model.post_norm", m.post_norm);
  b["model.lora_targets"] = {[&m] {
                               std::string s;
                               for (auto t : m.lora_targets) s += (s.empty() ? "" : ",") + std::string(lora_target_name(t));
                               return s;
                             },
                             [&m](const std::string& v) {
                               m.lora_targets.clear();
                               std::stringstream ss(v);
                               for (std::string item; std::getline(ss, item, ',');) {
                                 const auto t = trim(item);
                                 if (!t.empty()) m.lora_targets.push_back(parse_lora_target(std::string(t)));
                               }
                             }};

  auto& p = c.ppo;
  b["ppo.gamma"] = number("ppo.gamma", p.gamma);
  b["ppo.gae_lambda"] = number("ppo.gae_lambda", p.gae_lambda);
  b["ppo.clip_coef"] = number("ppo.clip_coef", p.clip_coef);
  b["ppo.ent_coef"] = number("ppo.ent_coef", p.ent_coef);
  b["ppo.vf_coef"] = number("ppo.vf_coef", p.vf_coef);
  b["ppo.kl_coef"] = number("ppo.kl_coef", p.kl_coef);
  b["ppo.lr_heads"] = number("ppo.lr_heads", p.lr_heads);
  b["ppo.lr_backbone"] = number("ppo.lr_backbone", p.lr_backbone);
  b["ppo.num_steps"] = number("ppo.num_steps", p.num_steps);
  b["ppo.num_envs"] = number("ppo.num_envs", p.num_envs);
  b["ppo.update_epochs"] = number("ppo.update_epochs", p.update_epochs);
  b["ppo.minibatch_size"] = number("ppo.minibatch_size", p.minibatch_size);
  b["ppo.max_grad_norm"] = number("ppo.max_grad_norm", p.max_grad_norm);
  b["ppo.anneal_lr"] = boolean("ppo.anneal_lr", p.anneal_lr);
  b["ppo.norm_adv"] = boolean("ppo.norm_adv", p.norm_adv);
  b["ppo.clip_vloss"] = boolean("ppo.clip_vloss", p.clip_vloss);
  b["ppo.total_timesteps"] = number("ppo.total_timesteps", p.total_timesteps);
  b["ppo.target_kl"] = {[&p] { return p.target_kl ? format_number(*p.target_kl) : std::string("none"); },
                        [&p](const std::string& v) {
                          if (v == "none" || v.empty()) p.target_kl.reset();
                          else p.target_kl = parse_number<double>("ppo.target_kl", v);
                        }};
  b["ppo.gradient_accumulation_steps"] = number("ppo.gradient_accumulation_steps", p.gradient_accumulation_steps);
  b["ppo.max_episode_steps"] = number("ppo.max_episode_steps", p.max_episode_steps);
  b["ppo.optimizer"] = {[&p] { return std::string(p.optimizer == OptimizerKind::Adam ? "adam" : "sgd"); },
                        [&p](const std::string& v) {
                          if (v == "sgd") p.optimizer = OptimizerKind::Sgd;
                          else if (v == "adam") p.optimizer = OptimizerKind::Adam;
                          else throw ConfigError("config key 'ppo.optimizer': expected sgd or adam, got '" + v + "'");
                        }};
  b["ppo.momentum"] = number("ppo.momentum", p.momentum);
  b["ppo.adam_beta1"] = number("ppo.adam_beta1", p.adam_beta1);
  b["ppo.adam_beta2"] = number("ppo.adam_beta2", p.adam_beta2);
  b["ppo.adam_eps"] = number("ppo.adam_eps", p.adam_eps);

  auto& d = c.data;
  b["data.path"] = text(d.path);
  b["data.generator"] = text(d.synthetic.generator);
  b["data.length"] = number("data.length", d.synthetic.length);
  b["data.seed"] = number("data.seed", d.synthetic.seed);
  b["data.start_price"] = number("data.start_price", d.synthetic.start_price);
  b["data.amplitude"] = number("data.amplitude", d.synthetic.amplitude);
  b["data.period"] = number("data.period", d.synthetic.period);
  b["data.slope"] = number("data.slope", d.synthetic.slope);
  b["data.volatility"] = number("data.volatility", d.synthetic.volatility);
  b["data.low"] = number("data.low", d.synthetic.low);
  b["data.high"] = number("data.high", d.synthetic.high);
  b["data.warmup"] = number("data.warmup", d.warmup);
  b["data.risk_free_rate"] = number("data.risk_free_rate", d.risk_free_rate);

  b["env.initial_cash"] = number("env.initial_cash", c.env.initial_cash);
  b["env.seed_warmup"] = boolean("env.seed_warmup", c.env.seed_warmup);
  b["prompt.template"] = text(c.prompt_template);
  b["metrics.periods_per_year"] = number("metrics.periods_per_year", c.periods_per_year);
  b["train.checkpoint_interval"] = number("train.checkpoint_interval", c.checkpoint_interval);
  b["seed"] = number("seed", c.seed);
  b["output_dir"] = text(c.output_dir);
  return b;
}

}  // namespace detail

/// Flat `key = value` pairs in file order. '#' starts a comment line.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline KeyValues parse_key_values(std::istream& in, const std::string& source = "config",
                                  std::vector<std::size_t>* line_numbers = nullptr) {
  KeyValues kv;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto body = detail::trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError(source + " line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(body.substr(0, eq));
    if (key.empty()) throw ConfigError(source + " line " + std::to_string(lineno) + ": empty key");
    kv.emplace_back(std::string(key), std::string(detail::trim(body.substr(eq + 1))));
    if (line_numbers) line_numbers->push_back(lineno);
  }
  return kv;
}

/// Applies one key; unknown keys are rejected so typos do not pass silently.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto b = detail::bindings(cfg);
  const auto it = b.find(key);
  if (it == b.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(value);
}

inline void apply_settings(RunConfig& cfg, const KeyValues& kv) {
  for (const auto& [k, v] : kv) apply_setting(cfg, k, v);
}

/// Every key with its current value, sorted by key.
inline KeyValues to_key_values(const RunConfig& cfg) {
  RunConfig copy = cfg;
  KeyValues kv;
  for (const auto& [k, b] : detail::bindings(copy)) kv.emplace_back(k, b.get());
  return kv;
}

inline void write_config(std::ostream& out, const RunConfig& cfg) {
  for (const auto& [k, v] : to_key_values(cfg)) out << k << " = " << v << "\n";
}

inline RunConfig parse_config(std::istream& in, const std::string& source = "config") {
  RunConfig cfg;
  std::vector<std::size_t> lines;
  const auto kv = parse_key_values(in, source, &lines);
  for (std::size_t i = 0; i < kv.size(); ++i) {
    try {
      apply_setting(cfg, kv[i].first, kv[i].second);
    } catch (const ConfigError& e) {
      throw ConfigError(source + " line " + std::to_string(lines[i]) + ": " + e.what());
    }
  }
  return cfg;
}

/// Relative data.path and prompt.template entries resolve against the config
/// file's directory; output_dir stays relative to the working directory.
inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  RunConfig cfg = parse_config(in, path);
  const auto base = std::filesystem::path(path).parent_path();
  for (std::string* p : {&cfg.data.path, &cfg.prompt_template}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
  return cfg;
}

/// Loads or generates the series and splits it into warm-up and test ranges.
inline MarketSeries load_data(const DataSpec& spec) {
  MarketSeries series = spec.path.empty() ? make_synthetic(spec.synthetic) : load_series(spec.path);
  series.risk_free_rate = spec.risk_free_rate;
  if (spec.warmup >= series.size())
    throw CompatibilityError("series has " + std::to_string(series.size()) + " bars, warm-up needs more than " +
                             std::to_string(spec.warmup));
  return split(std::move(series), spec.warmup);
}

inline PromptTemplate load_prompt(const RunConfig& cfg) {
  return cfg.prompt_template.empty() ? PromptTemplate::default_template() : load_prompt_template(cfg.prompt_template);
}

}  // namespace flagtrader

#endif  // FLAGTRADER_CONFIG_HPP
