#include "gippo/cli/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace gippo::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("'" + key + "': not a number: '" + v + "'");
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("'" + key + "': not an integer: '" + v + "'");
  return out;
}

int to_positive_int(const std::string& key, const std::string& v) {
  const long long x = to_int(key, v);
  if (x <= 0 || x > 1'000'000'000) throw ConfigError("'" + key + "': must be a positive integer");
  return static_cast<int>(x);
}

int to_count(const std::string& key, const std::string& v) {
  const long long x = to_int(key, v);
  if (x < 0 || x > 1'000'000'000) throw ConfigError("'" + key + "': must be a non-negative integer");
  return static_cast<int>(x);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("'" + key + "': expected true or false");
}

std::vector<int> to_layers(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) out.push_back(to_positive_int(key, trim(part)));
  return out;
}

std::string layers_str(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string std_mode_name(policy::StdMode m) {
  return m == policy::StdMode::kStateDependent ? "state_dependent" : "state_independent";
}

policy::StdMode std_mode_from(const std::string& key, const std::string& v) {
  if (v == "state_dependent") return policy::StdMode::kStateDependent;
  if (v == "state_independent") return policy::StdMode::kStateIndependent;
  throw ConfigError("'" + key + "': expected state_dependent or state_independent");
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define GIPPO_DOUBLE(name, member)                                                                 \
  Field {                                                                                          \
    name, [](const RunConfig& c) { return format_double(c.member); },                             \
        [](RunConfig& c, const std::string& v) { c.member = to_double(name, v); }                 \
  }
#define GIPPO_POSITIVE(name, member)                                                               \
  Field {                                                                                          \
    name, [](const RunConfig& c) { return std::to_string(c.member); },                            \
        [](RunConfig& c, const std::string& v) { c.member = to_positive_int(name, v); }           \
  }
#define GIPPO_COUNT(name, member)                                                                  \
  Field {                                                                                          \
    name, [](const RunConfig& c) { return std::to_string(c.member); },                            \
        [](RunConfig& c, const std::string& v) { c.member = to_count(name, v); }                  \
  }
#define GIPPO_LAYERS(name, member)                                                                 \
  Field {                                                                                          \
    name, [](const RunConfig& c) { return layers_str(c.member); },                                \
        [](RunConfig& c, const std::string& v) { c.member = to_layers(name, v); }                 \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"run.env", [](const RunConfig& c) { return c.env; },
            [](RunConfig& c, const std::string& v) {
              envs::make_env(v);  // validates
              c.env = v;
            }},
      Field{"run.algo", [](const RunConfig& c) { return c.algo; },
            [](RunConfig& c, const std::string& v) {
              algos::algo_from_name(v);
              c.algo = v;
            }},
      Field{"run.seed", [](const RunConfig& c) { return std::to_string(c.seed); },
            [](RunConfig& c, const std::string& v) {
              std::uint64_t s = 0;
              const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), s);
              if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("'run.seed': not a u64");
              c.seed = s;
            }},
      GIPPO_COUNT("run.epochs", epochs),
      Field{"run.timing", [](const RunConfig& c) { return std::string(c.train.timing ? "true" : "false"); },
            [](RunConfig& c, const std::string& v) { c.train.timing = to_bool("run.timing", v); }},

      GIPPO_POSITIVE("env.num_envs", train.num_envs),
      GIPPO_POSITIVE("env.horizon", train.horizon),

      GIPPO_LAYERS("actor.hidden", train.actor.hidden),
      Field{"actor.std_mode", [](const RunConfig& c) { return std_mode_name(c.train.actor.std_mode); },
            [](RunConfig& c, const std::string& v) { c.train.actor.std_mode = std_mode_from("actor.std_mode", v); }},
      GIPPO_DOUBLE("actor.min_logstd", train.actor.min_logstd),
      GIPPO_DOUBLE("actor.init_logstd", train.actor.init_logstd),
      GIPPO_DOUBLE("actor.output_scale", train.actor.output_scale),
      GIPPO_DOUBLE("actor.lr", train.actor_lr),
      Field{"actor.schedule", [](const RunConfig& c) { return nn::schedule_name(c.train.actor_schedule); },
            [](RunConfig& c, const std::string& v) {
              try {
                c.train.actor_schedule = nn::schedule_from_name(v);
              } catch (const std::exception& e) {
                throw ConfigError(std::string("'actor.schedule': ") + e.what());
              }
            }},
      GIPPO_DOUBLE("actor.min_lr", train.min_lr),
      GIPPO_DOUBLE("actor.max_lr", train.max_lr),
      GIPPO_DOUBLE("actor.kl_target", train.kl_target),
      GIPPO_DOUBLE("actor.max_grad_norm", train.actor_max_grad_norm),

      GIPPO_LAYERS("critic.hidden", train.critic_hidden),
      GIPPO_DOUBLE("critic.lr", train.critic_lr),
      GIPPO_COUNT("critic.iterations", train.critic_fit.iterations),
      GIPPO_POSITIVE("critic.minibatches", train.critic_fit.minibatches),
      GIPPO_DOUBLE("critic.max_grad_norm", train.critic_fit.max_grad_norm),

      GIPPO_DOUBLE("gae.gamma", train.gamma),
      GIPPO_DOUBLE("gae.lambda", train.lambda),

      GIPPO_DOUBLE("ppo.clip", train.ppo.clip),
      GIPPO_COUNT("ppo.epochs", train.ppo.epochs),
      GIPPO_POSITIVE("ppo.minibatch", train.ppo.minibatch),
      GIPPO_DOUBLE("ppo.max_grad_norm", train.ppo.max_grad_norm),

      GIPPO_DOUBLE("alpha.alpha0", train.alpha.alpha0),
      GIPPO_DOUBLE("alpha.beta", train.alpha.beta),
      GIPPO_DOUBLE("alpha.delta_det", train.alpha.delta_det),
      GIPPO_DOUBLE("alpha.delta_oorr", train.alpha.delta_oorr),
      GIPPO_DOUBLE("alpha.max_alpha", train.alpha.max_alpha),
      GIPPO_DOUBLE("alpha.lr", train.alpha_fit.lr),
      GIPPO_COUNT("alpha.epochs", train.alpha_fit.epochs),
      GIPPO_POSITIVE("alpha.minibatch", train.alpha_fit.minibatch),
      GIPPO_DOUBLE("alpha.max_grad_norm", train.alpha_fit.max_grad_norm),
      GIPPO_COUNT("alpha.divergence_patience", train.alpha_fit.divergence_patience),

      GIPPO_POSITIVE("lrrp.samples", train.lrrp.samples),
      Field{"lrrp.truncate", [](const RunConfig& c) { return std::to_string(c.train.lrrp.truncate); },
            [](RunConfig& c, const std::string& v) {
              c.train.lrrp.truncate = static_cast<std::size_t>(to_positive_int("lrrp.truncate", v));
            }},

      GIPPO_POSITIVE("traffic.lanes", traffic.lanes),
      GIPPO_POSITIVE("traffic.vehicles_per_lane", traffic.vehicles_per_lane),
      GIPPO_DOUBLE("traffic.v_target", traffic.v_target),
      GIPPO_DOUBLE("traffic.dt", traffic.dt),
      GIPPO_DOUBLE("traffic.accel_scale", traffic.accel_scale),
      GIPPO_DOUBLE("traffic.steer_scale", traffic.steer_scale),
      GIPPO_DOUBLE("traffic.far_threshold", traffic.far_threshold),
      GIPPO_POSITIVE("traffic.episode_length", traffic.episode_length),
      GIPPO_DOUBLE("traffic.obs_distance_scale", traffic.obs_distance_scale),
      GIPPO_DOUBLE("traffic.idm_v0", traffic.idm.v0),
      GIPPO_DOUBLE("traffic.idm_time_headway", traffic.idm.T),
      GIPPO_DOUBLE("traffic.idm_max_accel", traffic.idm.a),
      GIPPO_DOUBLE("traffic.idm_comfort_decel", traffic.idm.b),
      GIPPO_DOUBLE("traffic.idm_delta", traffic.idm.delta),
      GIPPO_DOUBLE("traffic.idm_min_gap", traffic.idm.s0),
      GIPPO_DOUBLE("traffic.idm_length", traffic.idm.length),
  };
  return table;
}

#undef GIPPO_DOUBLE
#undef GIPPO_POSITIVE
#undef GIPPO_COUNT
#undef GIPPO_LAYERS

const Field* find_field(const std::string& key) {
  for (const Field& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Assignments parse_config(const std::string& text) {
  Assignments out;
  std::stringstream ss(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": key outside of a section");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    out.emplace_back(section + "." + key, trim(line.substr(eq + 1)));
  }
  return out;
}

Assignments read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::pair<std::string, std::string> parse_assignment(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("expected section.key=value, got '" + text + "'");
  const std::string key = trim(text.substr(0, eq));
  if (key.find('.') == std::string::npos) throw ConfigError("expected section.key=value, got '" + text + "'");
  return {key, trim(text.substr(eq + 1))};
}

RunConfig default_run_config(const std::string& env, const std::string& algo) {
  RunConfig c;
  c.env = env;
  c.algo = algo;
  c.train = algos::default_config(env, algos::algo_from_name(algo));
  c.traffic = envs::traffic_params(env);
  return c;
}

void apply(RunConfig& config, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (f == nullptr) throw ConfigError("unknown config key '" + key + "'");
  try {
    f->set(config, value);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("'" + key + "': " + e.what());
  }
}

RunConfig resolve_config(const Assignments& assignments, const std::string& env_fallback,
                         const std::string& algo_fallback) {
  std::string env = env_fallback;
  std::string algo = algo_fallback;
  for (const auto& [k, v] : assignments) {
    if (find_field(k) == nullptr) throw ConfigError("unknown config key '" + k + "'");
    if (k == "run.env") env = v;
    if (k == "run.algo") algo = v;
  }
  try {
    envs::make_env(env);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  try {
    algos::algo_from_name(algo);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  RunConfig c = default_run_config(env, algo);
  for (const auto& [k, v] : assignments) apply(c, k, v);
  return c;
}

std::string render_config(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const Field& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string s = f.key.substr(0, dot);
    if (s != section) {
      if (!section.empty()) out += "\n";
      out += "[" + s + "]\n";
      section = s;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(config) + "\n";
  }
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const Field& f : fields()) out.push_back(f.key);
  return out;
}

}  // namespace gippo::cli
