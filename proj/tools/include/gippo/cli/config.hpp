#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "gippo/algos.hpp"
#include "gippo/envs.hpp"

namespace gippo::cli {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct RunConfig {
  std::string env = "dejong1";
  std::string algo = "gippo";
  std::uint64_t seed = 0;
  int epochs = 100;
  algos::TrainConfig train;
  envs::TrafficParams traffic;
};

// "section.key" -> value, in file order of appearance.
using Assignments = std::vector<std::pair<std::string, std::string>>;

// Flat sectioned format:
//   # comment
//   [section]
//   key = value
// Throws ConfigError with the line number on malformed input.
Assignments parse_config(const std::string& text);
Assignments read_config_file(const std::string& path);
// "section.key=value"
std::pair<std::string, std::string> parse_assignment(const std::string& text);

// Defaults for (env, algo): the algorithm defaults plus the env's traffic layout.
RunConfig default_run_config(const std::string& env, const std::string& algo);

// Resolves a run: env/algo are taken from the overrides (last wins) or the
// given fallbacks, defaults are built for that pair, then every assignment is
// applied in order. Unknown keys and unparsable values throw ConfigError.
RunConfig resolve_config(const Assignments& assignments, const std::string& env_fallback,
                         const std::string& algo_fallback);

void apply(RunConfig& config, const std::string& key, const std::string& value);

// Every key with its effective value, grouped by section.
std::string render_config(const RunConfig& config);

// All recognised keys, "section.key".
std::vector<std::string> config_keys();

std::string format_double(double v);

}  // namespace gippo::cli
