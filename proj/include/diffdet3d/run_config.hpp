#pragma once

#include "diffdet3d/ssl.hpp"
#include "diffdet3d/synthdata.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffdet3d {

inline constexpr int kRunConfigVersion = 1;

/// Invalid configuration; `key()` is the offending "section.key".
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::invalid_argument(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Everything a command needs, loaded from a versioned INI file.
struct RunConfig {
  std::uint64_t seed = 1;
  int checkpoint_every = 10;

  SceneConfig scene;
  int n_train = 200;
  int n_val = 100;
  double labeled_ratio = 0.1;

  SslConfig ssl;

  std::uint64_t eval_seed = 7;
  /// SSL epochs between pseudo-label quality rows; the final epoch is always recorded.
  int pl_quality_every = 50;

  void validate() const;
};

/// Names of all accepted keys, in file order.
std::vector<std::string> run_config_keys();

/// Sets one "section.key" from text; throws ConfigError on unknown keys or bad values.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::string get_config_value(const RunConfig& config, const std::string& key);

/// Applies "section.key=value".
void apply_override(RunConfig& config, const std::string& assignment);

/// Parses INI text. Requires run.version; rejects unknown sections and keys.
/// The result is validated.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Canonical INI text listing every key.
std::string to_ini(const RunConfig& config);

}  // namespace diffdet3d
