#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "stda/scenario_data.hpp"
#include "stda/stda_model.hpp"

namespace stda {

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string help;
};

/// Every recognised key with its default, in documentation order.
const std::vector<ConfigKey>& config_keys();

/// Flat key=value experiment configuration. Values are kept as the exact
/// strings supplied, so serialisation round-trips losslessly.
class ExperimentConfig {
 public:
  ExperimentConfig();

  static ExperimentConfig from_file(const std::filesystem::path& path);
  static ExperimentConfig from_text(const std::string& text);
  // Applies the file's keys on top of the current values.
  void merge_text(const std::string& text);
  void merge_file(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  // "--key=value" or "key=value".
  void apply_override(const std::string& arg);
  // STDA_SEED, when present, replaces seed.
  void apply_env();

  const std::string& get(const std::string& key) const;
  std::string str(const std::string& key) const { return get(key); }
  int64_t integer(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::vector<double> reals(const std::string& key) const;
  uint64_t seed() const;

  std::string to_text() const;
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);

  StdaConfig model() const;
  SceneStyle scene() const;

  bool operator==(const ExperimentConfig&) const = default;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace stda
