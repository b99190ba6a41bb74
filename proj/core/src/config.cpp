#include "stda/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

namespace stda {

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"seed", "7", "master seed for data, initialisation and shuffling"},
      {"strict_determinism", "true", "deliver batches strictly in order"},
      {"model.preset", "tiny", "tiny | paper"},
      {"backbone", "", "classifier backbone name; empty picks the preset's residual network"},
      {"fusion.mode", "blend", "blend | cross_attention"},
      {"fusion.alpha", "0.5", "blend weight of the attention map, in [0,1]"},
      {"fusion.token_dim", "64", "cross-attention token width"},
      {"fusion.downsample", "1", "cross-attention spatial pooling factor"},
      {"da.enabled", "true", "use predicted attention; false feeds a uniform 0.5 map"},
      {"da.freeze", "false", "keep the attention predictor fixed during train"},
      {"da.checkpoint", "", "attention-predictor checkpoint used to warm-start train"},
      {"temporal.enabled", "true", "temporal encoder; false passes the last fused frame"},
      {"temporal.hidden_factor", "4", "FFN width as a multiple of T"},
      {"data.manifest", "", "JSONL manifest; empty generates synthetic scenes"},
      {"data.t_len", "4", "frames per sequence (T)"},
      {"data.image_size", "32", "square input size (multiple of 32)"},
      {"data.n_sequences", "1500", "synthetic sequence count"},
      {"data.class_ratios", "0.747946,0.137916,0.114138", "synthetic class mix: brake, turn_right, turn_left"},
      {"data.val_fraction", "0.2", "stratified validation share"},
      {"data.test_fraction", "0.0", "stratified test share"},
      {"scene.hazard_size", "0.15", "hazard width as a fraction of the frame"},
      {"scene.noise_level", "0.03", "per-pixel Gaussian noise"},
      {"scene.min_speed", "1.0", "slowest hazard, pixels per frame at 32 px"},
      {"scene.max_speed", "3.0", "fastest hazard, pixels per frame at 32 px"},
      {"scene.brake_jitter", "0.08", "lead-vehicle horizontal spread"},
      {"scene.min_decoys", "1", "fewest look-alike parked vehicles"},
      {"scene.max_decoys", "2", "most look-alike parked vehicles"},
      {"scene.marker_strength", "0.35", "how strongly the hazard's colour differs from decoys"},
      {"pretrain.epochs", "5", "attention pretraining epochs"},
      {"pretrain.lr", "0.02", "initial SGD learning rate"},
      {"pretrain.momentum", "0.9", "SGD momentum"},
      {"pretrain.decay", "0.8", "learning-rate factor applied after each epoch"},
      {"pretrain.batch_size", "8", "sequences per pretraining step"},
      {"train.epochs", "10", "end-to-end training epochs"},
      {"train.lr", "0.0001", "Adam learning rate"},
      {"train.batch_size", "8", "sequences per training step"},
      {"train.cost_mode", "default", "default (count ratios) | uniform"},
      {"eval.split", "val", "split scored by eval"},
      {"eval.iba_alpha", "0.1", "IBA dominance weight"},
      {"eval.averaging", "macro", "macro | weighted"},
      {"out_dir", "runs", "directory for checkpoints, reports and curves"},
  };
  return keys;
}

ExperimentConfig::ExperimentConfig() {
  for (const auto& k : config_keys()) values_[k.key] = k.default_value;
}

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
  ExperimentConfig cfg;
  cfg.merge_text(text);
  return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
  ExperimentConfig cfg;
  cfg.merge_file(path);
  return cfg;
}

void ExperimentConfig::merge_text(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::kConfig, "config line " + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void ExperimentConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  merge_text(ss.str());
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  require(values_.count(key) > 0, ErrorCode::kConfig, "unknown config key '" + key + "'");
  values_[key] = value;
}

void ExperimentConfig::apply_override(const std::string& arg) {
  std::string s = arg.rfind("--", 0) == 0 ? arg.substr(2) : arg;
  const auto eq = s.find('=');
  require(eq != std::string::npos, ErrorCode::kConfig, "override '" + arg + "' is not key=value");
  set(s.substr(0, eq), s.substr(eq + 1));
}

void ExperimentConfig::apply_env() {
  if (const char* env = std::getenv("STDA_SEED"); env != nullptr && *env != '\0') set("seed", env);
}

const std::string& ExperimentConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  require(it != values_.end(), ErrorCode::kConfig, "unknown config key '" + key + "'");
  return it->second;
}

int64_t ExperimentConfig::integer(const std::string& key) const {
  const auto& v = get(key);
  try {
    size_t used = 0;
    const auto out = std::stoll(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  fail(ErrorCode::kConfig, key + " must be an integer, got '" + v + "'");
}

double ExperimentConfig::real(const std::string& key) const {
  const auto& v = get(key);
  try {
    size_t used = 0;
    const auto out = std::stod(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  fail(ErrorCode::kConfig, key + " must be a number, got '" + v + "'");
}

bool ExperimentConfig::flag(const std::string& key) const {
  const auto& v = get(key);
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  fail(ErrorCode::kConfig, key + " must be true or false, got '" + v + "'");
}

std::vector<double> ExperimentConfig::reals(const std::string& key) const {
  std::vector<double> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      fail(ErrorCode::kConfig, key + " must be a comma-separated list of numbers");
    }
  }
  return out;
}

uint64_t ExperimentConfig::seed() const {
  const auto& v = get("seed");
  try {
    size_t used = 0;
    const auto out = std::stoull(v, &used);
    if (used == v.size()) return out;
  } catch (const std::exception&) {
  }
  fail(ErrorCode::kConfig, "seed must be a non-negative integer, got '" + v + "'");
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& k : config_keys()) out += k.key + "=" + values_.at(k.key) + "\n";
  return out;
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  for (const auto& [k, v] : j.items()) cfg.set(k, v.get<std::string>());
  return cfg;
}

StdaConfig ExperimentConfig::model() const {
  StdaConfig m;
  m.preset = get("model.preset");
  require(m.preset == "tiny" || m.preset == "paper", ErrorCode::kConfig, "model.preset must be tiny or paper");
  m.backbone = get("backbone");
  m.fusion = parse_fusion_mode(get("fusion.mode"));
  m.alpha = real("fusion.alpha");
  require(m.alpha >= 0.0 && m.alpha <= 1.0, ErrorCode::kConfig, "fusion.alpha must lie in [0,1]");
  m.cross.token_dim = static_cast<int>(integer("fusion.token_dim"));
  m.cross.downsample = static_cast<int>(integer("fusion.downsample"));
  m.t_len = static_cast<int>(integer("data.t_len"));
  m.image_size = static_cast<int>(integer("data.image_size"));
  require(m.image_size > 0 && m.image_size % 32 == 0, ErrorCode::kConfig, "data.image_size must be a multiple of 32");
  m.temporal_hidden_factor = static_cast<int>(integer("temporal.hidden_factor"));
  m.da_enabled = flag("da.enabled");
  m.temporal_enabled = flag("temporal.enabled");
  return m;
}

SceneStyle ExperimentConfig::scene() const {
  SceneStyle s;
  s.hazard_size = real("scene.hazard_size");
  s.noise_level = real("scene.noise_level");
  s.min_speed = real("scene.min_speed");
  s.max_speed = real("scene.max_speed");
  s.brake_jitter = real("scene.brake_jitter");
  s.min_decoys = static_cast<int>(integer("scene.min_decoys"));
  s.max_decoys = static_cast<int>(integer("scene.max_decoys"));
  s.marker_strength = real("scene.marker_strength");
  return s;
}

}  // namespace stda
