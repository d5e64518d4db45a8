#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

// Run configuration shared by the CLI commands. Precedence is defaults <
// config file (plain `key = value`, `#` comments) < command-line flags.
namespace datr::config {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  std::string variant = "M";
  int neighborhood = 11;          // DA window, odd
  std::string structure = "ooos"; // per-stage attention, o = ESA, s = DA
  std::string pe = "rpe";         // rpe | ape | none
  bool wrap_horizontal = false;
  double lr = 5e-5;
  int epochs_source = 5;
  int epochs_adapt = 10;
  int batch_size = 2;
  double lambda_ss = 1.0;
  double lambda_f = 0.1;
  double threshold = 0.0;  // pseudo-label confidence cutoff, 0 disables
  std::uint64_t seed = 1;
  std::string data_dir;
  std::string out_dir;

  // fixed optimizer/schedule constants
  static constexpr double kAdamEps = 1e-8;
  static constexpr double kWeightDecay = 1e-4;
  static constexpr double kPolyPower = 0.9;

  void validate() const {
    if (variant != "M" && variant != "T" && variant != "S")
      throw ConfigError("variant must be M, T or S, got '" + variant + "'");
    if (neighborhood < 1 || neighborhood % 2 == 0)
      throw ConfigError("neighborhood must be odd and >= 1");
    if (structure.size() != 4 || structure.find_first_not_of("os") != std::string::npos)
      throw ConfigError("structure must be 4 chars of o/s, got '" + structure + "'");
    if (pe != "rpe" && pe != "ape" && pe != "none")
      throw ConfigError("pe must be rpe, ape or none");
    if (lr <= 0) throw ConfigError("lr must be positive");
    if (epochs_source < 0 || epochs_adapt < 0) throw ConfigError("epoch counts must be >= 0");
    if (batch_size < 1) throw ConfigError("batch-size must be >= 1");
    if (threshold < 0 || threshold > 1) throw ConfigError("threshold must be in [0, 1]");
  }

  nlohmann::json to_json() const {
    return {{"variant", variant},
            {"neighborhood", neighborhood},
            {"structure", structure},
            {"pe", pe},
            {"wrap_horizontal", wrap_horizontal},
            {"lr", lr},
            {"epochs_source", epochs_source},
            {"epochs_adapt", epochs_adapt},
            {"batch_size", batch_size},
            {"lambda_ss", lambda_ss},
            {"lambda_f", lambda_f},
            {"threshold", threshold},
            {"seed", seed}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    c.variant = j.value("variant", c.variant);
    c.neighborhood = j.value("neighborhood", c.neighborhood);
    c.structure = j.value("structure", c.structure);
    c.pe = j.value("pe", c.pe);
    c.wrap_horizontal = j.value("wrap_horizontal", c.wrap_horizontal);
    c.lr = j.value("lr", c.lr);
    c.epochs_source = j.value("epochs_source", c.epochs_source);
    c.epochs_adapt = j.value("epochs_adapt", c.epochs_adapt);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lambda_ss = j.value("lambda_ss", c.lambda_ss);
    c.lambda_f = j.value("lambda_f", c.lambda_f);
    c.threshold = j.value("threshold", c.threshold);
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

// `key = value` per line; '#' starts a comment; unknown keys are errors.
inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::map<std::string, std::string> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    out[key] = value;
  }
  return out;
}

inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto as_int = [&](const std::string& v) {
    try {
      return std::stoi(v);
    } catch (...) {
      throw ConfigError("bad integer for " + key + ": '" + v + "'");
    }
  };
  auto as_double = [&](const std::string& v) {
    try {
      return std::stod(v);
    } catch (...) {
      throw ConfigError("bad number for " + key + ": '" + v + "'");
    }
  };
  auto as_bool = [&](const std::string& v) {
    if (v == "true" || v == "1" || v == "on") return true;
    if (v == "false" || v == "0" || v == "off") return false;
    throw ConfigError("bad boolean for " + key + ": '" + v + "'");
  };
  if (key == "variant")
    cfg.variant = value;
  else if (key == "neighborhood")
    cfg.neighborhood = as_int(value);
  else if (key == "structure")
    cfg.structure = value;
  else if (key == "pe")
    cfg.pe = value;
  else if (key == "wrap-horizontal")
    cfg.wrap_horizontal = as_bool(value);
  else if (key == "lr")
    cfg.lr = as_double(value);
  else if (key == "epochs-source")
    cfg.epochs_source = as_int(value);
  else if (key == "epochs-adapt")
    cfg.epochs_adapt = as_int(value);
  else if (key == "batch-size")
    cfg.batch_size = as_int(value);
  else if (key == "lambda-ss")
    cfg.lambda_ss = as_double(value);
  else if (key == "lambda-f")
    cfg.lambda_f = as_double(value);
  else if (key == "threshold")
    cfg.threshold = as_double(value);
  else if (key == "seed")
    cfg.seed = static_cast<std::uint64_t>(std::stoull(value));
  else if (key == "data")
    cfg.data_dir = value;
  else if (key == "out")
    cfg.out_dir = value;
  else
    throw ConfigError("unknown config key '" + key + "'");
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  for (const auto& [key, value] : parse_config_file(path)) apply_config_entry(cfg, key, value);
}

}  // namespace datr::config
