#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "segqc/dataset.hpp"
#include "segqc/judge.hpp"
#include "segqc/prompt_template.hpp"

namespace segqc {

enum class ProviderKind { Mock, Http };

struct AppPaths {
  std::string manifest;  // empty: <out_dir>/manifest.jsonl
  std::string cache_dir = "cache";
  std::string out_dir = "out";
};

struct AppConfig {
  ProviderKind provider_kind = ProviderKind::Mock;
  ProviderConfig provider;
  AppPaths paths;
  QualityLabel positive_class = QualityLabel::Accept;
  std::optional<int> ensemble_k;
  std::string prompt_version{prompt_asset::kPromptVersion};
  bool inject_features = false;

  std::filesystem::path manifest_path() const {
    return paths.manifest.empty() ? std::filesystem::path(paths.out_dir) / "manifest.jsonl"
                                  : std::filesystem::path(paths.manifest);
  }
};

/// Reads a variable from the process environment (overridable in tests).
using Environment = std::function<std::optional<std::string>(const std::string&)>;

inline Environment process_environment() {
  return [](const std::string& name) -> std::optional<std::string> {
    const char* v = std::getenv(name.c_str());
    if (!v) return std::nullopt;
    return std::string(v);
  };
}

/// Environment variables and the config keys they set.
inline const std::vector<std::pair<std::string, std::string>>& environment_keys() {
  static const std::vector<std::pair<std::string, std::string>> keys = {
      {"SEGQC_PROVIDER", "provider.kind"},        {"SEGQC_ENDPOINT", "provider.endpoint_url"},
      {"SEGQC_MODEL", "provider.model_id"},       {"SEGQC_MAX_PARALLEL", "provider.max_parallel"},
      {"SEGQC_MANIFEST", "paths.manifest"},       {"SEGQC_CACHE_DIR", "paths.cache_dir"},
      {"SEGQC_OUT_DIR", "paths.out_dir"},         {"SEGQC_POSITIVE_CLASS", "positive_class"},
      {"SEGQC_ENSEMBLE_K", "ensemble_k"},
  };
  return keys;
}

namespace detail {

inline double config_number(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  }
}

inline int config_int(const std::string& key, const std::string& value) {
  const double v = config_number(key, value);
  if (v != static_cast<int>(v)) throw ConfigError(key + ": expected an integer, got '" + value + "'");
  return static_cast<int>(v);
}

struct ConfigBuilder {
  AppConfig cfg;
  bool model_set = false;

  void set(const std::string& key, const std::string& value) {
    if (key == "provider.kind") {
      if (value == "mock") cfg.provider_kind = ProviderKind::Mock;
      else if (value == "http") cfg.provider_kind = ProviderKind::Http;
      else throw ConfigError(key + ": expected mock or http, got '" + value + "'");
    } else if (key == "provider.endpoint_url") {
      cfg.provider.endpoint_url = value;
    } else if (key == "provider.model_id") {
      if (value.empty()) throw ConfigError(key + ": must not be empty");
      cfg.provider.model_id = value;
      model_set = true;
    } else if (key == "provider.api_key_env") {
      cfg.provider.api_key_env = value;
    } else if (key == "provider.timeout_s") {
      cfg.provider.timeout_s = config_number(key, value);
    } else if (key == "provider.max_retries") {
      cfg.provider.max_retries = config_int(key, value);
    } else if (key == "provider.max_parallel") {
      cfg.provider.max_parallel = config_int(key, value);
    } else if (key == "provider.temperature") {
      cfg.provider.temperature = config_number(key, value);
    } else if (key == "provider.backoff_base_ms") {
      cfg.provider.backoff_base_ms = config_number(key, value);
    } else if (key == "provider.backoff_cap_ms") {
      cfg.provider.backoff_cap_ms = config_number(key, value);
    } else if (key == "paths.manifest") {
      cfg.paths.manifest = value;
    } else if (key == "paths.cache_dir") {
      cfg.paths.cache_dir = value;
    } else if (key == "paths.out_dir") {
      cfg.paths.out_dir = value;
    } else if (key == "positive_class") {
      auto label = parse_quality_label(value);
      if (!label) throw ConfigError(key + ": expected accept or reject, got '" + value + "'");
      cfg.positive_class = *label;
    } else if (key == "ensemble_k") {
      if (value.empty() || value == "null") cfg.ensemble_k.reset();
      else cfg.ensemble_k = config_int(key, value);
    } else if (key == "prompt_version") {
      cfg.prompt_version = value;
    } else if (key == "inject_features") {
      if (value != "true" && value != "false") throw ConfigError(key + ": expected true or false");
      cfg.inject_features = value == "true";
    } else if (key == "api_key" || key == "provider.api_key") {
      throw ConfigError(key + ": credentials are only read from the environment");
    } else {
      throw ConfigError(key + ": unknown configuration key");
    }
  }

  void apply_json(const nlohmann::json& j, const std::string& prefix) {
    for (const auto& [k, v] : j.items()) {
      const std::string key = prefix.empty() ? k : prefix + "." + k;
      if (v.is_object()) apply_json(v, key);
      else if (v.is_string()) set(key, v.get<std::string>());
      else if (v.is_null()) set(key, "null");
      else set(key, v.dump());
    }
  }

  AppConfig finish() {
    if (cfg.provider_kind == ProviderKind::Mock && !model_set) cfg.provider.model_id = "mock-hcr";
    auto& c = cfg;
    if (c.paths.cache_dir.empty()) throw ConfigError("paths.cache_dir: must not be empty");
    if (c.paths.out_dir.empty()) throw ConfigError("paths.out_dir: must not be empty");
    if (c.ensemble_k && *c.ensemble_k < 2) throw ConfigError("ensemble_k: must be absent or >= 2");
    if (c.prompt_version != prompt_asset::kPromptVersion)
      throw ConfigError("prompt_version: unknown version '" + c.prompt_version + "'");
    if (c.provider.max_parallel < 1) throw ConfigError("provider.max_parallel: must be >= 1");
    if (c.provider.max_retries < 0) throw ConfigError("provider.max_retries: must be >= 0");
    if (!(c.provider.timeout_s > 0)) throw ConfigError("provider.timeout_s: must be > 0");
    return cfg;
  }
};

} // namespace detail

/// Resolves configuration with precedence flag > environment > file > default.
/// The file is `file` if given, else $SEGQC_CONFIG if set. `flags` holds
/// dotted keys (e.g. "provider.model_id") taken from the command line.
inline AppConfig load_config(const std::optional<std::filesystem::path>& file, const Environment& env,
                             const std::map<std::string, std::string>& flags = {}) {
  detail::ConfigBuilder b;
  std::optional<std::filesystem::path> path = file;
  if (!path)
    if (auto p = env("SEGQC_CONFIG"); p && !p->empty()) path = *p;
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("config file: cannot open " + path->string());
    auto j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ConfigError("config file: " + path->string() + " is not a JSON object");
    b.apply_json(j, "");
  }
  for (const auto& [var, key] : environment_keys())
    if (auto v = env(var)) b.set(key, *v);
  for (const auto& [key, value] : flags) b.set(key, value);
  return b.finish();
}

/// Fully resolved configuration for display; the credential is never printed.
inline nlohmann::ordered_json describe_config(const AppConfig& c, const Environment& env) {
  const bool key_present = !c.provider.api_key_env.empty() && env(c.provider.api_key_env).has_value();
  return {{"provider",
           {{"kind", c.provider_kind == ProviderKind::Mock ? "mock" : "http"},
            {"endpoint_url", c.provider.endpoint_url},
            {"model_id", c.provider.model_id},
            {"api_key_env", c.provider.api_key_env},
            {"api_key", key_present ? "<redacted>" : "<unset>"},
            {"timeout_s", c.provider.timeout_s},
            {"max_retries", c.provider.max_retries},
            {"max_parallel", c.provider.max_parallel},
            {"temperature", c.provider.temperature}}},
          {"paths",
           {{"manifest", c.manifest_path().string()}, {"cache_dir", c.paths.cache_dir}, {"out_dir", c.paths.out_dir}}},
          {"positive_class", std::string(to_string(c.positive_class))},
          {"ensemble_k", c.ensemble_k ? nlohmann::ordered_json(*c.ensemble_k) : nullptr},
          {"prompt_version", c.prompt_version},
          {"inject_features", c.inject_features}};
}

} // namespace segqc
