#pragma once

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <thread>
#include <variant>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "segqc/dataset.hpp"
#include "segqc/imaging.hpp"
#include "segqc/phantom.hpp"
#include "segqc/prompt.hpp"

namespace segqc {

// ===========================================================================
// Assessment model
// ===========================================================================

struct VisualFeatureNotes {
  std::string contour_continuity;
  std::string edge_clarity;
  std::string texture_homogeneity;
  bool operator==(const VisualFeatureNotes&) const = default;
};

struct AnatomicalInference {
  std::string plausibility;
  std::string under_segmentation;
  std::string spillage;
  bool operator==(const AnatomicalInference&) const = default;
};

struct ClinicalSynthesis {
  std::string summary;
  int score = 1;
  std::string category;
  bool operator==(const ClinicalSynthesis&) const = default;
};

/// The judge's four-stage structured output.
struct HcrAssessment {
  std::string knowledge_recall;
  VisualFeatureNotes visual_features;
  AnatomicalInference anatomical_inference;
  ClinicalSynthesis clinical_synthesis;
  bool operator==(const HcrAssessment&) const = default;
};

enum class FailureKind {
  ExtractError,      // no structured object could be located
  SchemaError,       // a required field is missing, mistyped or empty
  ScoreOutOfRange,
  CategoryMismatch,
  TransportFailure,  // the provider never produced text
  AssetError,        // the case's image or mask could not be read
};

inline std::string_view to_string(FailureKind k) {
  switch (k) {
    case FailureKind::ExtractError: return "ExtractError";
    case FailureKind::SchemaError: return "SchemaError";
    case FailureKind::ScoreOutOfRange: return "ScoreOutOfRange";
    case FailureKind::CategoryMismatch: return "CategoryMismatch";
    case FailureKind::TransportFailure: return "TransportFailure";
    case FailureKind::AssetError: return "AssetError";
  }
  return "?";
}

inline std::optional<FailureKind> parse_failure_kind(std::string_view s) {
  for (auto k : {FailureKind::ExtractError, FailureKind::SchemaError, FailureKind::ScoreOutOfRange,
                 FailureKind::CategoryMismatch, FailureKind::TransportFailure, FailureKind::AssetError})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

struct ParseFailure {
  FailureKind kind = FailureKind::ExtractError;
  std::string detail;
  std::string field;  // offending field path for SchemaError
  bool operator==(const ParseFailure&) const = default;
};

using JudgeOutcome = std::variant<HcrAssessment, ParseFailure>;

inline nlohmann::ordered_json to_json(const HcrAssessment& a) {
  return {{"knowledge_recall", a.knowledge_recall},
          {"visual_features",
           {{"contour_continuity", a.visual_features.contour_continuity},
            {"edge_clarity", a.visual_features.edge_clarity},
            {"texture_homogeneity", a.visual_features.texture_homogeneity}}},
          {"anatomical_inference",
           {{"plausibility", a.anatomical_inference.plausibility},
            {"under_segmentation", a.anatomical_inference.under_segmentation},
            {"spillage", a.anatomical_inference.spillage}}},
          {"clinical_synthesis",
           {{"summary", a.clinical_synthesis.summary},
            {"score", a.clinical_synthesis.score},
            {"category", a.clinical_synthesis.category}}}};
}

inline std::string serialize_assessment(const HcrAssessment& a, int indent = -1) { return to_json(a).dump(indent); }

// ===========================================================================
// Extraction and validation
// ===========================================================================

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::optional<nlohmann::json> parse_object(std::string_view text) {
  auto j = nlohmann::json::parse(text.begin(), text.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  return j;
}

/// Bodies of ``` fenced blocks, language tag line dropped.
inline std::vector<std::string_view> fenced_blocks(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    const auto open = text.find("```", pos);
    if (open == std::string_view::npos) break;
    const auto eol = text.find('\n', open + 3);
    if (eol == std::string_view::npos) break;
    const auto close = text.find("```", eol + 1);
    if (close == std::string_view::npos) break;
    out.push_back(text.substr(eol + 1, close - eol - 1));
    pos = close + 3;
  }
  return out;
}

/// Brace-balanced `{...}` span opening at `start`, skipping braces inside string literals.
inline std::optional<std::string_view> balanced_object_at(std::string_view text, std::size_t start) {
  int depth = 0;
  bool in_string = false, escaped = false;
  for (std::size_t i = start; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      if (escaped) escaped = false;
      else if (c == '\\') escaped = true;
      else if (c == '"') in_string = false;
      continue;
    }
    if (c == '"') in_string = true;
    else if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return text.substr(start, i - start + 1);
  }
  return std::nullopt;
}

struct Extracted {
  std::optional<nlohmann::json> object;
  std::string detail;
};

inline Extracted extract_object(std::string_view raw) {
  if (auto j = parse_object(trim(raw))) return {std::move(j), {}};
  for (auto block : fenced_blocks(raw))
    if (auto j = parse_object(trim(block))) return {std::move(j), {}};
  auto start = raw.find('{');
  if (start == std::string_view::npos) return {std::nullopt, "no structured object in output"};
  for (; start != std::string_view::npos; start = raw.find('{', start)) {
    auto span = balanced_object_at(raw, start);
    if (!span) return {std::nullopt, "unbalanced braces: structured object is truncated"};
    if (auto j = parse_object(*span)) return {std::move(j), {}};
    start += span->size();
  }
  return {std::nullopt, "no balanced object parses as JSON"};
}

inline std::optional<ParseFailure> read_text(const nlohmann::json& parent, const char* key, const std::string& path,
                                             std::string& out) {
  auto it = parent.find(key);
  if (it == parent.end()) return ParseFailure{FailureKind::SchemaError, "missing field " + path, path};
  if (!it->is_string()) return ParseFailure{FailureKind::SchemaError, "field " + path + " must be text", path};
  out = it->get<std::string>();
  if (trim(out).empty()) return ParseFailure{FailureKind::SchemaError, "field " + path + " is empty", path};
  return std::nullopt;
}

inline std::optional<ParseFailure> read_section(const nlohmann::json& root, const char* key,
                                                const nlohmann::json*& out) {
  auto it = root.find(key);
  if (it == root.end()) return ParseFailure{FailureKind::SchemaError, std::string("missing section ") + key, key};
  if (!it->is_object()) return ParseFailure{FailureKind::SchemaError, std::string("section ") + key + " must be an object", key};
  out = &*it;
  return std::nullopt;
}

} // namespace detail

/// Schema-validates an already-extracted object.
inline JudgeOutcome validate_assessment(const nlohmann::json& root, const Rubric& rubric = default_rubric()) {
  HcrAssessment a;
  const nlohmann::json *vf = nullptr, *ai = nullptr, *cs = nullptr;
  if (auto f = detail::read_text(root, "knowledge_recall", "knowledge_recall", a.knowledge_recall)) return *f;
  if (auto f = detail::read_section(root, "visual_features", vf)) return *f;
  if (auto f = detail::read_text(*vf, "contour_continuity", "visual_features.contour_continuity",
                                 a.visual_features.contour_continuity)) return *f;
  if (auto f = detail::read_text(*vf, "edge_clarity", "visual_features.edge_clarity", a.visual_features.edge_clarity))
    return *f;
  if (auto f = detail::read_text(*vf, "texture_homogeneity", "visual_features.texture_homogeneity",
                                 a.visual_features.texture_homogeneity)) return *f;
  if (auto f = detail::read_section(root, "anatomical_inference", ai)) return *f;
  if (auto f = detail::read_text(*ai, "plausibility", "anatomical_inference.plausibility",
                                 a.anatomical_inference.plausibility)) return *f;
  if (auto f = detail::read_text(*ai, "under_segmentation", "anatomical_inference.under_segmentation",
                                 a.anatomical_inference.under_segmentation)) return *f;
  if (auto f = detail::read_text(*ai, "spillage", "anatomical_inference.spillage", a.anatomical_inference.spillage))
    return *f;
  if (auto f = detail::read_section(root, "clinical_synthesis", cs)) return *f;
  if (auto f = detail::read_text(*cs, "summary", "clinical_synthesis.summary", a.clinical_synthesis.summary)) return *f;

  auto score_it = cs->find("score");
  if (score_it == cs->end())
    return ParseFailure{FailureKind::SchemaError, "missing field clinical_synthesis.score", "clinical_synthesis.score"};
  double score_value = 0.0;
  if (score_it->is_number_integer() || score_it->is_number_unsigned()) {
    score_value = score_it->get<double>();
  } else if (score_it->is_number_float() && std::isfinite(score_it->get<double>()) &&
             std::floor(score_it->get<double>()) == score_it->get<double>()) {
    score_value = score_it->get<double>();
  } else {
    return ParseFailure{FailureKind::SchemaError, "clinical_synthesis.score must be an integer",
                        "clinical_synthesis.score"};
  }

  auto cat_it = cs->find("category");
  if (cat_it == cs->end())
    return ParseFailure{FailureKind::SchemaError, "missing field clinical_synthesis.category",
                        "clinical_synthesis.category"};
  if (!cat_it->is_string())
    return ParseFailure{FailureKind::SchemaError, "clinical_synthesis.category must be text",
                        "clinical_synthesis.category"};

  if (score_value < 1 || score_value > 5)
    return ParseFailure{FailureKind::ScoreOutOfRange,
                        "score " + nlohmann::json(*score_it).dump() + " outside 1..5", "clinical_synthesis.score"};
  a.clinical_synthesis.score = static_cast<int>(score_value);

  a.clinical_synthesis.category = std::string(detail::trim(cat_it->get<std::string>()));
  const auto& expected = rubric.category(a.clinical_synthesis.score);
  if (a.clinical_synthesis.category != expected)
    return ParseFailure{FailureKind::CategoryMismatch,
                        "category '" + a.clinical_synthesis.category + "' does not match score " +
                            std::to_string(a.clinical_synthesis.score) + " ('" + expected + "')",
                        "clinical_synthesis.category"};
  return a;
}

/// Locates the judge's structured object (whole text, then fenced blocks,
/// then top-level balanced objects in order) and validates it. Never throws.
inline JudgeOutcome parse_assessment(std::string_view raw_text, const Rubric& rubric = default_rubric()) noexcept {
  try {
    auto extracted = detail::extract_object(raw_text);
    if (!extracted.object) return ParseFailure{FailureKind::ExtractError, extracted.detail, {}};
    return validate_assessment(*extracted.object, rubric);
  } catch (const std::exception& e) {
    return ParseFailure{FailureKind::ExtractError, std::string("parser error: ") + e.what(), {}};
  } catch (...) {
    return ParseFailure{FailureKind::ExtractError, "parser error", {}};
  }
}

// ===========================================================================
// Deterministic offline judge
// ===========================================================================

struct MockThresholds {
  double min_edge_strength = 0.15;
  double max_interior_cv = 0.8;
  double dice_minor = 0.90;
  double dice_major = 0.70;
  double max_under_seg = 0.25;
  double max_spill = 0.25;
};

/// Rule-based stand-in for a language model: starts at 5 and subtracts one
/// point per failed check, never going below 1.
inline HcrAssessment mock_judge(const VisualFeatures& f, const Rubric& rubric = default_rubric(),
                                const MockThresholds& t = {}) {
  int score = 5;
  char buf[256];
  HcrAssessment a;
  a.knowledge_recall =
      "The target organ is expected to appear as a single, compact, smoothly bounded region whose intensity is "
      "brighter than and clearly separated from the surrounding background.";

  const auto& topo = f.topology;
  if (topo.component_count != 1) {
    --score;
    std::snprintf(buf, sizeof buf, "Contour is not a single closed loop: %zu connected components.",
                  topo.component_count);
  } else {
    std::snprintf(buf, sizeof buf, "Contour forms one complete closed loop around a single region.");
  }
  a.visual_features.contour_continuity = buf;

  if (f.boundary_edge_strength < t.min_edge_strength) {
    --score;
    std::snprintf(buf, sizeof buf, "Weak intensity transition along the contour (edge strength %.3f < %.2f).",
                  f.boundary_edge_strength, t.min_edge_strength);
  } else {
    std::snprintf(buf, sizeof buf, "Contour follows a clear intensity transition (edge strength %.3f).",
                  f.boundary_edge_strength);
  }
  a.visual_features.edge_clarity = buf;

  if (!f.interior_cv) {
    std::snprintf(buf, sizeof buf, "No segmented region to assess.");
  } else if (*f.interior_cv > t.max_interior_cv) {
    --score;
    std::snprintf(buf, sizeof buf, "Heterogeneous interior texture (coefficient of variation %.3f > %.2f).",
                  *f.interior_cv, t.max_interior_cv);
  } else {
    std::snprintf(buf, sizeof buf, "Homogeneous interior texture (coefficient of variation %.3f).", *f.interior_cv);
  }
  a.visual_features.texture_homogeneity = buf;

  if (f.overlap) {
    const auto& o = *f.overlap;
    std::string plaus;
    if (o.dice < t.dice_minor) {
      --score;
      if (o.dice < t.dice_major) --score;
      std::snprintf(buf, sizeof buf, "Shape and extent deviate from the expected organ (dice %.3f).", o.dice);
    } else {
      std::snprintf(buf, sizeof buf, "Shape and location are consistent with the expected organ (dice %.3f).", o.dice);
    }
    a.anatomical_inference.plausibility = buf;
    if (o.under_seg_fraction > t.max_under_seg) {
      --score;
      std::snprintf(buf, sizeof buf, "Substantial under-segmentation: %.1f%% of the target is missed.",
                    100.0 * o.under_seg_fraction);
    } else {
      std::snprintf(buf, sizeof buf, "Target coverage is adequate (%.1f%% missed).", 100.0 * o.under_seg_fraction);
    }
    a.anatomical_inference.under_segmentation = buf;
    if (o.spill_fraction > t.max_spill) {
      --score;
      std::snprintf(buf, sizeof buf, "Spillage into adjacent tissue: %.1f%% of the contour area lies outside the target.",
                    100.0 * o.spill_fraction);
    } else {
      std::snprintf(buf, sizeof buf, "Little spillage (%.1f%% of the contour area outside the target).",
                    100.0 * o.spill_fraction);
    }
    a.anatomical_inference.spillage = buf;
  } else {
    a.anatomical_inference.plausibility = "No reference available; plausibility judged from visual features only.";
    a.anatomical_inference.under_segmentation = "Not assessable without a reference.";
    a.anatomical_inference.spillage = "Not assessable without a reference.";
  }

  score = std::max(score, 1);
  a.clinical_synthesis.score = score;
  a.clinical_synthesis.category = rubric.category(score);
  a.clinical_synthesis.summary = "Rule-based assessment: score " + std::to_string(score) + " (" +
                                 a.clinical_synthesis.category + ") after " + std::to_string(5 - score) +
                                 " deduction(s).";
  return a;
}

// ===========================================================================
// Provider wire protocol
// ===========================================================================

struct ProviderConfig {
  std::string endpoint_url = "https://openrouter.ai/api/v1/chat/completions";
  std::string model_id = "google/gemini-2.5-flash";
  std::string api_key_env = "SEGQC_API_KEY";  // empty: send no credential
  double timeout_s = 60.0;
  int max_retries = 3;
  int max_parallel = 4;
  double temperature = 0.0;
  double backoff_base_ms = 1000.0;
  double backoff_factor = 2.0;
  double backoff_cap_ms = 30000.0;

  void validate() const {
    if (max_retries < 0) throw RangeError("max_retries must be >= 0");
    if (max_parallel < 1) throw RangeError("max_parallel must be >= 1");
    if (!(timeout_s > 0.0)) throw RangeError("timeout must be > 0");
  }
};

struct Completion {
  std::string text;
  int attempts = 1;
};

namespace detail {

struct ParsedUrl {
  std::string scheme_host_port;
  std::string path;
};

inline ParsedUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw TransportError("endpoint url lacks a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

inline std::string response_text(const std::string& body) {
  auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) throw TransportError("response body is not JSON");
  try {
    const auto& content = j.at("choices").at(0).at("message").at("content");
    if (content.is_string()) return content.get<std::string>();
    if (content.is_array()) {
      std::string text;
      for (const auto& part : content)
        if (part.contains("text") && part["text"].is_string()) text += part["text"].get<std::string>();
      return text;
    }
  } catch (const nlohmann::json::exception&) {
  }
  throw TransportError("response has no choices[0].message.content");
}

} // namespace detail

/// Chat-completion request body: system message, then a user message carrying
/// the text and the image as an inline data URL.
inline nlohmann::ordered_json chat_request_body(const HcrPrompt& prompt, const ProviderConfig& config) {
  return {{"model", config.model_id},
          {"temperature", config.temperature},
          {"messages",
           {{{"role", "system"}, {"content", prompt.system_text}},
            {{"role", "user"},
             {"content",
              {{{"type", "text"}, {"text", prompt.user_text}},
               {{"type", "image_url"}, {"image_url", {{"url", prompt.image_attachment.data_url()}}}}}}}}}};
}

/// Sends one judgment request; retries timeouts, 429 and 5xx with capped
/// exponential backoff and full jitter.
inline Completion send_judge_request(const HcrPrompt& prompt, const ProviderConfig& config) {
  config.validate();
  std::string api_key;
  if (!config.api_key_env.empty()) {
    const char* v = std::getenv(config.api_key_env.c_str());
    if (!v || !*v) throw AuthError("environment variable " + config.api_key_env + " is not set");
    api_key = v;
  }
  const auto url = detail::split_url(config.endpoint_url);
  const std::string body = chat_request_body(prompt, config).dump();

  thread_local std::mt19937_64 jitter_rng{std::random_device{}()};
  const auto secs = static_cast<time_t>(config.timeout_s);
  const auto usecs = static_cast<time_t>((config.timeout_s - static_cast<double>(secs)) * 1e6);

  std::string last_problem;
  bool last_was_timeout = false;
  for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
    if (attempt > 0) {
      const double ceiling =
          std::min(config.backoff_cap_ms, config.backoff_base_ms * std::pow(config.backoff_factor, attempt - 1));
      const double wait = std::uniform_real_distribution<double>(0.0, std::max(0.0, ceiling))(jitter_rng);
      std::this_thread::sleep_for(std::chrono::microseconds(static_cast<long long>(wait * 1000.0)));
    }

    httplib::Client client(url.scheme_host_port);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!api_key.empty()) headers.emplace("Authorization", "Bearer " + api_key);

    auto res = client.Post(url.path, headers, body, "application/json");
    if (!res) {
      const auto err = res.error();
      if (err == httplib::Error::Read || err == httplib::Error::Write || err == httplib::Error::ConnectionTimeout) {
        last_was_timeout = true;
        last_problem = "request timed out (" + httplib::to_string(err) + ")";
        continue;
      }
      throw TransportError("transport failure: " + httplib::to_string(err));
    }
    if (res->status == 401 || res->status == 403)
      throw AuthError("provider rejected credentials (HTTP " + std::to_string(res->status) + ")");
    if (res->status == 429 || res->status >= 500) {
      last_was_timeout = false;
      last_problem = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status < 200 || res->status >= 300)
      throw TransportError("provider returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
    return {detail::response_text(res->body), attempt + 1};
  }
  const std::string msg =
      "gave up after " + std::to_string(config.max_retries + 1) + " attempt(s): " + last_problem;
  if (last_was_timeout) throw TimeoutError(msg);
  throw TransientExhausted(msg);
}

// ===========================================================================
// Providers
// ===========================================================================

/// Everything a provider may look at for one case.
struct CaseAssets {
  const CaseRecord* record = nullptr;
  RasterImage image;
  BinaryMask mask;
  std::optional<BinaryMask> reference;
  Bytes overlay_png;
};

class JudgeProvider {
public:
  virtual ~JudgeProvider() = default;
  virtual std::string model_id() const = 0;
  virtual int max_parallel() const = 0;
  /// Must be safe to call concurrently.
  virtual Completion complete(const HcrPrompt& prompt, const CaseAssets& assets) const = 0;
};

class HttpJudgeProvider final : public JudgeProvider {
public:
  explicit HttpJudgeProvider(ProviderConfig config) : config_(std::move(config)) { config_.validate(); }

  std::string model_id() const override { return config_.model_id; }
  int max_parallel() const override { return config_.max_parallel; }
  Completion complete(const HcrPrompt& prompt, const CaseAssets&) const override {
    return send_judge_request(prompt, config_);
  }

private:
  ProviderConfig config_;
};

/// Offline provider: measures the case's pixels and answers with the rule-based judge.
class MockJudgeProvider final : public JudgeProvider {
public:
  explicit MockJudgeProvider(int max_parallel = 4, std::string model_id = "mock-hcr")
      : max_parallel_(max_parallel), model_id_(std::move(model_id)) {}

  std::string model_id() const override { return model_id_; }
  int max_parallel() const override { return max_parallel_; }
  Completion complete(const HcrPrompt&, const CaseAssets& assets) const override {
    const auto features =
        extract_features(assets.image, assets.mask, assets.reference ? &*assets.reference : nullptr);
    return {serialize_assessment(mock_judge(features), 2), 1};
  }

private:
  int max_parallel_;
  std::string model_id_;
};

// ===========================================================================
// Transcripts and batch execution
// ===========================================================================

struct JudgeTranscript {
  std::string case_id;
  std::string model_id;
  std::string prompt_hash;  // hex; empty when no prompt could be built
  int sample = 0;
  std::string raw_text;
  JudgeOutcome outcome;
  int attempts = 1;
  double latency_ms = 0.0;
  std::string timestamp;  // ISO-8601 UTC

  bool is_failure() const { return std::holds_alternative<ParseFailure>(outcome); }
};

inline std::string format_utc(std::chrono::system_clock::time_point t) {
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(t.time_since_epoch()).count();
  std::time_t secs = static_cast<std::time_t>(ms / 1000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[96];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms % 1000));
  return buf;
}

inline nlohmann::ordered_json to_json(const ParseFailure& f) {
  nlohmann::ordered_json j{{"kind", std::string(to_string(f.kind))}, {"detail", f.detail}};
  if (!f.field.empty()) j["field"] = f.field;
  return j;
}

inline nlohmann::ordered_json to_json(const JudgeTranscript& t) {
  nlohmann::ordered_json outcome;
  if (auto* a = std::get_if<HcrAssessment>(&t.outcome)) {
    outcome = {{"type", "assessment"}, {"assessment", to_json(*a)}};
  } else {
    outcome = {{"type", "failure"}, {"failure", to_json(std::get<ParseFailure>(t.outcome))}};
  }
  return {{"case_id", t.case_id},   {"model_id", t.model_id},     {"prompt_hash", t.prompt_hash},
          {"sample", t.sample},     {"raw_text", t.raw_text},     {"outcome", outcome},
          {"attempts", t.attempts}, {"latency_ms", t.latency_ms}, {"timestamp", t.timestamp}};
}

inline JudgeTranscript transcript_from_json(const nlohmann::json& j) {
  JudgeTranscript t;
  t.case_id = j.at("case_id").get<std::string>();
  t.model_id = j.at("model_id").get<std::string>();
  t.prompt_hash = j.at("prompt_hash").get<std::string>();
  t.sample = j.value("sample", 0);
  t.raw_text = j.at("raw_text").get<std::string>();
  t.attempts = j.at("attempts").get<int>();
  t.latency_ms = j.at("latency_ms").get<double>();
  t.timestamp = j.at("timestamp").get<std::string>();
  const auto& o = j.at("outcome");
  if (o.at("type") == "assessment") {
    auto parsed = validate_assessment(o.at("assessment"));
    t.outcome = parsed;
  } else {
    const auto& f = o.at("failure");
    auto kind = parse_failure_kind(f.at("kind").get<std::string>());
    if (!kind) throw FormatError(0, "unknown failure kind");
    t.outcome = ParseFailure{*kind, f.at("detail").get<std::string>(), f.value("field", std::string())};
  }
  return t;
}

/// Directory-safe rendering of a model id (gateway ids contain '/').
inline std::string model_dir_name(std::string_view model_id) {
  std::string out;
  for (char c : model_id)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_') ? c : '_';
  return out.empty() ? "_" : out;
}

inline std::filesystem::path transcript_path(const std::filesystem::path& cache_dir, std::string_view model_id) {
  return cache_dir / model_dir_name(model_id) / "transcripts.jsonl";
}

/// Reads a transcript file; a torn final line (interrupted write) is ignored.
inline std::vector<JudgeTranscript> load_transcripts(const std::filesystem::path& path) {
  std::vector<JudgeTranscript> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) continue;
    try {
      out.push_back(transcript_from_json(j));
    } catch (const std::exception&) {
    }
  }
  return out;
}

/// Appends transcripts by rewriting the file through a temporary and an
/// atomic rename.
inline void append_transcripts(const std::filesystem::path& path, const std::vector<JudgeTranscript>& items) {
  static std::mutex write_mutex;
  std::lock_guard lock(write_mutex);
  std::error_code ec;
  std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create cache directory " + path.parent_path().string() + ": " + ec.message());
  std::string existing;
  if (std::filesystem::exists(path)) {
    auto bytes = read_file_bytes(path);
    existing.assign(bytes.begin(), bytes.end());
    if (!existing.empty() && existing.back() != '\n') existing += '\n';
  }
  for (const auto& t : items) existing += to_json(t).dump() + "\n";
  auto tmp = path;
  tmp += ".tmp." + std::to_string(static_cast<unsigned long long>(
                       std::hash<std::thread::id>{}(std::this_thread::get_id())));
  write_file_bytes(tmp, std::span(reinterpret_cast<const std::uint8_t*>(existing.data()), existing.size()));
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot finalize " + path.string() + ": " + ec.message());
}

struct BatchOptions {
  std::filesystem::path asset_root;  // image_ref / mask_ref are relative to this
  int samples = 1;
  bool inject_features = false;
  /// When set, transcripts carry this timestamp and zero latency (reproducible runs).
  std::optional<std::chrono::system_clock::time_point> fixed_time;
  /// Where true organ masks live (references/<id>.png); used by the mock judge.
  std::optional<std::filesystem::path> reference_root;
};

struct BatchStats {
  std::size_t cache_hits = 0;
  std::size_t provider_calls = 0;
  std::size_t failures = 0;           // transcripts holding any failure
  std::size_t transport_failures = 0; // provider or asset never produced text
};

inline std::string cache_key(std::string_view case_id, std::string_view prompt_hash, int sample) {
  return std::string(case_id) + '\x1f' + std::string(prompt_hash) + '\x1f' + std::to_string(sample);
}

namespace detail {

struct PreparedCase {
  std::optional<CaseAssets> assets;
  std::optional<HcrPrompt> prompt;
  std::string error;
};

inline PreparedCase prepare_case(const CaseRecord& c, const BatchOptions& opt) {
  PreparedCase out;
  try {
    CaseAssets a;
    a.record = &c;
    a.image = load_raster(opt.asset_root / c.image_ref);
    a.mask = load_mask(opt.asset_root / c.mask_ref);
    if (opt.reference_root) {
      auto ref = reference_path(*opt.reference_root, c.id);
      if (std::filesystem::exists(ref)) a.reference = load_mask(ref);
    }
    a.overlay_png = render_overlay(a.image, a.mask);
    std::optional<VisualFeatures> injected;
    if (opt.inject_features)
      injected = extract_features(a.image, a.mask, a.reference ? &*a.reference : nullptr);
    out.prompt = build_hcr_prompt(context_for(c), a.overlay_png, injected ? &*injected : nullptr);
    out.assets = std::move(a);
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

} // namespace detail

/// Judges every case (times `samples`), reusing cached transcripts keyed by
/// (case id, model id, prompt hash, sample). Output order follows input order.
/// Failures become failure transcripts; only cache I/O errors throw.
inline std::vector<JudgeTranscript> run_batch(const std::vector<CaseRecord>& cases, const JudgeProvider& provider,
                                              const std::filesystem::path& cache_dir, const BatchOptions& opt = {},
                                              BatchStats* stats = nullptr) {
  const auto model = provider.model_id();
  const auto path = transcript_path(cache_dir, model);
  std::map<std::string, JudgeTranscript> cached;
  for (auto& t : load_transcripts(path))
    if (t.model_id == model) cached[cache_key(t.case_id, t.prompt_hash, t.sample)] = std::move(t);

  const int samples = std::max(1, opt.samples);
  std::vector<detail::PreparedCase> prepared(cases.size());
  std::vector<JudgeTranscript> results(cases.size() * static_cast<std::size_t>(samples));
  std::vector<std::size_t> pending;

  auto stamp = [&](JudgeTranscript& t) {
    t.timestamp = format_utc(opt.fixed_time ? *opt.fixed_time : std::chrono::system_clock::now());
  };

  for (std::size_t i = 0; i < cases.size(); ++i) {
    prepared[i] = detail::prepare_case(cases[i], opt);
    for (int s = 0; s < samples; ++s) {
      const std::size_t slot = i * samples + s;
      auto& t = results[slot];
      t.case_id = cases[i].id;
      t.model_id = model;
      t.sample = s;
      if (!prepared[i].prompt) {
        t.outcome = ParseFailure{FailureKind::AssetError, prepared[i].error, {}};
        stamp(t);
        continue;
      }
      t.prompt_hash = prepared[i].prompt->hash_hex();
      if (auto it = cached.find(cache_key(t.case_id, t.prompt_hash, s)); it != cached.end()) {
        t = it->second;
        continue;
      }
      pending.push_back(slot);
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < pending.size(); k = next++) {
      const std::size_t slot = pending[k];
      const auto& pc = prepared[slot / samples];
      auto& t = results[slot];
      const auto begin = std::chrono::steady_clock::now();
      try {
        auto completion = provider.complete(*pc.prompt, *pc.assets);
        t.raw_text = std::move(completion.text);
        t.attempts = completion.attempts;
        t.outcome = parse_assessment(t.raw_text);
      } catch (const std::exception& e) {
        t.outcome = ParseFailure{FailureKind::TransportFailure, e.what(), {}};
      }
      t.latency_ms = opt.fixed_time
                         ? 0.0
                         : std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - begin).count();
      stamp(t);
    }
  };
  const auto threads = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, provider.max_parallel())),
                                              pending.size());
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < threads; ++i) pool.emplace_back(worker);
  if (threads > 0) worker();
  for (auto& th : pool) th.join();

  std::vector<JudgeTranscript> fresh;
  for (auto slot : pending) {
    const auto& t = results[slot];
    auto* f = std::get_if<ParseFailure>(&t.outcome);
    if (f && (f->kind == FailureKind::TransportFailure || f->kind == FailureKind::AssetError)) continue;
    fresh.push_back(t);
  }
  if (!fresh.empty()) append_transcripts(path, fresh);
  if (stats) {
    stats->provider_calls = pending.size();
    stats->cache_hits = 0;
    stats->failures = stats->transport_failures = 0;
    for (const auto& t : results) {
      auto* f = std::get_if<ParseFailure>(&t.outcome);
      if (!f) continue;
      ++stats->failures;
      if (f->kind == FailureKind::TransportFailure || f->kind == FailureKind::AssetError) ++stats->transport_failures;
    }
    std::size_t asset_failures = 0;
    for (const auto& pc : prepared)
      if (!pc.prompt) asset_failures += static_cast<std::size_t>(samples);
    stats->cache_hits = results.size() - pending.size() - asset_failures;
  }
  return results;
}

} // namespace segqc
