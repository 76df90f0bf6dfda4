#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "segqc/dataset.hpp"
#include "segqc/imaging.hpp"
#include "segqc/prompt_template.hpp"

namespace segqc {

struct ClinicalContext {
  std::string target;
  Modality modality = Modality::CT;
  std::string group;
  std::optional<std::string> extra_notes;
};

inline ClinicalContext context_for(const CaseRecord& c) { return {c.target, c.modality, c.group, std::nullopt}; }

struct MediaAttachment {
  std::string mime_type = "image/png";
  std::string base64_payload;

  std::string data_url() const { return "data:" + mime_type + ";base64," + base64_payload; }
};

struct HcrPrompt {
  std::string system_text;
  std::string user_text;
  MediaAttachment image_attachment;
  std::uint64_t prompt_hash = 0;

  std::string hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(prompt_hash));
    return buf;
  }
};

/// Maps each 1..5 usability score to its descriptive category.
struct Rubric {
  std::array<std::string, 5> entries;

  const std::string& category(int score) const { return entries.at(static_cast<std::size_t>(score - 1)); }
};

inline const Rubric& default_rubric() {
  static const Rubric rubric{{"unusable", "major revision required", "moderate revision required",
                              "acceptable with minor edits", "clinically ready"}};
  return rubric;
}

/// Describes the structured object the judge must emit.
struct OutputSchema {
  std::vector<std::string> text_fields;  // dotted paths of required text fields
  std::string score_field = "clinical_synthesis.score";
  std::string category_field = "clinical_synthesis.category";
  int min_score = 1;
  int max_score = 5;

  std::vector<std::string> all_field_names() const {
    std::vector<std::string> names;
    for (const auto& path : text_fields) names.push_back(path);
    names.push_back(score_field);
    names.push_back(category_field);
    return names;
  }

  /// JSON Schema rendering of the contract, for documentation and tooling.
  nlohmann::ordered_json json_schema(const Rubric& rubric) const {
    auto text = nlohmann::ordered_json{{"type", "string"}, {"minLength", 1}};
    auto obj = [&](std::initializer_list<const char*> keys) {
      nlohmann::ordered_json o{{"type", "object"}};
      nlohmann::ordered_json props = nlohmann::ordered_json::object();
      nlohmann::ordered_json req = nlohmann::ordered_json::array();
      for (auto k : keys) {
        props[k] = text;
        req.push_back(k);
      }
      o["properties"] = props;
      o["required"] = req;
      return o;
    };
    auto synthesis = obj({"summary"});
    synthesis["properties"]["score"] = {{"type", "integer"}, {"minimum", min_score}, {"maximum", max_score}};
    synthesis["properties"]["category"] = {{"type", "string"},
                                           {"enum", std::vector<std::string>(rubric.entries.begin(), rubric.entries.end())}};
    synthesis["required"] = {"summary", "score", "category"};
    return {{"type", "object"},
            {"properties",
             {{"knowledge_recall", text},
              {"visual_features", obj({"contour_continuity", "edge_clarity", "texture_homogeneity"})},
              {"anatomical_inference", obj({"plausibility", "under_segmentation", "spillage"})},
              {"clinical_synthesis", synthesis}}},
            {"required", {"knowledge_recall", "visual_features", "anatomical_inference", "clinical_synthesis"}}};
  }
};

inline std::pair<OutputSchema, Rubric> output_schema_and_rubric() {
  OutputSchema schema;
  schema.text_fields = {"knowledge_recall",
                        "visual_features.contour_continuity",
                        "visual_features.edge_clarity",
                        "visual_features.texture_homogeneity",
                        "anatomical_inference.plausibility",
                        "anatomical_inference.under_segmentation",
                        "anatomical_inference.spillage",
                        "clinical_synthesis.summary"};
  return {schema, default_rubric()};
}

inline std::string base64_encode(std::span<const std::uint8_t> data) {
  static constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((data.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < data.size(); i += 3) {
    const std::uint32_t n = (data[i] << 16) | (data[i + 1] << 8) | data[i + 2];
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += kAlphabet[n & 63];
  }
  if (i < data.size()) {
    std::uint32_t n = data[i] << 16;
    if (i + 1 < data.size()) n |= data[i + 1] << 8;
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += i + 1 < data.size() ? kAlphabet[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

namespace detail {

inline void replace_all(std::string& s, std::string_view key, std::string_view value) {
  for (std::size_t pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size()))
    s.replace(pos, key.size(), value);
}

inline std::string format_measurements(const VisualFeatures& f) {
  char buf[512];
  std::string out = "\n\nComputed measurements (supporting evidence; your judgment must still rest on the image):\n";
  std::snprintf(buf, sizeof buf, "- connected components: %zu\n- boundary edge strength (0-1): %.4f\n",
                f.topology.component_count, f.boundary_edge_strength);
  out += buf;
  if (f.interior_cv) {
    std::snprintf(buf, sizeof buf, "- interior coefficient of variation: %.4f\n", *f.interior_cv);
    out += buf;
  }
  if (f.overlap) {
    std::snprintf(buf, sizeof buf, "- dice vs reference: %.4f\n- missed fraction: %.4f\n- spill fraction: %.4f\n",
                  f.overlap->dice, f.overlap->under_seg_fraction, f.overlap->spill_fraction);
    out += buf;
  }
  out.pop_back();
  return out;
}

} // namespace detail

/// Assembles the four-stage reasoning prompt for one case. Computed features
/// are only appended when `injected_features` is given (off for zero-shot runs).
inline HcrPrompt build_hcr_prompt(const ClinicalContext& context, std::span<const std::uint8_t> image_png,
                                  const VisualFeatures* injected_features = nullptr,
                                  const Rubric& rubric = default_rubric()) {
  if (image_png.empty()) throw EmptyImage("prompt image is empty");
  if (context.target.empty()) throw InvalidContext("clinical context has an empty target");

  const std::string modality(to_string(context.modality));
  std::string rubric_text;
  for (int s = 1; s <= 5; ++s) rubric_text += "- " + std::to_string(s) + ": " + rubric.category(s) + (s < 5 ? "\n" : "");

  HcrPrompt p;
  p.system_text = std::string(prompt_asset::kSystemTemplate);
  p.user_text = std::string(prompt_asset::kUserTemplate);
  for (std::string* text : {&p.system_text, &p.user_text}) {
    detail::replace_all(*text, "{modality}", modality);
    detail::replace_all(*text, "{target}", context.target);
  }
  detail::replace_all(p.user_text, "{group}", context.group.empty() ? "unspecified" : context.group);
  detail::replace_all(p.user_text, "{notes}",
                      context.extra_notes ? "- Notes: " + *context.extra_notes + "\n" : std::string());
  detail::replace_all(p.user_text, "{rubric}", rubric_text);
  detail::replace_all(p.user_text, "{measurements}",
                      injected_features ? detail::format_measurements(*injected_features) : std::string());

  p.image_attachment.base64_payload = base64_encode(image_png);

  std::uint64_t h = detail::fnv1a64(prompt_asset::kPromptVersion);
  for (std::string_view part : {std::string_view(p.system_text), std::string_view(p.user_text)}) {
    h = detail::fnv1a64(std::string_view("\0", 1), h);
    h = detail::fnv1a64(part, h);
  }
  h = detail::fnv1a64(std::string_view("\0", 1), h);
  h = detail::fnv1a64(std::string_view(reinterpret_cast<const char*>(image_png.data()), image_png.size()), h);
  p.prompt_hash = h;
  return p;
}

} // namespace segqc
