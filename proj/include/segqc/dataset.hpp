#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "segqc/error.hpp"

namespace segqc {

enum class QualityLabel { Accept, Reject };
enum class Modality { CT, MR, PET_CT };
enum class Split { Train, Test };

inline std::string_view to_string(QualityLabel l) { return l == QualityLabel::Accept ? "accept" : "reject"; }

inline std::optional<QualityLabel> parse_quality_label(std::string_view s) {
  if (s == "accept") return QualityLabel::Accept;
  if (s == "reject") return QualityLabel::Reject;
  return std::nullopt;
}

inline std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::CT: return "CT";
    case Modality::MR: return "MR";
    case Modality::PET_CT: return "PET-CT";
  }
  return "?";
}

inline std::optional<Modality> parse_modality(std::string_view s) {
  if (s == "CT") return Modality::CT;
  if (s == "MR") return Modality::MR;
  if (s == "PET-CT") return Modality::PET_CT;
  return std::nullopt;
}

inline std::string_view to_string(Split s) { return s == Split::Train ? "train" : "test"; }

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  return std::nullopt;
}

/// Expert usability score (1..5) to the binary clinical label: 4 and 5 are
/// acceptable, 1 to 3 are not.
inline QualityLabel score_to_label(int score) {
  if (score < 1 || score > 5)
    throw RangeError("usability score " + std::to_string(score) + " outside 1..5");
  return score >= 4 ? QualityLabel::Accept : QualityLabel::Reject;
}

struct CaseRecord {
  std::string id;
  std::string group;
  Modality modality = Modality::CT;
  std::string target;
  std::string image_ref;
  std::string mask_ref;
  std::optional<int> expert_score;
  std::optional<QualityLabel> gt_label;
  std::optional<Split> split;

  bool operator==(const CaseRecord&) const = default;
};

struct Manifest {
  int version = 1;
  std::vector<CaseRecord> cases;

  bool operator==(const Manifest&) const = default;
};

// ---------------------------------------------------------------------------
// Line-delimited manifest serialization
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const CaseRecord& c) {
  nlohmann::ordered_json j;
  j["id"] = c.id;
  j["group"] = c.group;
  j["modality"] = std::string(to_string(c.modality));
  j["target"] = c.target;
  j["image_ref"] = c.image_ref;
  j["mask_ref"] = c.mask_ref;
  j["expert_score"] = c.expert_score ? nlohmann::ordered_json(*c.expert_score) : nullptr;
  j["gt_label"] = c.gt_label ? nlohmann::ordered_json(std::string(to_string(*c.gt_label))) : nullptr;
  j["split"] = c.split ? nlohmann::ordered_json(std::string(to_string(*c.split))) : nullptr;
  return j;
}

namespace detail {

inline constexpr std::string_view kRecordFields[] = {
    "id", "group", "modality", "target", "image_ref", "mask_ref", "expert_score", "gt_label", "split"};

inline std::string require_string(const nlohmann::json& j, const char* key, std::size_t line) {
  const auto& v = j.at(key);
  if (!v.is_string()) throw FormatError(line, std::string("field '") + key + "' must be a string");
  return v.get<std::string>();
}

} // namespace detail

/// Validates one record's own invariants (range and label/score coupling).
inline void validate_record(const CaseRecord& c, std::size_t line = 0) {
  if (c.id.empty()) throw FormatError(line, "empty id");
  if (c.expert_score && (*c.expert_score < 1 || *c.expert_score > 5))
    throw RangeError((line ? "line " + std::to_string(line) + ": " : std::string()) + "expert_score " +
                     std::to_string(*c.expert_score) + " outside 1..5 for case " + c.id);
  if (c.expert_score && c.gt_label && score_to_label(*c.expert_score) != *c.gt_label)
    throw FormatError(line, "gt_label disagrees with expert_score for case " + c.id);
}

inline CaseRecord record_from_json(const nlohmann::json& j, std::size_t line = 0) {
  if (!j.is_object()) throw FormatError(line, "record is not an object");
  for (auto key : detail::kRecordFields)
    if (!j.contains(std::string(key))) throw FormatError(line, "missing field '" + std::string(key) + "'");
  for (const auto& [key, _] : j.items())
    if (std::find(std::begin(detail::kRecordFields), std::end(detail::kRecordFields), key) ==
        std::end(detail::kRecordFields))
      throw FormatError(line, "unknown field '" + key + "'");

  CaseRecord c;
  c.id = detail::require_string(j, "id", line);
  c.group = detail::require_string(j, "group", line);
  auto modality = parse_modality(detail::require_string(j, "modality", line));
  if (!modality) throw FormatError(line, "modality must be CT, MR or PET-CT");
  c.modality = *modality;
  c.target = detail::require_string(j, "target", line);
  c.image_ref = detail::require_string(j, "image_ref", line);
  c.mask_ref = detail::require_string(j, "mask_ref", line);

  if (const auto& s = j.at("expert_score"); !s.is_null()) {
    if (!s.is_number_integer()) throw FormatError(line, "expert_score must be an integer or null");
    c.expert_score = s.get<int>();
  }
  if (const auto& g = j.at("gt_label"); !g.is_null()) {
    auto label = g.is_string() ? parse_quality_label(g.get<std::string>()) : std::nullopt;
    if (!label) throw FormatError(line, "gt_label must be \"accept\", \"reject\" or null");
    c.gt_label = label;
  }
  if (const auto& s = j.at("split"); !s.is_null()) {
    auto split = s.is_string() ? parse_split(s.get<std::string>()) : std::nullopt;
    if (!split) throw FormatError(line, "split must be \"train\", \"test\" or null");
    c.split = split;
  }
  validate_record(c, line);
  return c;
}

inline Manifest read_manifest(std::istream& in) {
  Manifest m;
  std::set<std::string> seen;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw FormatError(line, "not a valid record object");
    CaseRecord c = record_from_json(j, line);
    if (!seen.insert(c.id).second) throw DuplicateId(c.id);
    m.cases.push_back(std::move(c));
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  return read_manifest(in);
}

inline std::string manifest_to_string(const Manifest& m) {
  std::string out;
  for (const auto& c : m.cases) {
    out += to_json(c).dump();
    out += '\n';
  }
  return out;
}

inline void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + path.string());
  out << manifest_to_string(m);
  if (!out) throw IoError("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Splitting and summaries
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 14695981039346656037ull) {
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

// Fisher-Yates with an explicit index draw.
template <class T>
void deterministic_shuffle(std::vector<T>& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

} // namespace detail

/// Assigns train/test to every case. The global train count is
/// floor(N * train_ratio); it is apportioned across groups by largest
/// remainder (ties broken by group name), then each group's members are
/// shuffled with a seed-derived permutation and the first quota go to train.
inline Manifest split_dataset(const Manifest& manifest, double train_ratio, std::uint64_t seed) {
  if (!(train_ratio > 0.0 && train_ratio < 1.0))
    throw RangeError("train_ratio must lie strictly between 0 and 1");
  if (manifest.cases.empty()) throw EmptyManifest("cannot split an empty manifest");

  const std::size_t n = manifest.cases.size();
  const auto train_total = static_cast<std::size_t>(std::floor(static_cast<double>(n) * train_ratio + 1e-9));

  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < n; ++i) members[manifest.cases[i].group].push_back(i);

  struct Quota {
    std::string group;
    std::size_t base;
    double remainder;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [group, idx] : members) {
    double exact = static_cast<double>(idx.size()) * train_ratio;
    auto base = static_cast<std::size_t>(std::floor(exact + 1e-9));
    quotas.push_back({group, base, exact - static_cast<double>(base)});
    assigned += base;
  }
  std::vector<std::size_t> order(quotas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
  for (std::size_t k = 0; assigned < train_total && k < order.size(); ++k, ++assigned) ++quotas[order[k]].base;

  Manifest out = manifest;
  for (const auto& q : quotas) {
    auto idx = members[q.group];
    detail::deterministic_shuffle(idx, seed ^ detail::fnv1a64(q.group));
    for (std::size_t k = 0; k < idx.size(); ++k)
      out.cases[idx[k]].split = k < q.base ? Split::Train : Split::Test;
  }
  return out;
}

struct GroupRow {
  std::string group;
  Modality modality;
  std::string target;
  std::size_t count;

  bool operator==(const GroupRow&) const = default;
};

struct GroupSummary {
  std::vector<GroupRow> rows;  // alphabetical by group
  std::size_t total = 0;
};

inline GroupSummary summarize_groups(const Manifest& m) {
  std::map<std::string, GroupRow> rows;
  for (const auto& c : m.cases) {
    auto [it, inserted] = rows.try_emplace(c.group, GroupRow{c.group, c.modality, c.target, 0});
    ++it->second.count;
  }
  GroupSummary s;
  for (auto& [_, row] : rows) s.rows.push_back(row);
  s.total = m.cases.size();
  return s;
}

/// Reference dataset composition: six site/modality groups, 479 cases.
struct ReferenceGroup {
  std::string_view group;
  Modality modality;
  std::string_view target;
  std::size_t count;
};

inline constexpr ReferenceGroup kReferenceGroups[] = {
    {"brain-mr", Modality::MR, "Brain Lesion", 48},   {"breast-mr", Modality::MR, "Breast Lesion", 90},
    {"liver-ct", Modality::CT, "Liver", 53},          {"lung-ct", Modality::CT, "Lung Nodule", 172},
    {"lung-fdg-pet-ct", Modality::PET_CT, "Lung Tumor", 35}, {"prostate-mr", Modality::MR, "Prostate", 81},
};

/// A manifest with the reference group composition and placeholder asset
/// paths. Used as a shape fixture: it has no images and no labels.
inline Manifest reference_manifest() {
  Manifest m;
  for (const auto& g : kReferenceGroups) {
    for (std::size_t i = 0; i < g.count; ++i) {
      char suffix[8];
      std::snprintf(suffix, sizeof suffix, "%03zu", i);
      std::string id = std::string(g.group) + "-" + suffix;
      m.cases.push_back(CaseRecord{id, std::string(g.group), g.modality, std::string(g.target),
                                   "images/" + id + ".png", "masks/" + id + ".png", std::nullopt,
                                   std::nullopt, std::nullopt});
    }
  }
  return m;
}

} // namespace segqc
