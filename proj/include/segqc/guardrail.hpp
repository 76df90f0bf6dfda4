#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "segqc/dataset.hpp"
#include "segqc/judge.hpp"

namespace segqc {

enum class DecisionFlag { InvalidOutput, FailClosed, Ensembled };

inline std::string_view to_string(DecisionFlag f) {
  switch (f) {
    case DecisionFlag::InvalidOutput: return "invalid_output";
    case DecisionFlag::FailClosed: return "fail_closed";
    case DecisionFlag::Ensembled: return "ensembled";
  }
  return "?";
}

struct Decision {
  QualityLabel label = QualityLabel::Reject;
  std::optional<int> score;
  std::set<DecisionFlag> flags;
  std::optional<int> ensemble_n;
  std::optional<int> score_spread;

  bool has(DecisionFlag f) const { return flags.count(f) != 0; }
  bool fail_closed() const { return has(DecisionFlag::FailClosed); }
  bool operator==(const Decision&) const = default;
};

/// Score 4-5 accepts; anything that is not a valid assessment rejects.
inline Decision decide(const JudgeOutcome& outcome) {
  Decision d;
  if (const auto* a = std::get_if<HcrAssessment>(&outcome)) {
    d.score = a->clinical_synthesis.score;
    d.label = score_to_label(*d.score);
  } else {
    d.label = QualityLabel::Reject;
    d.flags = {DecisionFlag::InvalidOutput, DecisionFlag::FailClosed};
  }
  return d;
}

/// Combines k >= 2 samples: failed samples are dropped and the lower median of
/// the remaining scores decides. All samples failing rejects fail-closed.
inline Decision ensemble_decide(std::span<const JudgeOutcome> outcomes, std::size_t k) {
  if (k < 2) throw std::invalid_argument("ensemble needs k >= 2");
  if (outcomes.size() != k) throw std::invalid_argument("ensemble expects exactly k outcomes");
  std::vector<int> scores;
  for (const auto& o : outcomes)
    if (const auto* a = std::get_if<HcrAssessment>(&o)) scores.push_back(a->clinical_synthesis.score);

  Decision d;
  d.flags.insert(DecisionFlag::Ensembled);
  d.ensemble_n = static_cast<int>(k);
  if (scores.empty()) {
    d.label = QualityLabel::Reject;
    d.flags.insert(DecisionFlag::InvalidOutput);
    d.flags.insert(DecisionFlag::FailClosed);
    return d;
  }
  std::sort(scores.begin(), scores.end());
  d.score = scores[(scores.size() - 1) / 2];
  d.score_spread = scores.back() - scores.front();
  d.label = score_to_label(*d.score);
  return d;
}

inline nlohmann::ordered_json to_json(const Decision& d) {
  nlohmann::ordered_json flags = nlohmann::ordered_json::array();
  for (auto f : d.flags) flags.push_back(std::string(to_string(f)));
  return {{"label", std::string(to_string(d.label))},
          {"score", d.score ? nlohmann::ordered_json(*d.score) : nullptr},
          {"flags", flags},
          {"ensemble_n", d.ensemble_n ? nlohmann::ordered_json(*d.ensemble_n) : nullptr},
          {"score_spread", d.score_spread ? nlohmann::ordered_json(*d.score_spread) : nullptr}};
}

/// Decision line keyed by case and model, as written next to transcripts.
inline nlohmann::ordered_json decision_record(const std::string& case_id, const std::string& model_id,
                                              const Decision& d) {
  nlohmann::ordered_json j{{"case_id", case_id}, {"model_id", model_id}};
  const auto body = to_json(d);
  for (const auto& [k, v] : body.items()) j[k] = v;
  return j;
}

/// Decides one case from all of its transcripts (one per sample).
inline Decision decide_case(const std::vector<const JudgeTranscript*>& samples) {
  if (samples.empty()) throw std::invalid_argument("no transcripts for case");
  if (samples.size() == 1) return decide(samples.front()->outcome);
  std::vector<JudgeOutcome> outcomes;
  for (const auto* t : samples) outcomes.push_back(t->outcome);
  return ensemble_decide(outcomes, outcomes.size());
}

} // namespace segqc
