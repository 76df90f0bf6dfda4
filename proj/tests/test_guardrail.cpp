#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "segqc/guardrail.hpp"

using namespace segqc;

namespace {

JudgeOutcome scored(int s) {
  return HcrAssessment{"r", {"a", "b", "c"}, {"d", "e", "f"}, {"g", s, default_rubric().category(s)}};
}

JudgeOutcome failed(FailureKind k = FailureKind::ExtractError) { return ParseFailure{k, "x", {}}; }

std::vector<JudgeOutcome> scores(std::initializer_list<int> s) {
  std::vector<JudgeOutcome> out;
  for (int v : s) out.push_back(scored(v));
  return out;
}

} // namespace

TEST(Decide, FollowsLabelRule) {
  EXPECT_EQ(decide(scored(4)).label, QualityLabel::Accept);
  EXPECT_EQ(decide(scored(5)).label, QualityLabel::Accept);
  EXPECT_EQ(decide(scored(3)).label, QualityLabel::Reject);
  EXPECT_EQ(decide(scored(1)).label, QualityLabel::Reject);
  EXPECT_EQ(decide(scored(4)).score, 4);
  EXPECT_TRUE(decide(scored(4)).flags.empty());
}

TEST(Decide, EveryFailureKindFailsClosed) {
  for (auto k : {FailureKind::ExtractError, FailureKind::SchemaError, FailureKind::ScoreOutOfRange,
                 FailureKind::CategoryMismatch, FailureKind::TransportFailure, FailureKind::AssetError}) {
    auto d = decide(failed(k));
    EXPECT_EQ(d.label, QualityLabel::Reject);
    EXPECT_TRUE(d.has(DecisionFlag::InvalidOutput));
    EXPECT_TRUE(d.fail_closed());
    EXPECT_FALSE(d.score.has_value());
  }
}

TEST(Ensemble, MedianOfThree) {
  auto s = scores({5, 4, 2});
  auto d = ensemble_decide(s, 3);
  EXPECT_EQ(d.score, 4);
  EXPECT_EQ(d.label, QualityLabel::Accept);
  EXPECT_EQ(d.score_spread, 3);
  EXPECT_EQ(d.ensemble_n, 3);
  EXPECT_TRUE(d.has(DecisionFlag::Ensembled));
}

TEST(Ensemble, LowerMedianForEvenCount) {
  auto s = scores({4, 3});
  auto d = ensemble_decide(s, 2);
  EXPECT_EQ(d.score, 3);
  EXPECT_EQ(d.label, QualityLabel::Reject);
}

TEST(Ensemble, AllFailedFailsClosed) {
  std::vector<JudgeOutcome> s = {failed(), failed(FailureKind::SchemaError)};
  auto d = ensemble_decide(s, 2);
  EXPECT_EQ(d.label, QualityLabel::Reject);
  EXPECT_TRUE(d.has(DecisionFlag::InvalidOutput));
  EXPECT_TRUE(d.fail_closed());
  EXPECT_TRUE(d.has(DecisionFlag::Ensembled));
}

TEST(Ensemble, FailuresDropped) {
  std::vector<JudgeOutcome> s = {failed(), scored(5), scored(4)};
  auto d = ensemble_decide(s, 3);
  EXPECT_EQ(d.score, 4);
  EXPECT_EQ(d.label, QualityLabel::Accept);
  EXPECT_FALSE(d.fail_closed());
}

TEST(Ensemble, BadArguments) {
  auto one = scores({4});
  EXPECT_THROW(ensemble_decide(one, 1), std::invalid_argument);
  auto two = scores({4, 5});
  EXPECT_THROW(ensemble_decide(two, 3), std::invalid_argument);
}

TEST(Ensemble, PermutationInvariant) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng() % 6;
    std::vector<JudgeOutcome> s;
    for (std::size_t i = 0; i < k; ++i) s.push_back(rng() % 4 == 0 ? failed() : scored(1 + static_cast<int>(rng() % 5)));
    const auto reference = ensemble_decide(s, k);
    for (int p = 0; p < 5; ++p) {
      std::shuffle(s.begin(), s.end(), rng);
      EXPECT_EQ(ensemble_decide(s, k), reference);
    }
  }
}

TEST(Ensemble, UnanimousMatchesSingle) {
  for (int s = 1; s <= 5; ++s)
    for (std::size_t k = 2; k <= 5; ++k) {
      std::vector<JudgeOutcome> v(k, scored(s));
      EXPECT_EQ(ensemble_decide(v, k).label, decide(scored(s)).label);
      EXPECT_EQ(ensemble_decide(v, k).score_spread, 0);
    }
}

TEST(Decision, JsonShape) {
  auto j = decision_record("c1", "m", decide(failed()));
  EXPECT_EQ(j["case_id"], "c1");
  EXPECT_EQ(j["label"], "reject");
  EXPECT_TRUE(j["score"].is_null());
  EXPECT_EQ(j["flags"], nlohmann::json::array({"invalid_output", "fail_closed"}));
}

TEST(Decision, DecideCase) {
  JudgeTranscript a, b;
  a.outcome = scored(5);
  b.outcome = scored(2);
  EXPECT_EQ(decide_case({&a}).label, QualityLabel::Accept);
  auto d = decide_case({&a, &b});
  EXPECT_EQ(d.score, 2);
  EXPECT_TRUE(d.has(DecisionFlag::Ensembled));
  EXPECT_THROW(decide_case({}), std::invalid_argument);
}
