#include <gtest/gtest.h>

#include <chrono>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "segqc/eval.hpp"

using namespace segqc;

namespace {

Decision labeled(QualityLabel l) {
  Decision d;
  d.label = l;
  d.score = l == QualityLabel::Accept ? 5 : 2;
  return d;
}

/// Builds decisions and truth that reproduce a given matrix with accept as positive.
std::pair<DecisionList, LabelList> realize(const ConfusionMatrix& cm) {
  DecisionList d;
  LabelList g;
  int id = 0;
  auto add = [&](long count, QualityLabel pred, QualityLabel truth) {
    for (long i = 0; i < count; ++i) {
      const auto name = "c" + std::to_string(id++);
      d.push_back({name, labeled(pred)});
      g.push_back({name, truth});
    }
  };
  const auto A = QualityLabel::Accept, R = QualityLabel::Reject;
  add(cm.tp, A, A);
  add(cm.fp, A, R);
  add(cm.fn, R, A);
  add(cm.tn, R, R);
  return {d, g};
}

double round4(double v) { return std::round(v * 1e4) / 1e4; }

ReportedRow rounded_row(const ConfusionMatrix& cm) {
  auto m = metrics_from(cm);
  return {"row", round4(m.accuracy), round4(m.precision), round4(m.recall), round4(m.f1), cm.n()};
}

bool contains(const std::vector<ConfusionMatrix>& v, const ConfusionMatrix& cm) {
  return std::any_of(v.begin(), v.end(), [&](const auto& m) { return m.same_counts(cm); });
}

std::vector<ReportedRow> table_rows() {
  std::vector<ReportedRow> rows;
  std::ifstream in(std::string(SEGQC_DATA_DIR) + "/published_rows.jsonl");
  std::string line;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    rows.push_back({j["name"], j["acc"], j["prec"], j["rec"], j["f1"], j["n"]});
  }
  return rows;
}

} // namespace

TEST(Metrics, ResNetMatrix) {
  auto m = metrics_from({26, 13, 13, 44});
  EXPECT_EQ(fixed4(m.accuracy), "0.7292");
  EXPECT_EQ(fixed4(m.precision), "0.6667");
  EXPECT_EQ(fixed4(m.recall), "0.6667");
  EXPECT_EQ(fixed4(m.f1), "0.6667");
}

TEST(Metrics, EfficientNetMatrix) {
  auto m = metrics_from({35, 23, 4, 34});
  EXPECT_EQ(fixed4(m.accuracy), "0.7188");
  EXPECT_EQ(fixed4(m.precision), "0.6034");
  EXPECT_EQ(fixed4(m.recall), "0.8974");
  EXPECT_EQ(fixed4(m.f1), "0.7216");
  EXPECT_NEAR(m.f1, 70.0 / 97.0, 1e-15);
}

TEST(Metrics, ComputeFromDecisions) {
  auto [d, g] = realize({26, 13, 13, 44});
  auto [cm, report] = compute_metrics(d, g, QualityLabel::Accept);
  EXPECT_TRUE(cm.same_counts({26, 13, 13, 44}));
  EXPECT_EQ(report.n, 96u);
  EXPECT_NEAR(report.overall.accuracy, 70.0 / 96.0, 1e-15);
  EXPECT_TRUE(report.zero_division.empty());
}

TEST(Metrics, PerfectPredictions) {
  auto [d, g] = realize({3, 0, 0, 5});
  auto [cm, r] = compute_metrics(d, g, QualityLabel::Accept);
  EXPECT_EQ(r.overall.accuracy, 1.0);
  EXPECT_EQ(r.overall.precision, 1.0);
  EXPECT_EQ(r.overall.recall, 1.0);
  EXPECT_EQ(r.overall.f1, 1.0);
}

TEST(Metrics, NoPredictedPositivesFlagsPrecision) {
  auto [d, g] = realize({0, 0, 4, 6});
  auto [cm, r] = compute_metrics(d, g, QualityLabel::Accept);
  EXPECT_EQ(r.overall.precision, 0.0);
  EXPECT_TRUE(r.zero_division.count(ZeroDivision::Precision));
  EXPECT_FALSE(r.zero_division.count(ZeroDivision::Recall));
}

TEST(Metrics, IdMismatch) {
  auto [d, g] = realize({1, 1, 1, 1});
  auto fewer = g;
  fewer.pop_back();
  EXPECT_THROW(compute_metrics(d, fewer, QualityLabel::Accept), IdMismatch);
  auto renamed = g;
  renamed[0].first = "other";
  EXPECT_THROW(compute_metrics(d, renamed, QualityLabel::Accept), IdMismatch);
}

TEST(Metrics, SwappingPositiveClass) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    ConfusionMatrix cm{long(rng() % 20), long(rng() % 20), long(rng() % 20), long(1 + rng() % 20)};
    auto [d, g] = realize(cm);
    auto [acc_cm, acc_r] = compute_metrics(d, g, QualityLabel::Accept);
    auto [rej_cm, rej_r] = compute_metrics(d, g, QualityLabel::Reject);
    EXPECT_TRUE(rej_cm.same_counts(acc_cm.swapped()));
    EXPECT_EQ(rej_r.overall.accuracy, acc_r.overall.accuracy);
    EXPECT_EQ(rej_cm.positive_class, QualityLabel::Reject);
  }
}

TEST(Metrics, FailClosedCounted) {
  auto [d, g] = realize({1, 0, 0, 2});
  d[2].second.flags = {DecisionFlag::InvalidOutput, DecisionFlag::FailClosed};
  EXPECT_EQ(compute_metrics(d, g, QualityLabel::Accept).second.fail_closed, 1u);
}

TEST(Groups, TwoGroupsSumToN) {
  auto [d, g] = realize({5, 3, 2, 6});
  Manifest m;
  for (std::size_t i = 0; i < d.size(); ++i)
    m.cases.push_back({d[i].first, i % 2 ? "phantom-mr" : "phantom-ct", Modality::CT, "Liver", "i", "m",
                       std::nullopt, std::nullopt, std::nullopt});
  auto r = per_group_breakdown(d, g, m, QualityLabel::Accept);
  ASSERT_EQ(r.per_group.size(), 2u);
  std::size_t total = 0;
  ConfusionMatrix sum;
  for (const auto& [_, row] : r.per_group) {
    total += row.count;
    sum.tp += row.matrix.tp;
    sum.fp += row.matrix.fp;
    sum.fn += row.matrix.fn;
    sum.tn += row.matrix.tn;
  }
  EXPECT_EQ(total, r.n);
  EXPECT_TRUE(sum.same_counts(r.matrix));
}

TEST(Groups, SingleGroupEqualsOverall) {
  auto [d, g] = realize({4, 2, 1, 3});
  Manifest m;
  for (const auto& [id, _] : d)
    m.cases.push_back({id, "only", Modality::MR, "Prostate", "i", "m", std::nullopt, std::nullopt, std::nullopt});
  auto r = per_group_breakdown(d, g, m, QualityLabel::Accept);
  const auto& row = r.per_group.at("only");
  EXPECT_EQ(row.metrics.accuracy, r.overall.accuracy);
  EXPECT_EQ(row.metrics.precision, r.overall.precision);
  EXPECT_EQ(row.metrics.recall, r.overall.recall);
  EXPECT_EQ(row.metrics.f1, r.overall.f1);
  EXPECT_EQ(row.count, r.n);
}

TEST(Groups, AllRejectGroupFlagsRecall) {
  auto [d, g] = realize({2, 0, 0, 3});
  Manifest m;
  for (std::size_t i = 0; i < d.size(); ++i)
    m.cases.push_back({d[i].first, i < 2 ? "a" : "b", Modality::CT, "Liver", "i", "m", std::nullopt, std::nullopt,
                       std::nullopt});
  auto r = per_group_breakdown(d, g, m, QualityLabel::Accept);
  EXPECT_TRUE(r.per_group.at("b").zero_division.count(ZeroDivision::Recall));
  EXPECT_TRUE(r.per_group.at("a").zero_division.empty());
}

TEST(Groups, UnknownCase) {
  auto [d, g] = realize({1, 0, 0, 1});
  Manifest m{1, {{d[0].first, "a", Modality::CT, "Liver", "i", "m", std::nullopt, std::nullopt, std::nullopt}}};
  EXPECT_THROW(per_group_breakdown(d, g, m, QualityLabel::Accept), UnknownCase);
}

TEST(Audit, ResNetUnique) {
  auto a = audit_reported_row({"ResNet50", 0.7292, 0.6667, 0.6667, 0.6667, 96});
  ASSERT_EQ(a.matches.size(), 1u);
  EXPECT_TRUE(a.matches[0].same_counts({26, 13, 13, 44}));
  EXPECT_TRUE(a.consistent);
}

TEST(Audit, EfficientNet) {
  auto a = audit_reported_row({"EfficientNet-B0", 0.7188, 0.6034, 0.8974, 0.7216, 96});
  EXPECT_TRUE(a.consistent);
  EXPECT_TRUE(contains(a.matches, {35, 23, 4, 34}));
}

TEST(Audit, PublishedRowsAgainstNaiveEnumeration) {
  // Ground truth for every published row comes from the plain triple loop.
  for (const auto& row : table_rows()) {
    auto fast = audit_reported_row(row);
    auto slow = oracle::audit(row, 1e-4);
    ASSERT_EQ(fast.matches.size(), slow.matches.size()) << row.name;
    for (const auto& m : slow.matches) EXPECT_TRUE(contains(fast.matches, m)) << row.name;
    EXPECT_EQ(fast.consistent, !slow.matches.empty()) << row.name;
    EXPECT_NEAR(fast.best_residual, slow.best_residual, 1e-15) << row.name;
  }
}

TEST(Audit, GeminiRowHasIntegerMatrix) {
  auto a = audit_reported_row({"Gemini-2.5-Flash", 0.7812, 0.7937, 0.8621, 0.8264, 96});
  EXPECT_TRUE(a.consistent);
  EXPECT_TRUE(contains(a.matches, {50, 13, 8, 25}));
  EXPECT_LT(a.best_residual, 1e-4);
}

TEST(Audit, QwenRowHasIntegerMatrix) {
  auto a = audit_reported_row({"Qwen2.5-VL-32B-Instruct", 0.6875, 0.7188, 0.7931, 0.7541, 96});
  EXPECT_TRUE(a.consistent);
  EXPECT_TRUE(contains(a.matches, {46, 18, 12, 20}));
}

TEST(Audit, InconsistentRowReportsBestFit) {
  auto a = audit_reported_row({"impossible", 0.9, 0.1, 0.9, 0.5, 20});
  EXPECT_FALSE(a.consistent);
  EXPECT_GT(a.best_residual, 1e-4);
  EXPECT_NEAR(a.best_residual, audit_residual(a.best_fit, a.input), 0.0);
  auto slow = oracle::audit(a.input, 1e-4);
  EXPECT_NEAR(a.best_residual, slow.best_residual, 1e-15);
}

TEST(Audit, PerfectRow) {
  auto a = audit_reported_row({"perfect", 1.0, 1.0, 1.0, 1.0, 4});
  ASSERT_EQ(a.matches.size(), 4u);
  for (const auto& m : a.matches) {
    EXPECT_EQ(m.fp, 0);
    EXPECT_EQ(m.fn, 0);
    EXPECT_GE(m.tp, 1);
  }
}

TEST(Audit, Bounds) {
  EXPECT_THROW(audit_reported_row({"big", 0.5, 0.5, 0.5, 0.5, kAuditMaxN + 1}), BoundExceeded);
  EXPECT_THROW(audit_reported_row({"zero", 0.5, 0.5, 0.5, 0.5, 0}), RangeError);
}

TEST(Audit, MatchesNaiveOracleOnRandomRows) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 60; ++trial) {
    const long n = 1 + static_cast<long>(rng() % 50);
    ReportedRow row;
    if (trial % 3 == 0) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      row = {"random", round4(u(rng)), round4(u(rng)), round4(u(rng)), round4(u(rng)), n};
    } else {
      long left = n;
      ConfusionMatrix cm;
      cm.tp = static_cast<long>(rng() % (left + 1));
      left -= cm.tp;
      cm.fp = static_cast<long>(rng() % (left + 1));
      left -= cm.fp;
      cm.fn = static_cast<long>(rng() % (left + 1));
      cm.tn = left - cm.fn;
      row = rounded_row(cm);
    }
    auto fast = audit_reported_row(row);
    auto slow = oracle::audit(row, 1e-4);
    ASSERT_EQ(fast.matches.size(), slow.matches.size()) << "trial " << trial;
    for (const auto& m : slow.matches) EXPECT_TRUE(contains(fast.matches, m));
    EXPECT_NEAR(fast.best_residual, slow.best_residual, 1e-15) << "trial " << trial;
  }
}

TEST(Audit, RoundTripRecoversMatrix) {
  std::mt19937_64 rng(33);
  int unique = 0, trials = 0;
  for (; trials < 200; ++trials) {
    const long n = 20 + static_cast<long>(rng() % 181);
    long left = n;
    ConfusionMatrix cm;
    cm.tp = 1 + static_cast<long>(rng() % (left / 2));
    left -= cm.tp;
    cm.fp = static_cast<long>(rng() % (left + 1));
    left -= cm.fp;
    cm.fn = static_cast<long>(rng() % (left + 1));
    cm.tn = left - cm.fn;
    auto a = audit_reported_row(rounded_row(cm));
    ASSERT_TRUE(a.consistent);
    EXPECT_TRUE(contains(a.matches, cm));
    for (const auto& m : a.matches) EXPECT_LE(audit_residual(m, a.input), 1e-4);
    unique += a.matches.size() == 1;
  }
  EXPECT_GE(unique, trials * 95 / 100);
}

TEST(Audit, FullBoundRunsQuickly) {
  const auto start = std::chrono::steady_clock::now();
  audit_reported_row({"large", 0.75, 0.7, 0.8, 0.7467, 1000});
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 10.0);
}

TEST(Render, RoundingHalfAwayFromZero) {
  EXPECT_EQ(fixed4(0.71875), "0.7188");
  EXPECT_EQ(fixed4(0.78125), "0.7813");
  EXPECT_EQ(fixed4(2.0 / 3.0), "0.6667");
  EXPECT_EQ(fixed4(0.0), "0.0000");
  EXPECT_EQ(fixed4(1.0), "1.0000");
}

TEST(Render, TableRowsAndDeterminism) {
  auto [d, g] = realize({5, 3, 2, 6});
  Manifest m;
  for (std::size_t i = 0; i < d.size(); ++i)
    m.cases.push_back({d[i].first, i % 2 ? "zeta" : "alpha", Modality::CT, "Liver", "i", "m", std::nullopt,
                       std::nullopt, std::nullopt});
  auto r = per_group_breakdown(d, g, m, QualityLabel::Accept);
  auto a = render_report(r);
  auto b = render_report(r);
  EXPECT_EQ(a.json, b.json);
  EXPECT_EQ(a.text, b.text);
  EXPECT_EQ(a.text.find("audit"), std::string::npos);
  EXPECT_FALSE(nlohmann::json::parse(a.json).contains("audits"));
  const auto overall = a.text.find("\noverall"), alpha = a.text.find("\nalpha"), zeta = a.text.find("\nzeta");
  ASSERT_NE(overall, std::string::npos);
  EXPECT_LT(overall, alpha);
  EXPECT_LT(alpha, zeta);

  auto with_audit = render_report(r, {audit_reported_row({"ResNet50", 0.7292, 0.6667, 0.6667, 0.6667, 96})});
  EXPECT_NE(with_audit.text.find("reported-row audit"), std::string::npos);
  EXPECT_EQ(nlohmann::json::parse(with_audit.json)["audits"][0]["matches"].size(), 1u);
}
