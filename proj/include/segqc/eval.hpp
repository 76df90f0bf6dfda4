#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "segqc/dataset.hpp"
#include "segqc/guardrail.hpp"

namespace segqc {

struct ConfusionMatrix {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  QualityLabel positive_class = QualityLabel::Accept;

  long n() const { return tp + fp + fn + tn; }
  bool same_counts(const ConfusionMatrix& o) const { return tp == o.tp && fp == o.fp && fn == o.fn && tn == o.tn; }
  /// The same predictions counted with the other label as positive.
  ConfusionMatrix swapped() const {
    return {tn, fn, fp, tp, positive_class == QualityLabel::Accept ? QualityLabel::Reject : QualityLabel::Accept};
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

struct MetricTuple {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
};

enum class ZeroDivision { Precision, Recall, F1 };

inline std::string_view to_string(ZeroDivision z) {
  switch (z) {
    case ZeroDivision::Precision: return "precision";
    case ZeroDivision::Recall: return "recall";
    case ZeroDivision::F1: return "f1";
  }
  return "?";
}

struct GroupMetrics {
  MetricTuple metrics;
  ConfusionMatrix matrix;
  std::size_t count = 0;
  std::set<ZeroDivision> zero_division;
};

struct MetricsReport {
  MetricTuple overall;
  ConfusionMatrix matrix;
  std::map<std::string, GroupMetrics> per_group;  // ordered: alphabetical
  std::size_t n = 0;
  QualityLabel positive_class = QualityLabel::Accept;
  std::set<ZeroDivision> zero_division;
  std::size_t fail_closed = 0;
};

/// Standard metrics; an undefined ratio is reported as 0 and flagged.
inline MetricTuple metrics_from(const ConfusionMatrix& cm, std::set<ZeroDivision>* flags = nullptr) {
  MetricTuple m;
  const double n = static_cast<double>(cm.n());
  m.accuracy = n > 0 ? static_cast<double>(cm.tp + cm.tn) / n : 0.0;
  if (cm.tp + cm.fp > 0) m.precision = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fp);
  else if (flags) flags->insert(ZeroDivision::Precision);
  if (cm.tp + cm.fn > 0) m.recall = static_cast<double>(cm.tp) / static_cast<double>(cm.tp + cm.fn);
  else if (flags) flags->insert(ZeroDivision::Recall);
  if (m.precision + m.recall > 0) m.f1 = 2 * m.precision * m.recall / (m.precision + m.recall);
  else if (flags) flags->insert(ZeroDivision::F1);
  return m;
}

using DecisionList = std::vector<std::pair<std::string, Decision>>;
using LabelList = std::vector<std::pair<std::string, QualityLabel>>;

namespace detail {

inline void tally(ConfusionMatrix& cm, QualityLabel predicted, QualityLabel truth) {
  const bool pred_pos = predicted == cm.positive_class, true_pos = truth == cm.positive_class;
  if (pred_pos && true_pos) ++cm.tp;
  else if (pred_pos) ++cm.fp;
  else if (true_pos) ++cm.fn;
  else ++cm.tn;
}

inline std::map<std::string, QualityLabel> index_labels(const LabelList& gt) {
  std::map<std::string, QualityLabel> out;
  for (const auto& [id, label] : gt)
    if (!out.emplace(id, label).second) throw IdMismatch("duplicate ground-truth id " + id);
  return out;
}

} // namespace detail

inline std::pair<ConfusionMatrix, MetricsReport> compute_metrics(const DecisionList& decisions, const LabelList& gt,
                                                                 QualityLabel positive_class) {
  const auto truth = detail::index_labels(gt);
  if (decisions.size() != truth.size())
    throw IdMismatch("decision and ground-truth id sets differ in size (" + std::to_string(decisions.size()) +
                     " vs " + std::to_string(truth.size()) + ")");
  ConfusionMatrix cm{0, 0, 0, 0, positive_class};
  MetricsReport r;
  std::set<std::string> seen;
  for (const auto& [id, d] : decisions) {
    auto it = truth.find(id);
    if (it == truth.end()) throw IdMismatch("no ground truth for " + id);
    if (!seen.insert(id).second) throw IdMismatch("duplicate decision id " + id);
    detail::tally(cm, d.label, it->second);
    if (d.fail_closed()) ++r.fail_closed;
  }
  r.matrix = cm;
  r.n = decisions.size();
  r.positive_class = positive_class;
  r.overall = metrics_from(cm, &r.zero_division);
  return {cm, r};
}

inline MetricsReport per_group_breakdown(const DecisionList& decisions, const LabelList& gt, const Manifest& manifest,
                                         QualityLabel positive_class) {
  std::map<std::string, std::string> group_of;
  for (const auto& c : manifest.cases) group_of[c.id] = c.group;
  auto [cm, report] = compute_metrics(decisions, gt, positive_class);
  const auto truth = detail::index_labels(gt);
  for (const auto& [id, d] : decisions) {
    auto g = group_of.find(id);
    if (g == group_of.end()) throw UnknownCase("case " + id + " is not in the manifest");
    auto& row = report.per_group[g->second];
    row.matrix.positive_class = positive_class;
    detail::tally(row.matrix, d.label, truth.at(id));
    ++row.count;
  }
  for (auto& [_, row] : report.per_group) row.metrics = metrics_from(row.matrix, &row.zero_division);
  return report;
}

// ---------------------------------------------------------------------------
// Reported-row auditor
// ---------------------------------------------------------------------------

struct ReportedRow {
  std::string name;
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
  long n = 0;
};

struct AuditResult {
  ReportedRow input;
  double tolerance = 1e-4;
  std::vector<ConfusionMatrix> matches;
  ConfusionMatrix best_fit;
  double best_residual = 0.0;
  bool consistent = false;
};

inline constexpr long kAuditMaxN = 10000;

/// L-infinity distance between a matrix's metrics and a reported tuple.
inline double audit_residual(const ConfusionMatrix& cm, const ReportedRow& row) {
  const auto m = metrics_from(cm);
  return std::max({std::abs(m.accuracy - row.accuracy), std::abs(m.precision - row.precision),
                   std::abs(m.recall - row.recall), std::abs(m.f1 - row.f1)});
}

/// Finds every integer confusion matrix with tp+fp+fn+tn = N whose four
/// metrics all lie within `tolerance` of the reported values, plus the global
/// best fit. For fixed (tp, fp), fn is searched within the accuracy window
/// and by bisection on the quasi-convex residual: O(N^2 log N).
inline AuditResult audit_reported_row(const ReportedRow& row, double tolerance = 1e-4) {
  if (row.n < 1) throw RangeError("N must be positive");
  if (row.n > kAuditMaxN) throw BoundExceeded("N=" + std::to_string(row.n) + " exceeds " + std::to_string(kAuditMaxN));
  const long n = row.n;
  AuditResult result;
  result.input = row;
  result.tolerance = tolerance;
  result.best_residual = std::numeric_limits<double>::infinity();

  for (long tp = 0; tp <= n; ++tp) {
    for (long fp = 0; fp + tp <= n; ++fp) {
      const long fn_max = n - tp - fp;
      auto residual_at = [&](long fn) { return audit_residual({tp, fp, fn, fn_max - fn}, row); };

      // Matches: accuracy = (n - fp - fn)/n must be within tolerance.
      const double fn_center = static_cast<double>(n - fp) - row.accuracy * static_cast<double>(n);
      const double half_width = tolerance * static_cast<double>(n);
      const long lo = std::max(0L, static_cast<long>(std::floor(fn_center - half_width)) - 1);
      const long hi = std::min(fn_max, static_cast<long>(std::ceil(fn_center + half_width)) + 1);
      for (long fn = lo; fn <= hi; ++fn)
        if (residual_at(fn) <= tolerance) result.matches.push_back({tp, fp, fn, fn_max - fn});

      // Best fit: first fn whose residual does not exceed its successor's.
      long left = 0, right = fn_max;
      while (left < right) {
        const long mid = left + (right - left) / 2;
        if (residual_at(mid) <= residual_at(mid + 1)) right = mid;
        else left = mid + 1;
      }
      const double r = residual_at(left);
      if (r < result.best_residual) {
        result.best_residual = r;
        result.best_fit = {tp, fp, left, fn_max - left};
      }
    }
  }
  result.consistent = !result.matches.empty();
  return result;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Half-away-from-zero rounding to 4 decimals, as text.
inline std::string fixed4(double v) {
  const double r = std::round(v * 1e4) / 1e4;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", r == 0.0 ? 0.0 : r);
  return buf;
}

inline nlohmann::ordered_json to_json(const MetricTuple& m) {
  return {{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}};
}

inline nlohmann::ordered_json to_json(const ConfusionMatrix& cm) {
  return {{"tp", cm.tp}, {"fp", cm.fp}, {"fn", cm.fn}, {"tn", cm.tn}};
}

inline nlohmann::ordered_json zero_division_json(const std::set<ZeroDivision>& flags) {
  auto arr = nlohmann::ordered_json::array();
  for (auto f : flags) arr.push_back(std::string(to_string(f)));
  return arr;
}

inline nlohmann::ordered_json to_json(const AuditResult& a) {
  auto matches = nlohmann::ordered_json::array();
  for (const auto& m : a.matches) matches.push_back(to_json(m));
  return {{"name", a.input.name},
          {"reported",
           {{"accuracy", a.input.accuracy},
            {"precision", a.input.precision},
            {"recall", a.input.recall},
            {"f1", a.input.f1},
            {"n", a.input.n}}},
          {"tolerance", a.tolerance},
          {"consistent", a.consistent},
          {"matches", matches},
          {"best_fit", to_json(a.best_fit)},
          {"best_residual", a.best_residual}};
}

struct RenderedReport {
  std::string json;
  std::string text;
};

inline RenderedReport render_report(const MetricsReport& r, const std::vector<AuditResult>& audits = {}) {
  nlohmann::ordered_json doc;
  doc["n"] = r.n;
  doc["positive_class"] = std::string(to_string(r.positive_class));
  doc["overall"] = to_json(r.overall);
  doc["confusion_matrix"] = to_json(r.matrix);
  doc["zero_division"] = zero_division_json(r.zero_division);
  doc["fail_closed"] = r.fail_closed;
  auto groups = nlohmann::ordered_json::object();
  for (const auto& [name, g] : r.per_group) {
    auto gj = to_json(g.metrics);
    gj["count"] = g.count;
    gj["confusion_matrix"] = to_json(g.matrix);
    gj["zero_division"] = zero_division_json(g.zero_division);
    groups[name] = gj;
  }
  doc["per_group"] = groups;
  if (!audits.empty()) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& a : audits) arr.push_back(to_json(a));
    doc["audits"] = arr;
  }

  std::string text;
  char line[256];
  std::snprintf(line, sizeof line, "positive class: %s   n: %zu   fail-closed: %zu\n\n",
                std::string(to_string(r.positive_class)).c_str(), r.n, r.fail_closed);
  text += line;
  std::snprintf(line, sizeof line, "%-20s %6s %9s %10s %8s %8s\n", "group", "n", "accuracy", "precision", "recall",
                "f1");
  text += line;
  auto row = [&](const std::string& name, std::size_t n, const MetricTuple& m, const std::set<ZeroDivision>& z) {
    std::snprintf(line, sizeof line, "%-20s %6zu %9s %10s %8s %8s%s\n", name.c_str(), n, fixed4(m.accuracy).c_str(),
                  fixed4(m.precision).c_str(), fixed4(m.recall).c_str(), fixed4(m.f1).c_str(),
                  z.empty() ? "" : "  (zero division)");
    text += line;
  };
  row("overall", r.n, r.overall, r.zero_division);
  for (const auto& [name, g] : r.per_group) row(name, g.count, g.metrics, g.zero_division);

  if (!audits.empty()) {
    text += "\nreported-row audit\n";
    for (const auto& a : audits) {
      std::snprintf(line, sizeof line, "%-26s N=%-5ld %-12s best fit tp=%ld fp=%ld fn=%ld tn=%ld residual=%.2e%s\n",
                    a.input.name.c_str(), a.input.n, a.consistent ? "consistent" : "INCONSISTENT", a.best_fit.tp,
                    a.best_fit.fp, a.best_fit.fn, a.best_fit.tn, a.best_residual,
                    a.matches.size() > 1 ? ("  (" + std::to_string(a.matches.size()) + " matches)").c_str() : "");
      text += line;
    }
  }
  return {doc.dump(2) + "\n", text};
}

} // namespace segqc
