#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "segqc/dataset.hpp"
#include "segqc/eval.hpp"
#include "segqc/guardrail.hpp"
#include "segqc/imaging.hpp"
#include "segqc/judge.hpp"

namespace segqc {

struct LabelEvent {
  std::string case_id;
  QualityLabel label = QualityLabel::Reject;
  std::string reviewer;
  std::optional<std::string> note;
  std::int64_t timestamp_us = 0;  // server-assigned, strictly increasing

  bool operator==(const LabelEvent&) const = default;
};

inline std::string format_utc_us(std::int64_t us) {
  const std::time_t secs = static_cast<std::time_t>(us / 1000000);
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[96];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%06dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(us % 1000000));
  return buf;
}

inline nlohmann::ordered_json to_json(const LabelEvent& e) {
  return {{"case_id", e.case_id},
          {"label", std::string(to_string(e.label))},
          {"reviewer", e.reviewer},
          {"note", e.note ? nlohmann::ordered_json(*e.note) : nullptr},
          {"timestamp", format_utc_us(e.timestamp_us)},
          {"timestamp_us", e.timestamp_us}};
}

/// Append-only label history persisted as one JSON line per event and
/// replayed on construction.
class LabelLog {
public:
  explicit LabelLog(std::filesystem::path path) : path_(std::move(path)) { replay(); }

  const std::vector<LabelEvent>& events() const { return events_; }
  const std::filesystem::path& path() const { return path_; }

  /// Durably appends (write + fsync) before the event becomes visible.
  LabelEvent append(LabelEvent e) {
    const auto now = std::chrono::duration_cast<std::chrono::microseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    e.timestamp_us = std::max<std::int64_t>(now, last_us_ + 1);
    const std::string line = to_json(e).dump() + "\n";

    if (path_.has_parent_path()) {
      std::error_code ec;
      std::filesystem::create_directories(path_.parent_path(), ec);
    }
    const int fd = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT, 0644);
    if (fd < 0) throw StorageError("cannot open label log " + path_.string());
    std::size_t written = 0;
    while (written < line.size()) {
      const auto n = ::write(fd, line.data() + written, line.size() - written);
      if (n <= 0) {
        ::close(fd);
        throw StorageError("write to label log failed");
      }
      written += static_cast<std::size_t>(n);
    }
    const bool synced = ::fsync(fd) == 0;
    ::close(fd);
    if (!synced) throw StorageError("fsync of label log failed");

    last_us_ = e.timestamp_us;
    events_.push_back(e);
    return e;
  }

private:
  void replay() {
    std::ifstream in(path_);
    if (!in) return;
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);)
      if (!detail::trim(line).empty()) lines.push_back(line);
    for (std::size_t i = 0; i < lines.size(); ++i) {
      auto j = nlohmann::json::parse(lines[i], nullptr, false);
      if (j.is_discarded()) {
        if (i + 1 == lines.size()) break;  // torn tail from an interrupted append
        throw FormatError(i + 1, "corrupt label log " + path_.string());
      }
      LabelEvent e;
      e.case_id = j.at("case_id").get<std::string>();
      auto label = parse_quality_label(j.at("label").get<std::string>());
      if (!label) throw FormatError(i + 1, "bad label in label log");
      e.label = *label;
      e.reviewer = j.at("reviewer").get<std::string>();
      if (j.contains("note") && j["note"].is_string()) e.note = j["note"].get<std::string>();
      e.timestamp_us = j.at("timestamp_us").get<std::int64_t>();
      last_us_ = std::max(last_us_, e.timestamp_us);
      events_.push_back(std::move(e));
    }
  }

  std::filesystem::path path_;
  std::vector<LabelEvent> events_;
  std::int64_t last_us_ = 0;
};

struct CaseFilter {
  std::optional<std::string> group;
  std::optional<QualityLabel> decision;
  std::optional<bool> labeled;
};

struct PageRequest {
  std::size_t offset = 0;
  std::size_t limit = 50;
};

struct CaseBundle {
  CaseRecord record;
  std::string overlay_ref;
  std::optional<JudgeTranscript> transcript;
  std::optional<Decision> decision;
  std::optional<QualityLabel> effective_label;
  std::size_t label_events = 0;
};

struct CasePage {
  std::vector<CaseBundle> items;
  std::size_t total = 0;
};

inline nlohmann::ordered_json to_json(const CaseBundle& b, bool with_transcript = true) {
  nlohmann::ordered_json j;
  j["case"] = to_json(b.record);
  j["overlay_ref"] = b.overlay_ref;
  if (with_transcript) j["transcript"] = b.transcript ? to_json(*b.transcript) : nlohmann::ordered_json(nullptr);
  j["decision"] = b.decision ? to_json(*b.decision) : nlohmann::ordered_json(nullptr);
  j["effective_label"] =
      b.effective_label ? nlohmann::ordered_json(std::string(to_string(*b.effective_label))) : nullptr;
  j["label_events"] = b.label_events;
  return j;
}

/// State behind the review API: manifest, judged transcripts, and the label log.
/// The effective label of a case is its latest label event, falling back to
/// the manifest's expert label.
class ReviewService {
public:
  ReviewService(Manifest manifest, std::filesystem::path asset_root, std::vector<JudgeTranscript> transcripts,
                const std::filesystem::path& label_log_path, OverlayStyle style = {})
      : manifest_(std::move(manifest)), asset_root_(std::move(asset_root)), log_(label_log_path), style_(style) {
    for (std::size_t i = 0; i < manifest_.cases.size(); ++i) {
      index_[manifest_.cases[i].id] = i;
      groups_.insert(manifest_.cases[i].group);
    }
    // Latest transcript per (case, sample) wins.
    std::map<std::string, std::map<int, JudgeTranscript>> by_case;
    for (auto& t : transcripts)
      if (index_.count(t.case_id)) by_case[t.case_id][t.sample] = std::move(t);
    for (auto& [id, samples] : by_case)
      for (auto& [_, t] : samples) transcripts_[id].push_back(std::move(t));
    for (const auto& e : log_.events()) apply(e);
  }

  std::size_t case_count() const { return manifest_.cases.size(); }

  CasePage list_cases(const CaseFilter& filter, const PageRequest& page) const {
    if (page.limit < 1 || page.limit > 500) throw BadFilter("limit must be within 1..500");
    if (filter.group && !groups_.count(*filter.group)) throw BadFilter("unknown group '" + *filter.group + "'");
    std::shared_lock lock(mutex_);
    CasePage out;
    for (const auto& c : manifest_.cases) {
      if (filter.group && c.group != *filter.group) continue;
      auto bundle = bundle_locked(c, false);
      if (filter.decision && (!bundle.decision || bundle.decision->label != *filter.decision)) continue;
      if (filter.labeled && bundle.effective_label.has_value() != *filter.labeled) continue;
      if (out.total >= page.offset && out.items.size() < page.limit) out.items.push_back(std::move(bundle));
      ++out.total;
    }
    return out;
  }

  CaseBundle get_case_bundle(const std::string& case_id) const {
    std::shared_lock lock(mutex_);
    return bundle_locked(record(case_id), true);
  }

  LabelEvent post_label(const std::string& case_id, const std::string& label, const std::string& reviewer,
                        std::optional<std::string> note = std::nullopt) {
    record(case_id);
    auto parsed = parse_quality_label(label);
    if (!parsed) throw BadLabel("label must be \"accept\" or \"reject\"");
    if (detail::trim(reviewer).empty()) throw BadReviewer("reviewer must be non-empty");
    std::unique_lock lock(mutex_);
    auto stored = log_.append(LabelEvent{case_id, *parsed, reviewer, std::move(note), 0});
    apply(stored);
    return stored;
  }

  std::vector<LabelEvent> label_history(const std::string& case_id) const {
    record(case_id);
    std::shared_lock lock(mutex_);
    std::vector<LabelEvent> out;
    for (const auto& e : log_.events())
      if (e.case_id == case_id) out.push_back(e);
    return out;
  }

  Bytes overlay_png(const std::string& case_id) const {
    const auto& c = record(case_id);
    {
      std::lock_guard lock(overlay_mutex_);
      if (auto it = overlays_.find(case_id); it != overlays_.end()) return it->second;
    }
    auto png = render_overlay(load_raster(asset_root_ / c.image_ref), load_mask(asset_root_ / c.mask_ref), style_);
    std::lock_guard lock(overlay_mutex_);
    return overlays_.emplace(case_id, std::move(png)).first->second;
  }

  /// Decisions and effective labels for every case that has both.
  std::pair<DecisionList, LabelList> scored_cases() const {
    std::shared_lock lock(mutex_);
    DecisionList decisions;
    LabelList labels;
    for (const auto& c : manifest_.cases) {
      auto d = decision_locked(c.id);
      auto l = effective_locked(c);
      if (!d || !l) continue;
      decisions.emplace_back(c.id, *d);
      labels.emplace_back(c.id, *l);
    }
    return {decisions, labels};
  }

  MetricsReport metrics(QualityLabel positive_class) const {
    auto [decisions, labels] = scored_cases();
    return per_group_breakdown(decisions, labels, manifest_, positive_class);
  }

private:
  const CaseRecord& record(const std::string& case_id) const {
    auto it = index_.find(case_id);
    if (it == index_.end()) throw UnknownCase("unknown case '" + case_id + "'");
    return manifest_.cases[it->second];
  }

  void apply(const LabelEvent& e) {
    if (!index_.count(e.case_id)) return;
    effective_[e.case_id] = e.label;
    ++event_counts_[e.case_id];
  }

  std::optional<Decision> decision_locked(const std::string& id) const {
    auto it = transcripts_.find(id);
    if (it == transcripts_.end() || it->second.empty()) return std::nullopt;
    std::vector<const JudgeTranscript*> samples;
    for (const auto& t : it->second) samples.push_back(&t);
    return decide_case(samples);
  }

  std::optional<QualityLabel> effective_locked(const CaseRecord& c) const {
    if (auto it = effective_.find(c.id); it != effective_.end()) return it->second;
    return c.gt_label;
  }

  CaseBundle bundle_locked(const CaseRecord& c, bool with_transcript) const {
    CaseBundle b;
    b.record = c;
    b.overlay_ref = "/api/cases/" + c.id + "/overlay.png";
    if (with_transcript)
      if (auto it = transcripts_.find(c.id); it != transcripts_.end() && !it->second.empty())
        b.transcript = it->second.front();
    b.decision = decision_locked(c.id);
    b.effective_label = effective_locked(c);
    if (auto it = event_counts_.find(c.id); it != event_counts_.end()) b.label_events = it->second;
    return b;
  }

  Manifest manifest_;
  std::filesystem::path asset_root_;
  LabelLog log_;
  OverlayStyle style_;
  std::map<std::string, std::size_t> index_;
  std::set<std::string> groups_;
  std::map<std::string, std::vector<JudgeTranscript>> transcripts_;
  std::map<std::string, QualityLabel> effective_;
  std::map<std::string, std::size_t> event_counts_;
  mutable std::shared_mutex mutex_;
  mutable std::mutex overlay_mutex_;
  mutable std::map<std::string, Bytes> overlays_;
};

// ---------------------------------------------------------------------------
// HTTP binding
// ---------------------------------------------------------------------------

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::ordered_json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline int status_for(const Error& e) {
  const auto& k = e.kind();
  if (k == "UnknownCase") return 404;
  if (k == "StorageError") return 503;
  if (k == "BadFilter" || k == "BadLabel" || k == "BadReviewer" || k == "RangeError") return 400;
  return 500;
}

template <class Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    send_json(res, status_for(e), {{"error", e.kind()}, {"detail", e.what()}});
  } catch (const std::exception& e) {
    send_json(res, 500, {{"error", "InternalError"}, {"detail", e.what()}});
  }
}

inline std::size_t parse_count(const std::string& s, const char* name) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size() || v < 0) throw std::invalid_argument(name);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw BadFilter(std::string("invalid ") + name);
  }
}

inline constexpr const char* kPlaceholderPage =
    "<!doctype html><html><head><title>segqc review</title></head><body>"
    "<h1>segqc review service</h1><p>The review UI assets are not installed. The JSON API is available under "
    "<code>/api/cases</code>.</p></body></html>";

} // namespace detail

/// Registers the review API on `server`. Static UI assets are mounted at `/`
/// when `static_dir` exists; otherwise `/` serves a placeholder page.
inline void register_review_routes(httplib::Server& server, ReviewService& service,
                                   const std::optional<std::filesystem::path>& static_dir = std::nullopt) {
  using detail::guarded;
  using detail::send_json;

  server.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok", "text/plain"); });

  server.Get("/api/cases", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      CaseFilter filter;
      PageRequest page;
      if (req.has_param("group") && !req.get_param_value("group").empty()) filter.group = req.get_param_value("group");
      if (req.has_param("decision") && !req.get_param_value("decision").empty()) {
        auto d = parse_quality_label(req.get_param_value("decision"));
        if (!d) throw BadFilter("decision must be accept or reject");
        filter.decision = d;
      }
      if (req.has_param("labeled") && !req.get_param_value("labeled").empty()) {
        const auto v = req.get_param_value("labeled");
        if (v != "true" && v != "false") throw BadFilter("labeled must be true or false");
        filter.labeled = v == "true";
      }
      if (req.has_param("offset")) page.offset = detail::parse_count(req.get_param_value("offset"), "offset");
      if (req.has_param("limit")) page.limit = detail::parse_count(req.get_param_value("limit"), "limit");
      auto result = service.list_cases(filter, page);
      auto items = nlohmann::ordered_json::array();
      for (const auto& b : result.items) items.push_back(to_json(b, false));
      send_json(res, 200, {{"total", result.total}, {"offset", page.offset}, {"limit", page.limit}, {"items", items}});
    });
  });

  server.Get(R"(/api/cases/([^/]+))", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto id = req.matches[1].str();
      auto body = to_json(service.get_case_bundle(id));
      auto history = nlohmann::ordered_json::array();
      for (const auto& e : service.label_history(id)) history.push_back(to_json(e));
      body["label_history"] = history;
      send_json(res, 200, body);
    });
  });

  server.Get(R"(/api/cases/([^/]+)/overlay\.png)", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      auto png = service.overlay_png(req.matches[1].str());
      res.set_content(std::string(png.begin(), png.end()), "image/png");
    });
  });

  server.Post(R"(/api/cases/([^/]+)/label)", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      auto body = nlohmann::json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.is_object()) throw BadLabel("request body must be a JSON object");
      const auto label = body.contains("label") && body["label"].is_string() ? body["label"].get<std::string>() : "";
      const auto reviewer =
          body.contains("reviewer") && body["reviewer"].is_string() ? body["reviewer"].get<std::string>() : "";
      std::optional<std::string> note;
      if (body.contains("note") && body["note"].is_string()) note = body["note"].get<std::string>();
      auto stored = service.post_label(req.matches[1].str(), label, reviewer, note);
      send_json(res, 201, to_json(stored));
    });
  });

  server.Get("/api/metrics", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      auto positive = QualityLabel::Accept;
      if (req.has_param("positive_class")) {
        auto p = parse_quality_label(req.get_param_value("positive_class"));
        if (!p) throw BadFilter("positive_class must be accept or reject");
        positive = *p;
      }
      auto rendered = render_report(service.metrics(positive));
      res.status = 200;
      res.set_content(rendered.json, "application/json");
    });
  });

  if (static_dir && std::filesystem::is_directory(*static_dir)) {
    server.set_mount_point("/", static_dir->string());
  } else {
    server.Get("/", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(detail::kPlaceholderPage, "text/html");
    });
  }
}

} // namespace segqc
