#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "segqc/config.hpp"
#include "segqc/dataset.hpp"
#include "segqc/eval.hpp"
#include "segqc/guardrail.hpp"
#include "segqc/judge.hpp"
#include "segqc/phantom.hpp"
#include "segqc/service.hpp"

namespace segqc::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kGuardrailTripped = 3 };

/// Reads a rows file: one {"name","acc","prec","rec","f1","n"} object per line.
inline std::vector<ReportedRow> load_rows(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open rows file " + path.string());
  std::vector<ReportedRow> rows;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (detail::trim(text).empty()) continue;
    auto j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw FormatError(line, "row is not a JSON object");
    try {
      rows.push_back({j.at("name").get<std::string>(), j.at("acc").get<double>(), j.at("prec").get<double>(),
                      j.at("rec").get<double>(), j.at("f1").get<double>(), j.at("n").get<long>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(line, e.what());
    }
  }
  return rows;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::vector<CaseRecord> select_split(const Manifest& m, const std::string& split) {
  if (split == "all") return m.cases;
  auto want = parse_split(split);
  if (!want) throw ConfigError("split: expected all, train or test");
  std::vector<CaseRecord> out;
  for (const auto& c : m.cases)
    if (c.split == want) out.push_back(c);
  return out;
}

/// Latest effective label per case from a label log.
inline std::map<std::string, QualityLabel> effective_labels(const std::filesystem::path& log_path) {
  std::map<std::string, QualityLabel> out;
  LabelLog log(log_path);
  for (const auto& e : log.events()) out[e.case_id] = e.label;
  return out;
}

} // namespace detail

struct SynthOptions {
  int count_per_defect = 10;
  std::string size = "64x64";
  double noise = 0.05;
  std::uint64_t seed = 7;
  std::vector<std::string> defects;
};

inline int cmd_synth(const AppConfig& cfg, const SynthOptions& o, std::ostream& out) {
  PhantomSpec spec;
  spec.count_per_defect = o.count_per_defect;
  spec.noise_sigma = o.noise;
  spec.seed = o.seed;
  if (std::sscanf(o.size.c_str(), "%dx%d", &spec.width, &spec.height) != 2)
    throw ConfigError("size: expected WIDTHxHEIGHT, got '" + o.size + "'");
  if (!o.defects.empty()) {
    spec.defect_classes.clear();
    for (const auto& d : o.defects) {
      auto parsed = parse_defect(d);
      if (!parsed) throw ConfigError("defects: unknown defect class '" + d + "'");
      spec.defect_classes.push_back(*parsed);
    }
  }
  const std::filesystem::path root = cfg.paths.out_dir;
  auto m = generate_phantom_suite(spec, root);
  out << "wrote " << m.cases.size() << " phantom cases to " << root.string() << "\n";
  return kOk;
}

inline int cmd_prepare(const AppConfig& cfg, std::ostream& out) {
  const auto manifest_path = cfg.manifest_path();
  const auto m = load_manifest(manifest_path);
  const auto root = manifest_path.parent_path();
  const std::filesystem::path dir = std::filesystem::path(cfg.paths.out_dir) / "overlays";
  for (const auto& c : m.cases) {
    auto png = render_overlay(load_raster(root / c.image_ref), load_mask(root / c.mask_ref));
    write_file_bytes(dir / (c.id + ".png"), png);
  }
  out << "rendered " << m.cases.size() << " overlays to " << dir.string() << "\n";
  return kOk;
}

inline int cmd_judge(const AppConfig& cfg, const std::string& split, std::ostream& out, std::ostream& err) {
  const auto manifest_path = cfg.manifest_path();
  const auto m = load_manifest(manifest_path);
  const auto cases = detail::select_split(m, split);

  BatchOptions opt;
  opt.asset_root = manifest_path.parent_path();
  opt.samples = cfg.ensemble_k.value_or(1);
  opt.inject_features = cfg.inject_features;
  std::unique_ptr<JudgeProvider> provider;
  if (cfg.provider_kind == ProviderKind::Mock) {
    provider = std::make_unique<MockJudgeProvider>(cfg.provider.max_parallel, cfg.provider.model_id);
    opt.reference_root = opt.asset_root;
    opt.fixed_time = std::chrono::system_clock::time_point{};
  } else {
    provider = std::make_unique<HttpJudgeProvider>(cfg.provider);
  }

  BatchStats stats;
  auto transcripts = run_batch(cases, *provider, cfg.paths.cache_dir, opt, &stats);
  out << "judged " << cases.size() << " case(s) x " << opt.samples << " sample(s) with " << provider->model_id()
      << ": " << stats.provider_calls << " provider call(s), " << stats.cache_hits << " cache hit(s), "
      << stats.failures << " failure(s)\n";
  for (const auto& t : transcripts)
    if (auto* f = std::get_if<ParseFailure>(&t.outcome))
      err << "  " << t.case_id << " [" << to_string(f->kind) << "] " << f->detail << "\n";
  return stats.transport_failures > 0 ? kFailure : kOk;
}

inline int cmd_evaluate(const AppConfig& cfg, const std::string& split, const std::string& labels_path,
                        std::ostream& out, std::ostream& err) {
  const auto m = load_manifest(cfg.manifest_path());
  const auto cases = detail::select_split(m, split);
  std::map<std::string, QualityLabel> overrides;
  if (!labels_path.empty()) overrides = detail::effective_labels(labels_path);

  std::map<std::string, std::map<int, JudgeTranscript>> by_case;
  for (auto& t : load_transcripts(transcript_path(cfg.paths.cache_dir, cfg.provider.model_id)))
    by_case[t.case_id][t.sample] = std::move(t);

  const std::size_t want_samples = static_cast<std::size_t>(cfg.ensemble_k.value_or(1));
  DecisionList decisions;
  LabelList truth;
  std::string decision_lines;
  std::size_t skipped = 0;
  for (const auto& c : cases) {
    auto it = by_case.find(c.id);
    std::optional<QualityLabel> gt = c.gt_label;
    if (auto o = overrides.find(c.id); o != overrides.end()) gt = o->second;
    if (it == by_case.end() || !gt) {
      ++skipped;
      continue;
    }
    std::vector<const JudgeTranscript*> samples;
    for (const auto& [s, t] : it->second)
      if (static_cast<std::size_t>(s) < want_samples) samples.push_back(&t);
    if (samples.empty()) {
      ++skipped;
      continue;
    }
    auto d = decide_case(samples);
    decision_lines += decision_record(c.id, cfg.provider.model_id, d).dump() + "\n";
    decisions.emplace_back(c.id, d);
    truth.emplace_back(c.id, *gt);
  }
  if (decisions.empty()) {
    err << "no judged cases with ground-truth labels; run `judge` first\n";
    return kFailure;
  }

  auto report = per_group_breakdown(decisions, truth, m, cfg.positive_class);
  auto rendered = render_report(report);
  const std::filesystem::path dir = cfg.paths.out_dir;
  detail::write_text(dir / "decisions.jsonl", decision_lines);
  detail::write_text(dir / "report.json", rendered.json);
  detail::write_text(dir / "report.txt", rendered.text);
  out << rendered.text;
  if (skipped) err << skipped << " case(s) skipped (not judged or unlabeled)\n";
  if (report.fail_closed > 0) {
    err << "guardrail tripped: " << report.fail_closed << " fail-closed decision(s)\n";
    return kGuardrailTripped;
  }
  return kOk;
}

inline int cmd_audit(const AppConfig& cfg, const std::string& rows_path, double tolerance, std::ostream& out) {
  std::vector<AuditResult> audits;
  for (const auto& row : load_rows(rows_path)) audits.push_back(audit_reported_row(row, tolerance));
  auto arr = nlohmann::ordered_json::array();
  for (const auto& a : audits) arr.push_back(to_json(a));
  detail::write_text(std::filesystem::path(cfg.paths.out_dir) / "audit.json", arr.dump(2) + "\n");
  for (const auto& a : audits) {
    char line[256];
    std::snprintf(line, sizeof line, "%-26s %-12s matches=%zu best=(%ld,%ld,%ld,%ld) residual=%.3e\n",
                  a.input.name.c_str(), a.consistent ? "consistent" : "INCONSISTENT", a.matches.size(), a.best_fit.tp,
                  a.best_fit.fp, a.best_fit.fn, a.best_fit.tn, a.best_residual);
    out << line;
  }
  return kOk;
}

struct ServeOptions {
  std::string host = "127.0.0.1";
  bool lan = false;
  int port = 8080;
  std::string static_dir;
  std::string label_log;
};

inline int cmd_serve(const AppConfig& cfg, const ServeOptions& o, std::ostream& out, std::ostream& err) {
  const auto manifest_path = cfg.manifest_path();
  auto m = load_manifest(manifest_path);
  auto transcripts = load_transcripts(transcript_path(cfg.paths.cache_dir, cfg.provider.model_id));
  const auto log_path = o.label_log.empty() ? std::filesystem::path(cfg.paths.out_dir) / "labels.jsonl"
                                            : std::filesystem::path(o.label_log);
  ReviewService service(std::move(m), manifest_path.parent_path(), std::move(transcripts), log_path);
  httplib::Server server;
  std::optional<std::filesystem::path> static_dir;
  if (!o.static_dir.empty()) static_dir = o.static_dir;
  register_review_routes(server, service, static_dir);
  const std::string host = o.lan ? "0.0.0.0" : o.host;
  out << "serving " << service.case_count() << " case(s) on http://" << host << ":" << o.port << "\n" << std::flush;
  if (!server.listen(host, o.port)) {
    err << "cannot listen on " << host << ":" << o.port << "\n";
    return kFailure;
  }
  return kOk;
}

/// Parses arguments and runs one command. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr,
               const Environment& env = process_environment()) {
  CLI::App app{"Segmentation quality-control guardrail"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file;
  bool show_config = false;
  std::map<std::string, std::string> flags;
  std::map<std::string, std::string> raw;
  auto flag = [&](const std::string& name, const std::string& key, const std::string& help) {
    app.add_option(name, raw[key], help);
  };
  app.add_option("--config", config_file, "Config file (JSON); overrides $SEGQC_CONFIG");
  app.add_flag("--show-config", show_config, "Print the resolved configuration (credential redacted)");
  flag("--provider", "provider.kind", "mock or http");
  flag("--model", "provider.model_id", "Model id sent to the provider");
  flag("--endpoint", "provider.endpoint_url", "Chat-completion endpoint URL");
  flag("--api-key-env", "provider.api_key_env", "Environment variable holding the bearer token");
  flag("--max-parallel", "provider.max_parallel", "Maximum in-flight requests");
  flag("--max-retries", "provider.max_retries", "Retries on timeout, 429 and 5xx");
  flag("--timeout", "provider.timeout_s", "Request timeout in seconds");
  flag("--temperature", "provider.temperature", "Sampling temperature");
  flag("--manifest", "paths.manifest", "Manifest path (default <out-dir>/manifest.jsonl)");
  flag("--cache-dir", "paths.cache_dir", "Transcript cache directory");
  flag("--out-dir", "paths.out_dir", "Output directory");
  flag("--positive-class", "positive_class", "accept or reject");
  flag("--ensemble-k", "ensemble_k", "Samples per case for ensembling (>= 2)");
  flag("--inject-features", "inject_features", "true to append computed measurements to the prompt");

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic phantom suite into the output directory");
  synth_cmd->add_option("--count-per-defect", synth.count_per_defect, "Cases per defect class");
  synth_cmd->add_option("--size", synth.size, "Image size WIDTHxHEIGHT");
  synth_cmd->add_option("--noise", synth.noise, "Noise standard deviation (normalized intensity)");
  synth_cmd->add_option("--seed", synth.seed, "Random seed");
  synth_cmd->add_option("--defects", synth.defects, "Defect classes to generate")->delimiter(',');

  auto* prepare_cmd = app.add_subcommand("prepare", "Render overlays for every case");

  std::string split = "all";
  auto* judge_cmd = app.add_subcommand("judge", "Judge cases and cache transcripts");
  judge_cmd->add_option("--split", split, "all, train or test");

  std::string labels_path;
  auto* eval_cmd = app.add_subcommand("evaluate", "Derive decisions and write the metrics report");
  eval_cmd->add_option("--split", split, "all, train or test");
  eval_cmd->add_option("--labels", labels_path, "Label log whose latest events override manifest labels");

  std::string rows_path;
  double tolerance = 1e-4;
  auto* audit_cmd = app.add_subcommand("audit", "Audit reported metric rows for integer consistency");
  audit_cmd->add_option("--rows", rows_path, "Rows file (one JSON object per line)")->required();
  audit_cmd->add_option("--tolerance", tolerance, "Per-metric tolerance");

  ServeOptions serve;
  auto* serve_cmd = app.add_subcommand("serve", "Run the review service");
  serve_cmd->add_option("--host", serve.host, "Bind address");
  serve_cmd->add_flag("--lan", serve.lan, "Listen on all interfaces");
  serve_cmd->add_option("--port", serve.port, "Port");
  serve_cmd->add_option("--static", serve.static_dir, "Directory of review UI assets");
  serve_cmd->add_option("--label-log", serve.label_log, "Label log path (default <out-dir>/labels.jsonl)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  for (const auto& [key, value] : raw)
    if (!value.empty()) flags[key] = value;

  try {
    std::optional<std::filesystem::path> file;
    if (!config_file.empty()) file = config_file;
    const AppConfig cfg = load_config(file, env, flags);
    if (show_config) out << describe_config(cfg, env).dump(2) << "\n";

    if (*synth_cmd) return cmd_synth(cfg, synth, out);
    if (*prepare_cmd) return cmd_prepare(cfg, out);
    if (*judge_cmd) return cmd_judge(cfg, split, out, err);
    if (*eval_cmd) return cmd_evaluate(cfg, split, labels_path, out, err);
    if (*audit_cmd) return cmd_audit(cfg, rows_path, tolerance, out);
    if (*serve_cmd) return cmd_serve(cfg, serve, out, err);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}

} // namespace segqc::cli
