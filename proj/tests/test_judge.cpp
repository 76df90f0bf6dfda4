#include <gtest/gtest.h>

#include <unistd.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <thread>

#include "httplib.h"
#include "parser_corpus.hpp"
#include "segqc/judge.hpp"
#include "segqc/phantom.hpp"

using namespace segqc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("segqc_judge_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

HcrAssessment sample_assessment(int score) {
  return {"recall", {"loop", "clear", "homogeneous"}, {"plausible", "none", "none"},
          {"summary", score, default_rubric().category(score)}};
}

VisualFeatures features(std::size_t components, double edge, double cv, std::optional<double> dice) {
  VisualFeatures f;
  f.topology.component_count = components;
  f.boundary_edge_strength = edge;
  f.interior_cv = cv;
  if (dice) f.overlap = OverlapStats{*dice, 0.0, 0.0};
  return f;
}

/// Scripted chat endpoint on an ephemeral loopback port.
class StubServer {
public:
  explicit StubServer(std::vector<int> statuses, std::string text = "hello")
      : statuses_(std::move(statuses)), text_(std::move(text)) {
    server_.Post("/v1/chat", [this](const httplib::Request& req, httplib::Response& res) {
      last_body_ = req.body;
      last_auth_ = req.get_header_value("Authorization");
      const std::size_t i = calls_++;
      const int status = i < statuses_.size() ? statuses_[i] : 200;
      res.status = status;
      if (status == 200)
        res.set_content(nlohmann::json{{"choices", {{{"message", {{"content", text_}}}}}}}.dump(), "application/json");
      else
        res.set_content("{\"error\":\"scripted\"}", "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat"; }
  std::size_t calls() const { return calls_; }
  const std::string& last_body() const { return last_body_; }
  const std::string& last_auth() const { return last_auth_; }

private:
  httplib::Server server_;
  std::vector<int> statuses_;
  std::string text_;
  std::atomic<std::size_t> calls_{0};
  std::string last_body_, last_auth_;
  int port_ = 0;
  std::thread thread_;
};

ProviderConfig stub_config(const std::string& url) {
  ProviderConfig c;
  c.endpoint_url = url;
  c.model_id = "stub-model";
  c.api_key_env = "SEGQC_TEST_KEY";
  c.timeout_s = 5;
  c.backoff_base_ms = 1;
  c.backoff_cap_ms = 5;
  ::setenv("SEGQC_TEST_KEY", "secret-token", 1);
  return c;
}

HcrPrompt tiny_prompt() {
  const Bytes png = {1, 2, 3};
  return build_hcr_prompt({"Liver", Modality::CT, "liver-ct", std::nullopt}, png);
}

class CountingProvider final : public JudgeProvider {
public:
  CountingProvider(const JudgeProvider& inner, int parallel, std::string poisoned = {})
      : inner_(inner), parallel_(parallel), poisoned_(std::move(poisoned)) {}
  std::string model_id() const override { return inner_.model_id(); }
  int max_parallel() const override { return parallel_; }
  Completion complete(const HcrPrompt& p, const CaseAssets& a) const override {
    const int now = ++in_flight_;
    int seen = peak_;
    while (now > seen && !peak_.compare_exchange_weak(seen, now)) {
    }
    ++calls_;
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
    --in_flight_;
    if (a.record && a.record->id == poisoned_) throw TransportError("connection reset");
    return inner_.complete(p, a);
  }
  int calls() const { return calls_; }
  int peak() const { return peak_; }

private:
  const JudgeProvider& inner_;
  int parallel_;
  std::string poisoned_;
  mutable std::atomic<int> calls_{0}, in_flight_{0}, peak_{0};
};

std::string transcript_lines(const std::vector<JudgeTranscript>& ts) {
  std::string out;
  for (const auto& t : ts) out += to_json(t).dump() + "\n";
  return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

TEST(Parse, CorpusOutcomes) {
  for (const auto& item : corpus::items()) {
    auto out = parse_assessment(item.text);
    if (!item.expected) {
      EXPECT_TRUE(std::holds_alternative<HcrAssessment>(out)) << item.name << ": "
                                                              << std::get<ParseFailure>(out).detail;
    } else {
      ASSERT_TRUE(std::holds_alternative<ParseFailure>(out)) << item.name;
      EXPECT_EQ(std::get<ParseFailure>(out).kind, *item.expected) << item.name;
    }
  }
}

TEST(Parse, FencedWithProseRecoversSameAssessment) {
  auto plain = parse_assessment(corpus::object());
  auto fenced = parse_assessment("I reviewed the slice.\n```json\n" + corpus::object() + "\n```");
  ASSERT_TRUE(std::holds_alternative<HcrAssessment>(plain));
  EXPECT_EQ(std::get<HcrAssessment>(plain), std::get<HcrAssessment>(fenced));
}

TEST(Parse, SchemaErrorNamesField) {
  auto j = nlohmann::json::parse(corpus::object());
  j["anatomical_inference"].erase("spillage");
  auto out = parse_assessment(j.dump());
  ASSERT_TRUE(std::holds_alternative<ParseFailure>(out));
  EXPECT_EQ(std::get<ParseFailure>(out).kind, FailureKind::SchemaError);
  EXPECT_EQ(std::get<ParseFailure>(out).field, "anatomical_inference.spillage");
}

TEST(Parse, CategoryIsTrimmedButExact) {
  auto ok = parse_assessment(corpus::object("5", "\"  clinically ready \""));
  EXPECT_TRUE(std::holds_alternative<HcrAssessment>(ok));
  auto bad = parse_assessment(corpus::object("5", "\"Clinically Ready\""));
  ASSERT_TRUE(std::holds_alternative<ParseFailure>(bad));
  EXPECT_EQ(std::get<ParseFailure>(bad).kind, FailureKind::CategoryMismatch);
}

TEST(Parse, RoundTripsRandomAssessments) {
  std::mt19937_64 rng(17);
  const std::vector<std::string> alphabet = {"a", "b", "c", "X", "Y", "Z", " ", "{", "}", "[", "]", "\"",
                                             "\\", "\n", "\t", ",", ":", "0", "1", "9", "é", "✓"};
  auto text = [&] {
    std::string s = "t";
    const int n = static_cast<int>(rng() % 40);
    for (int i = 0; i < n; ++i) s += alphabet[rng() % alphabet.size()];
    return s;
  };
  for (int trial = 0; trial < 300; ++trial) {
    const int score = 1 + static_cast<int>(rng() % 5);
    HcrAssessment a{text(), {text(), text(), text()}, {text(), text(), text()},
                    {text(), score, default_rubric().category(score)}};
    for (int indent : {-1, 2}) {
      auto out = parse_assessment(serialize_assessment(a, indent));
      ASSERT_TRUE(std::holds_alternative<HcrAssessment>(out)) << std::get<ParseFailure>(out).detail;
      EXPECT_EQ(std::get<HcrAssessment>(out), a);
    }
  }
}

TEST(Parse, FuzzNeverThrows) {
  std::mt19937_64 rng(99);
  const auto seeds = corpus::items();
  for (int trial = 0; trial < 20000; ++trial) {
    std::string s;
    if (trial % 2) {
      s = seeds[rng() % seeds.size()].text;
      const int edits = 1 + static_cast<int>(rng() % 8);
      for (int e = 0; e < edits && !s.empty(); ++e) {
        const auto pos = rng() % s.size();
        switch (rng() % 3) {
          case 0: s[pos] = static_cast<char>(rng() % 256); break;
          case 1: s.erase(pos, 1 + rng() % 10); break;
          default: s.insert(pos, 1, "{}[]\",:\\"[rng() % 8]);
        }
      }
    } else {
      const auto n = rng() % 200;
      for (std::size_t i = 0; i < n; ++i) s += static_cast<char>(rng() % 256);
    }
    EXPECT_NO_THROW({ auto out = parse_assessment(s); (void)out; });
  }
}

// ---------------------------------------------------------------------------
// Mock judge
// ---------------------------------------------------------------------------

TEST(MockJudge, PenaltyTable) {
  EXPECT_EQ(mock_judge(features(1, 0.6, 0.1, 1.0)).clinical_synthesis.score, 5);
  EXPECT_EQ(mock_judge(features(1, 0.6, 0.1, 0.65)).clinical_synthesis.score, 3);
  EXPECT_EQ(mock_judge(features(2, 0.6, 0.1, 0.85)).clinical_synthesis.score, 3);
  EXPECT_EQ(mock_judge(features(1, 0.6, 0.1, std::nullopt)).clinical_synthesis.score, 5);
  EXPECT_EQ(mock_judge(features(1, 0.1, 0.1, std::nullopt)).clinical_synthesis.score, 4);
  EXPECT_EQ(mock_judge(features(1, 0.6, 0.9, std::nullopt)).clinical_synthesis.score, 4);
  auto worst = features(3, 0.0, 2.0, 0.1);
  worst.overlap->under_seg_fraction = 0.9;
  worst.overlap->spill_fraction = 0.9;
  EXPECT_EQ(mock_judge(worst).clinical_synthesis.score, 1);
}

TEST(MockJudge, CategoryFollowsRubricAndOutputValidates) {
  for (double dice : {1.0, 0.85, 0.5}) {
    auto a = mock_judge(features(1, 0.6, 0.1, dice));
    EXPECT_EQ(a.clinical_synthesis.category, default_rubric().category(a.clinical_synthesis.score));
    auto back = parse_assessment(serialize_assessment(a));
    ASSERT_TRUE(std::holds_alternative<HcrAssessment>(back));
    EXPECT_EQ(std::get<HcrAssessment>(back), a);
  }
}

TEST(MockJudge, Pure) {
  auto f = features(2, 0.3, 0.2, 0.8);
  EXPECT_EQ(mock_judge(f), mock_judge(f));
}

TEST(MockJudge, PhantomSeparation) {
  for (const auto& pc : generate_phantom_cases(PhantomSpec{})) {
    const int s = mock_judge(extract_features(pc.image, pc.candidate, &pc.truth)).clinical_synthesis.score;
    if (pc.defect == DefectClass::None) EXPECT_GE(s, 4) << pc.record.id;
    if (pc.defect == DefectClass::Fragment || (pc.defect == DefectClass::Erode && pc.severe))
      EXPECT_LE(s, 3) << pc.record.id;
  }
}

// ---------------------------------------------------------------------------
// Wire protocol
// ---------------------------------------------------------------------------

TEST(Wire, RequestBodyShape) {
  auto p = tiny_prompt();
  ProviderConfig c;
  auto body = chat_request_body(p, c);
  EXPECT_EQ(body["model"], c.model_id);
  EXPECT_EQ(body["temperature"], 0.0);
  ASSERT_EQ(body["messages"].size(), 2u);
  EXPECT_EQ(body["messages"][0]["role"], "system");
  EXPECT_EQ(body["messages"][1]["content"][1]["image_url"]["url"], p.image_attachment.data_url());
}

TEST(Wire, ReturnsTextVerbatim) {
  StubServer stub({}, "  {\"verbatim\": true}\n");
  auto c = send_judge_request(tiny_prompt(), stub_config(stub.url()));
  EXPECT_EQ(c.text, "  {\"verbatim\": true}\n");
  EXPECT_EQ(c.attempts, 1);
  EXPECT_EQ(stub.last_auth(), "Bearer secret-token");
  EXPECT_EQ(nlohmann::json::parse(stub.last_body())["model"], "stub-model");
}

TEST(Wire, RetriesRateLimitThenSucceeds) {
  StubServer stub({429, 429, 200});
  auto c = send_judge_request(tiny_prompt(), stub_config(stub.url()));
  EXPECT_EQ(c.attempts, 3);
  EXPECT_EQ(c.text, "hello");
  EXPECT_EQ(stub.calls(), 3u);
}

TEST(Wire, RetriesServerErrors) {
  StubServer stub({500, 503, 200});
  EXPECT_EQ(send_judge_request(tiny_prompt(), stub_config(stub.url())).attempts, 3);
}

TEST(Wire, AuthFailureIsNotRetried) {
  for (int status : {401, 403}) {
    StubServer stub({status});
    EXPECT_THROW(send_judge_request(tiny_prompt(), stub_config(stub.url())), AuthError);
    EXPECT_EQ(stub.calls(), 1u);
  }
}

TEST(Wire, ExhaustedRetries) {
  StubServer stub({429, 429, 429, 429, 429});
  auto cfg = stub_config(stub.url());
  cfg.max_retries = 2;
  EXPECT_THROW(send_judge_request(tiny_prompt(), cfg), TransientExhausted);
  EXPECT_EQ(stub.calls(), 3u);
}

TEST(Wire, ClientErrorIsTransportError) {
  StubServer stub({400});
  EXPECT_THROW(send_judge_request(tiny_prompt(), stub_config(stub.url())), TransportError);
  EXPECT_EQ(stub.calls(), 1u);
}

TEST(Wire, MissingKeyIsAuthError) {
  auto cfg = stub_config("http://127.0.0.1:9/x");
  cfg.api_key_env = "SEGQC_TEST_KEY_UNSET";
  ::unsetenv("SEGQC_TEST_KEY_UNSET");
  EXPECT_THROW(send_judge_request(tiny_prompt(), cfg), AuthError);
}

TEST(Wire, ConfigValidation) {
  ProviderConfig c;
  c.max_parallel = 0;
  EXPECT_THROW(c.validate(), RangeError);
  c = ProviderConfig{};
  c.max_retries = -1;
  EXPECT_THROW(c.validate(), RangeError);
  c = ProviderConfig{};
  c.timeout_s = 0;
  EXPECT_THROW(c.validate(), RangeError);
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

class BatchTest : public ::testing::Test {
protected:
  void SetUp() override {
    root_ = scratch(::testing::UnitTest::GetInstance()->current_test_info()->name());
    PhantomSpec spec;
    spec.count_per_defect = 2;
    manifest_ = generate_phantom_suite(spec, root_ / "suite");
    opt_.asset_root = root_ / "suite";
    opt_.reference_root = root_ / "suite";
    opt_.fixed_time = std::chrono::system_clock::time_point{};
  }
  void TearDown() override { fs::remove_all(root_); }

  fs::path root_;
  Manifest manifest_;
  BatchOptions opt_;
  MockJudgeProvider mock_;
};

TEST_F(BatchTest, SecondRunMakesNoProviderCalls) {
  CountingProvider first(mock_, 4);
  BatchStats stats;
  auto a = run_batch(manifest_.cases, first, root_ / "cache", opt_, &stats);
  EXPECT_EQ(first.calls(), 12);
  EXPECT_EQ(stats.provider_calls, 12u);
  EXPECT_EQ(stats.cache_hits, 0u);

  CountingProvider second(mock_, 4);
  auto b = run_batch(manifest_.cases, second, root_ / "cache", opt_, &stats);
  EXPECT_EQ(second.calls(), 0);
  EXPECT_EQ(stats.cache_hits, 12u);
  EXPECT_EQ(transcript_lines(a), transcript_lines(b));
  EXPECT_EQ(load_transcripts(transcript_path(root_ / "cache", "mock-hcr")).size(), 12u);
}

TEST_F(BatchTest, OutputOrderFollowsInput) {
  auto ts = run_batch(manifest_.cases, mock_, root_ / "cache", opt_);
  ASSERT_EQ(ts.size(), manifest_.cases.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_EQ(ts[i].case_id, manifest_.cases[i].id);
    EXPECT_FALSE(ts[i].raw_text.empty());
    EXPECT_GE(ts[i].attempts, 1);
  }
}

TEST_F(BatchTest, InvariantToParallelism) {
  CountingProvider serial(mock_, 1), wide(mock_, 8);
  auto a = run_batch(manifest_.cases, serial, root_ / "c1", opt_);
  auto b = run_batch(manifest_.cases, wide, root_ / "c8", opt_);
  EXPECT_EQ(transcript_lines(a), transcript_lines(b));
  EXPECT_EQ(serial.peak(), 1);
  EXPECT_LE(wide.peak(), 8);
}

TEST_F(BatchTest, PoisonedCaseDoesNotAbort) {
  std::vector<CaseRecord> ten(manifest_.cases.begin(), manifest_.cases.begin() + 10);
  CountingProvider poisoned(mock_, 3, ten[4].id);
  BatchStats stats;
  auto ts = run_batch(ten, poisoned, root_ / "cache", opt_, &stats);
  ASSERT_EQ(ts.size(), 10u);
  int failures = 0;
  for (const auto& t : ts) failures += t.is_failure();
  EXPECT_EQ(failures, 1);
  EXPECT_EQ(std::get<ParseFailure>(ts[4].outcome).kind, FailureKind::TransportFailure);
  EXPECT_EQ(stats.transport_failures, 1u);

  CountingProvider healthy(mock_, 3);
  auto again = run_batch(ten, healthy, root_ / "cache", opt_);
  EXPECT_EQ(healthy.calls(), 1);
  EXPECT_FALSE(again[4].is_failure());
}

TEST_F(BatchTest, MissingAssetBecomesFailureTranscript) {
  auto cases = manifest_.cases;
  cases[0].image_ref = "images/missing.png";
  BatchStats stats;
  auto ts = run_batch(cases, mock_, root_ / "cache", opt_, &stats);
  ASSERT_TRUE(ts[0].is_failure());
  EXPECT_EQ(std::get<ParseFailure>(ts[0].outcome).kind, FailureKind::AssetError);
  EXPECT_EQ(stats.transport_failures, 1u);
  EXPECT_EQ(stats.provider_calls, cases.size() - 1);
}

TEST_F(BatchTest, SamplesAreCachedSeparately) {
  opt_.samples = 3;
  CountingProvider p(mock_, 2);
  auto ts = run_batch(manifest_.cases, p, root_ / "cache", opt_);
  EXPECT_EQ(ts.size(), manifest_.cases.size() * 3);
  EXPECT_EQ(p.calls(), static_cast<int>(ts.size()));
  EXPECT_EQ(ts[2].sample, 2);
  EXPECT_EQ(ts[2].case_id, manifest_.cases[0].id);
}

TEST_F(BatchTest, TornCacheLineIgnored) {
  run_batch(manifest_.cases, mock_, root_ / "cache", opt_);
  const auto path = transcript_path(root_ / "cache", "mock-hcr");
  {
    std::ofstream out(path, std::ios::app);
    out << "{\"case_id\": \"none-000\", \"model";
  }
  EXPECT_EQ(load_transcripts(path).size(), manifest_.cases.size());
  CountingProvider p(mock_, 2);
  run_batch(manifest_.cases, p, root_ / "cache", opt_);
  EXPECT_EQ(p.calls(), 0);
}

TEST(Transcript, JsonRoundTrip) {
  JudgeTranscript t{"c1", "m/x", "00ff", 1, "raw", sample_assessment(4), 2, 12.5, "2025-01-01T00:00:00.000Z"};
  auto back = transcript_from_json(nlohmann::json::parse(to_json(t).dump()));
  EXPECT_EQ(to_json(back).dump(), to_json(t).dump());
  t.outcome = ParseFailure{FailureKind::SchemaError, "missing", "knowledge_recall"};
  back = transcript_from_json(nlohmann::json::parse(to_json(t).dump()));
  EXPECT_EQ(std::get<ParseFailure>(back.outcome), std::get<ParseFailure>(t.outcome));
  EXPECT_EQ(model_dir_name("google/gemini-2.5-flash"), "google_gemini-2.5-flash");
}

TEST(Transcript, FormatUtc) {
  EXPECT_EQ(format_utc(std::chrono::system_clock::time_point{}), "1970-01-01T00:00:00.000Z");
}
