#include "kt/llmprobe.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mock_endpoint.hpp"

namespace kt::probe {
namespace {

const char* kWorkedUser =
    "The following is a student's problem-solving history. Predict whether the next answer will be correct (1) "
    "or incorrect (0).\n"
    "\n"
    "Student's past performance:\n"
    "1. Quiz 3948 (Skill: Addition and Subtraction Integers) \xE2\x86\x92 Correct\n"
    "2. Quiz 3949 (Skill: Addition and Subtraction Integers) \xE2\x86\x92 Incorrect\n"
    "\n"
    "Next quiz: Quiz 3950 (Skill: Addition and Subtraction Integers)";

const char* kSystem =
    "You are a classification model. Output only a single token: either 0 or 1. Do not generate explanations or "
    "additional text.";

struct Fixture {
  Vocab vocab;
  StudentSequence seq;

  // skills: 0 Fractions, 1 Area, 2 Mystery (unresolvable), 3 Spaced
  Fixture() {
    vocab.add_skill("10", "Fractions");
    vocab.add_skill("11", "Area");
    vocab.add_skill("12", "Mystery");
    vocab.add_skill("13", "Spaced");
    for (int q = 0; q < 6; ++q) vocab.add_quiz(std::to_string(500 + q));
    seq.user_id = "81439";
    seq.steps = {{0, 0, 1}, {1, 1, 0}, {0, 2, 1}, {2, 3, 1}, {3, 4, 0}, {1, 5, 1}};
  }
  Names names() const { return {&vocab}; }
};

ProbeConfig config_for(const testing::MockEndpoint& m) {
  ProbeConfig c;
  c.endpoint = m.url();
  c.model = "llama3.1:8b";
  c.backoff_seconds = 0.0;
  c.timeout_seconds = 5.0;
  return c;
}

double expected_p(const std::string& user) {
  auto [l0, l1] = testing::scripted_logprobs(user);
  return 1.0 / (1.0 + std::exp(l0 - l1));
}

TEST(Prompt, ReproducesWorkedExampleBytes) {
  std::vector<HistoryItem> h = {{"3948", "Addition and Subtraction Integers", 1},
                                {"3949", "Addition and Subtraction Integers", 0}};
  auto p = render_prompt(h, "3950", "Addition and Subtraction Integers");
  EXPECT_EQ(p.system, kSystem);
  EXPECT_EQ(p.user, kWorkedUser);
  EXPECT_EQ(p.history_length, 2u);
  EXPECT_FALSE(p.truncated);
}

TEST(Prompt, EmptyHistory) {
  auto p = render_prompt({}, "7", "Area");
  EXPECT_EQ(p.user,
            "The following is a student's problem-solving history. Predict whether the next answer will be "
            "correct (1) or incorrect (0).\n\nNext quiz: Quiz 7 (Skill: Area)");
}

TEST(Prompt, TruncatesToMostRecentLines) {
  std::vector<HistoryItem> h;
  for (int i = 0; i < 5; ++i) h.push_back({std::to_string(i), "S", i % 2});
  auto p = render_prompt(h, "9", "S", 3);
  EXPECT_TRUE(p.truncated);
  EXPECT_EQ(p.history_length, 3u);
  EXPECT_NE(p.user.find("1. Quiz 2 (Skill: S)"), std::string::npos);
  EXPECT_EQ(p.user.find("Quiz 1 "), std::string::npos);
  EXPECT_EQ(render_prompt(h, "9", "S", 3).user, p.user);
}

TEST(Logits, Analytic) {
  EXPECT_EQ(prob_from_logits({-0.7, -0.7}), 0.5);
  EXPECT_NEAR(prob_from_logits({0.2, 0.2 + std::log(3.0)}), 0.75, 1e-15);
  EXPECT_THROW(prob_from_logits({NAN, 0.0}), std::invalid_argument);
}

TEST(Logits, MatchesSoftmaxOracle) {
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    double l0 = rng.uniform(-50, 50), l1 = rng.uniform(-50, 50);
    double oracle = std::exp(l1) / (std::exp(l0) + std::exp(l1));
    double p = prob_from_logits({l0, l1});
    ASSERT_NEAR(p, oracle, 1e-12);
    ASSERT_NEAR(prob_from_logits({l0 + 123.0, l1 + 123.0}), p, 1e-12);
    ASSERT_GE(prob_from_logits({l0, l1 + 0.5}), p);
    ASSERT_LE(prob_from_logits({l0 + 0.5, l1}), p);
  }
}

TEST(Logits, Resolution) {
  auto pair = resolve_logits({{"0", -0.105}, {"1", -2.303}});
  EXPECT_EQ(pair.l0, -0.105);
  EXPECT_EQ(pair.l1, -2.303);
  auto spaced = resolve_logits({{" 1", -0.2}, {" 0", -1.5}, {"1", -0.3}});
  EXPECT_EQ(spaced.l1, -0.3);
  EXPECT_FALSE(spaced.spaced1);
  EXPECT_EQ(spaced.l0, -1.5);
  EXPECT_TRUE(spaced.spaced0);
  EXPECT_THROW(resolve_logits({{"Yes", -0.1}}), UnresolvableLogits);
  EXPECT_THROW(resolve_logits({{"1", -0.1}}), UnresolvableLogits);
}

TEST(Logits, ParsesCompletionsShape) {
  auto r = nlohmann::json::parse(R"({"choices":[{"text":"1","logprobs":{"tokens":["1"],
      "top_logprobs":[{"1":-0.2,"0":-1.8,"The":-4.0}]}}]})");
  auto top = parse_top_logprobs(r, Api::kCompletions);
  ASSERT_EQ(top.size(), 3u);
  EXPECT_EQ(top[0].token, "1");
  auto pair = resolve_logits(top);
  EXPECT_EQ(pair.l0, -1.8);
  EXPECT_THROW(parse_top_logprobs(nlohmann::json::object(), Api::kChat), ProbeError);
}

TEST(Config, Validation) {
  ProbeConfig c;
  EXPECT_NO_THROW(c.validate());
  c.temperature = 0.7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.max_concurrency = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.endpoint = "ftp://x";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Client, RequestBodyAndPassthrough) {
  testing::MockEndpoint mock;
  Client client(config_for(mock));
  auto prompt = render_prompt({}, "1", "Area");
  auto pair = client.request_logits(prompt);
  auto [l0, l1] = testing::scripted_logprobs(prompt.user);
  EXPECT_EQ(pair.l0, l0);
  EXPECT_EQ(pair.l1, l1);
  auto body = nlohmann::json::parse(mock.last_body());
  EXPECT_EQ(body["temperature"], 0.0);
  EXPECT_EQ(body["max_tokens"], 1);
  EXPECT_EQ(body["top_logprobs"], 20);
  EXPECT_EQ(body["logprobs"], true);
  EXPECT_EQ(body["messages"][0]["content"], kSystem);
}

TEST(Client, RetriesServerErrors) {
  testing::MockEndpoint mock;
  auto cfg = config_for(mock);
  cfg.max_retries = 2;
  mock.fail_next(2);
  Client client(cfg);
  EXPECT_NO_THROW(client.request_logits(render_prompt({}, "1", "Area")));
  EXPECT_EQ(mock.requests(), 3u);
  mock.fail_next(3);
  EXPECT_THROW(client.request_logits(render_prompt({}, "2", "Area")), ProbeError);
}

TEST(Client, UnreachableEndpointFailsClearly) {
  // a port that was free a moment ago and has nothing listening now
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ASSERT_EQ(::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
  socklen_t len = sizeof addr;
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  ::close(fd);
  int port = ntohs(addr.sin_port);
  ProbeConfig cfg;
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
  cfg.max_retries = 0;
  cfg.timeout_seconds = 2.0;
  Client client(cfg);
  try {
    client.request_logits(render_prompt({}, "1", "Area"));
    FAIL();
  } catch (const ProbeError& e) {
    EXPECT_NE(std::string(e.what()).find("cannot reach"), std::string::npos);
  }
}

TEST(ProbeSequence, OneRecordPerPredictedStep) {
  testing::MockEndpoint mock;
  Fixture fx;
  auto cfg = config_for(mock);
  cfg.max_concurrency = 3;
  Client client(cfg);
  auto run = probe_sequence(client, fx.seq, fx.names(), "zero-shot");
  ASSERT_EQ(run.records.size(), fx.seq.size() - 1);
  EXPECT_EQ(mock.requests(), fx.seq.size() - 1);
  for (std::size_t i = 0; i < run.records.size(); ++i) {
    const auto& r = run.records[i];
    const std::size_t t = i + 1;
    EXPECT_EQ(r.step, static_cast<int>(t));
    EXPECT_EQ(r.skill, fx.seq.steps[t].skill);
    EXPECT_EQ(r.y_true, fx.seq.steps[t].correct);
    EXPECT_EQ(r.model_tag, "zero-shot");
    std::vector<HistoryItem> h;
    for (std::size_t u = 0; u < t; ++u)
      h.push_back({fx.vocab.quiz_id(fx.seq.steps[u].quiz), fx.vocab.skill_name(fx.seq.steps[u].skill),
                   fx.seq.steps[u].correct});
    auto prompt = render_prompt(h, fx.vocab.quiz_id(fx.seq.steps[t].quiz), fx.vocab.skill_name(fx.seq.steps[t].skill));
    if (fx.seq.steps[t].skill == 2) {
      EXPECT_FALSE(r.resolved());
      EXPECT_NE(run.audit[i].error.find("unresolvable"), std::string::npos);
    } else {
      ASSERT_TRUE(r.resolved());
      EXPECT_NEAR(*r.p_pred, expected_p(prompt.user), 1e-12);
      EXPECT_GT(*r.p_pred, 0.0);
      EXPECT_LT(*r.p_pred, 1.0);
    }
  }
  EXPECT_EQ(run.unresolved, 1u);
  EXPECT_TRUE(run.audit[3].logits->spaced0);

  std::stringstream dump;
  write_predictions(dump, run.records);
  auto back = read_predictions(dump).records;
  ASSERT_EQ(back.size(), run.records.size());
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(back[i].p_pred, run.records[i].p_pred);
}

TEST(ProbeSequence, WarmCacheMakesNoRequests) {
  testing::MockEndpoint mock;
  Fixture fx;
  auto dir = std::filesystem::temp_directory_path() / ("kt_probe_cache_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  auto cfg = config_for(mock);
  cfg.cache_dir = dir;
  Client cold(cfg);
  auto first = probe_sequence(cold, fx.seq, fx.names(), "m");
  std::size_t after_cold = mock.requests();
  EXPECT_EQ(after_cold, fx.seq.size() - 1);
  Client warm(cfg);
  auto second = probe_sequence(warm, fx.seq, fx.names(), "m");
  EXPECT_EQ(mock.requests(), after_cold);
  EXPECT_EQ(warm.network_requests(), 0u);
  EXPECT_EQ(warm.cache_hits(), fx.seq.size() - 1);
  auto st = compare_runs(first.records, second.records);
  EXPECT_EQ(st.differing, 0u);
  std::filesystem::remove_all(dir);
}

TEST(ProbeSequence, DoubleRunReportsZeroDeltas) {
  testing::MockEndpoint mock;
  Fixture fx;
  Client client(config_for(mock));
  auto a = probe_sequence(client, fx.seq, fx.names(), "m");
  auto b = probe_sequence(client, fx.seq, fx.names(), "m");
  auto st = compare_runs(a.records, b.records);
  EXPECT_EQ(st.compared, fx.seq.size() - 2);
  EXPECT_EQ(st.differing, 0u);
  EXPECT_EQ(st.resolution_mismatch, 0u);
  EXPECT_EQ(st.max_abs_delta, 0.0);
  auto c = a.records;
  *c[0].p_pred += 0.25;
  EXPECT_EQ(compare_runs(a.records, c).differing, 1u);
  EXPECT_DOUBLE_EQ(compare_runs(a.records, c).max_abs_delta, 0.25);
}

TEST(ProbeMastery, TimesKRequestsAndConsistency) {
  testing::MockEndpoint mock;
  Fixture fx;
  fx.seq.steps.resize(3);  // skills 0, 1, 0
  Client client(config_for(mock));
  std::vector<int> rep = {2, 1};  // skills 0 and 1 only
  auto m = probe_mastery(client, fx.seq, fx.names(), rep);
  EXPECT_EQ(mock.requests(), 6u);
  ASSERT_EQ(m.trajectory.P.rows(), 3);
  ASSERT_EQ(m.trajectory.P.cols(), 2);
  EXPECT_EQ(m.unresolved, 0u);
  // row 1 asks about skill 0 with quiz 2: the same prompt probe_sequence uses for step 2
  auto seq = probe_sequence(client, fx.seq, fx.names(), "m");
  EXPECT_EQ(m.trajectory.P(1, 0), *seq.records[1].p_pred);
}

TEST(Representative, MostFrequentQuiz) {
  std::vector<StudentSequence> s = {{"a", {{0, 3, 1}, {0, 4, 1}, {0, 4, 0}, {1, 9, 1}}},
                                    {"b", {{0, 3, 1}, {1, 8, 1}}}};
  auto r = representative_quizzes(s, 3);
  EXPECT_EQ(r[0], 3);  // tie between 3 and 4 goes to the smaller index
  EXPECT_EQ(r[1], 8);
  EXPECT_FALSE(r[2].has_value());
}

}  // namespace
}  // namespace kt::probe
