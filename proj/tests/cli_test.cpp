#include "kt/cli.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "kt/predictions.hpp"
#include "kt/util.hpp"
#include "mock_endpoint.hpp"

namespace kt::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Result {
  int code;
  std::string out, err;
};

Result ktrace(std::vector<std::string> args) {
  std::ostringstream out, err;
  int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("kt_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path ws() const { return dir_ / "ws"; }

  // 12 students on 3 skills, lengths 4..7, plus a multi-skill row and a
  // student too short to keep.
  fs::path toy_csv() const {
    auto p = dir_ / "log.csv";
    std::ofstream o(p);
    o << "order_id,user_id,problem_id,correct,skill_id,skill_name\n";
    int order = 1;
    for (int u = 1; u <= 12; ++u)
      for (int t = 0; t < 4 + u % 4; ++t) {
        int skill = (u + t) % 3;
        o << order++ << ',' << u << ',' << 100 + skill * 10 + t % 2 << ',' << (u * 7 + t * 3) % 5 % 2 << ','
          << skill << ",Skill " << char('A' + skill) << '\n';
      }
    o << order++ << ",1,900,1,\"1,2\",Mixed\n";
    o << order++ << ",99,100,1,0,Skill A\n";
    return p;
  }

  fs::path write_config(const json& extra) const {
    json cfg = {{"paths", {{"raw", toy_csv().string()}, {"workspace", ws().string()}}},
                {"dkt", {{"max_epochs", 2}, {"embedding_dim", 4}, {"hidden_dim", 6}, {"batch_size", 4}}}};
    if (!extra.is_null()) cfg.merge_patch(extra);
    auto p = dir_ / "config.json";
    std::ofstream(p) << cfg.dump(2);
    return p;
  }

  std::string vocab_hash() const { return json::parse(read_file(ws() / "manifest.json"))["vocab_hash"]; }

  void write_dump(const std::string& tag, const std::vector<PredictionRecord>& records) const {
    std::ostringstream os;
    write_predictions(os, records, vocab_hash());
    write_file_atomic(ws() / "predictions" / (tag + ".tsv"), os.str());
  }

  fs::path dir_;
};

TEST_F(CliTest, MissingInputIsConfigErrorWithoutArtifacts) {
  auto cfg = write_config({{"paths", {{"raw", (dir_ / "absent.csv").string()}}}});
  auto r = ktrace({"prepare", "-c", cfg.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("absent.csv"), std::string::npos);
  EXPECT_FALSE(fs::exists(ws()));
}

TEST_F(CliTest, ConfigErrorsExitTwo) {
  auto cfg = write_config({{"dkt", {{"hidden_units", 3}}}});
  auto r = ktrace({"prepare", "-c", cfg.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("unknown config key 'dkt.hidden_units'"), std::string::npos);

  cfg = write_config({});
  EXPECT_EQ(ktrace({"prepare", "-c", cfg.string(), "--set", "split.train=0.9"}).code, 2);
  EXPECT_EQ(ktrace({"prepare", "-c", cfg.string(), "--set", "dkt.patience=1.5"}).code, 2);
  EXPECT_EQ(ktrace({"prepare", "-c", cfg.string(), "--set", "probe.temperature=0.2"}).code, 2);
  EXPECT_EQ(ktrace({"prepare", "-c", cfg.string(), "--set", "nope=1"}).code, 2);
  EXPECT_EQ(ktrace({"frobnicate"}).code, 2);
  EXPECT_EQ(ktrace({"train", "-c", cfg.string()}).code, 2);  // not prepared
}

TEST_F(CliTest, PrepareWritesArtifactsAndOverridesWin) {
  auto cfg = write_config({{"split", {{"seed", 5}}}});
  auto r = ktrace({"prepare", "-c", cfg.string(), "--set", "split.seed=9"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto manifest = json::parse(read_file(ws() / "manifest.json"));
  EXPECT_EQ(manifest["seeds"]["split"], 9);
  EXPECT_EQ(manifest["layout_version"], kLayoutVersion);
  auto stats = json::parse(read_file(ws() / "data" / "stats.json"));
  EXPECT_EQ(stats["preprocessed"]["students"], 12);
  EXPECT_EQ(stats["filter"]["dropped_multi_skill"], 1);
  EXPECT_EQ(stats["train"]["students"].get<int>() + stats["val"]["students"].get<int>() +
                stats["test"]["students"].get<int>(),
            12);
  EXPECT_NE(r.out.find("after"), std::string::npos);
}

TEST_F(CliTest, PrepareTrainPredictEvaluateAreIdempotent) {
  auto cfg = write_config({});
  for (const char* cmd : {"prepare", "train", "predict", "evaluate"})
    ASSERT_EQ(ktrace({cmd, "-c", cfg.string()}).code, 0) << cmd;
  auto first = artifact_hashes(ws());
  for (const char* cmd : {"prepare", "train", "predict", "evaluate"})
    ASSERT_EQ(ktrace({cmd, "-c", cfg.string()}).code, 0) << cmd;
  EXPECT_EQ(artifact_hashes(ws()), first);
  EXPECT_FALSE(fs::exists(ws() / "dkt" / "timing.json"));

  // a non-deterministic run records wall time separately
  ASSERT_EQ(ktrace({"train", "-c", cfg.string(), "--set", "deterministic=false"}).code, 0);
  EXPECT_TRUE(fs::exists(ws() / "dkt" / "timing.json"));
}

TEST_F(CliTest, EvaluateHandBuiltDump) {
  auto cfg = write_config({});
  ASSERT_EQ(ktrace({"prepare", "-c", cfg.string()}).code, 0);
  write_dump("hand", {{"1", 1, 0, 1, 0.8, "hand"}, {"1", 2, 0, 0, 0.6, "hand"}, {"2", 1, 1, 1, 0.3, "hand"}});
  auto r = ktrace({"evaluate", "-c", cfg.string(), "--tags", "hand"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto m = json::parse(read_file(ws() / "reports" / "metrics.json"))["models"][0];
  const auto& c = m["classification"];
  // p >= 0.5: predictions 1, 1, 0 against labels 1, 0, 1
  EXPECT_EQ(c["confusion"]["tp"], 1);
  EXPECT_EQ(c["confusion"]["fp"], 1);
  EXPECT_EQ(c["confusion"]["fn"], 1);
  EXPECT_EQ(c["confusion"]["tn"], 0);
  EXPECT_DOUBLE_EQ(c["accuracy"].get<double>(), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(c["auc"].get<double>(), 0.5);  // 0.8 beats 0.6, 0.3 loses
  EXPECT_DOUBLE_EQ(c["high_performer"]["precision"].get<double>(), 0.5);
  EXPECT_DOUBLE_EQ(c["low_performer"]["recall"].get<double>(), 0.0);
  EXPECT_TRUE(fs::exists(ws() / "reports" / "roc_hand.tsv"));
}

TEST_F(CliTest, EvaluateOracleDumpAndMissingTags) {
  auto cfg = write_config({});
  ASSERT_EQ(ktrace({"prepare", "-c", cfg.string()}).code, 0);
  std::vector<PredictionRecord> recs;
  for (int u = 1; u <= 6; ++u)
    for (int t = 1; t <= 6; ++t) {
      int y = (u + t) % 3 == 0;
      recs.push_back({std::to_string(u), t, 0, y, y ? 0.999 : 0.001, "oracle"});
    }
  write_dump("oracle", recs);
  auto r = ktrace({"evaluate", "-c", cfg.string(), "--tags", "oracle,ghost"});
  EXPECT_EQ(r.code, 1);  // ghost was skipped
  EXPECT_NE(r.err.find("ghost"), std::string::npos);
  auto m = json::parse(read_file(ws() / "reports" / "metrics.json"))["models"][0];
  EXPECT_EQ(m["classification"]["auc"], 1.0);
  for (const auto& [profile, row] : m["stage_errors"]["profiles"].items())
    for (const char* s : {"early", "middle", "late"})
      if (!row[s].is_null()) EXPECT_EQ(row[s]["error"], 0.0) << profile << " " << s;

  r = ktrace({"evaluate", "-c", cfg.string(), "--tags", "ghost"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("no prediction dumps"), std::string::npos);
}

TEST_F(CliTest, EvaluateRefusesForeignVocabulary) {
  auto cfg = write_config({});
  ASSERT_EQ(ktrace({"prepare", "-c", cfg.string()}).code, 0);
  std::ostringstream os;
  write_predictions(os, std::vector<PredictionRecord>{{"1", 1, 0, 1, 0.7, "x"}, {"1", 2, 0, 0, 0.2, "x"}},
                    std::string(64, 'a'));
  write_file_atomic(ws() / "predictions" / "x.tsv", os.str());
  auto r = ktrace({"evaluate", "-c", cfg.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("different vocabulary"), std::string::npos);
}

TEST_F(CliTest, ConcurrentInvocationIsRejected) {
  auto cfg = write_config({});
  ASSERT_EQ(ktrace({"prepare", "-c", cfg.string()}).code, 0);
  int fd = ::open((ws() / ".lock").c_str(), O_RDWR);
  ASSERT_GE(fd, 0);
  ASSERT_EQ(::flock(fd, LOCK_EX | LOCK_NB), 0);
  auto r = ktrace({"prepare", "-c", cfg.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("in use"), std::string::npos);
  ::close(fd);
  EXPECT_EQ(ktrace({"prepare", "-c", cfg.string()}).code, 0);
}

TEST_F(CliTest, ProbeAgainstMockEndpoint) {
  testing::MockEndpoint mock;
  auto cfg = write_config({{"probe", {{"endpoint", mock.url()}, {"max_students", 2}, {"backoff_seconds", 0.0}}},
                           {"split", {{"train", 0.5}, {"val", 0.25}, {"test", 0.25}}}});
  ASSERT_EQ(ktrace({"prepare", "-c", cfg.string()}).code, 0);

  std::ifstream in(ws() / "data" / "test.tsv");
  auto test = read_sequences(in);
  ASSERT_GE(test.size(), 2u);
  std::size_t expected = (test[0].size() - 1) + (test[1].size() - 1);

  auto r = ktrace({"probe", "-c", cfg.string(), "--tag", "zs"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream d(ws() / "predictions" / "zs.tsv");
  auto dump = read_predictions(d);
  EXPECT_EQ(dump.records.size(), expected);
  EXPECT_EQ(dump.vocab_hash, vocab_hash());
  EXPECT_EQ(mock.requests(), expected);

  auto before = read_file(ws() / "predictions" / "zs.tsv");
  r = ktrace({"probe", "-c", cfg.string(), "--tag", "zs"});
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(mock.requests(), expected);  // warm cache
  EXPECT_EQ(read_file(ws() / "predictions" / "zs.tsv"), before);

  r = ktrace({"probe", "-c", cfg.string(), "--tag", "zs", "--double-run", "--mastery"});
  ASSERT_EQ(r.code, 0) << r.err;
  auto st = json::parse(read_file(ws() / "probe" / "zs.stability.json"));
  EXPECT_EQ(st["differing"], 0);
  EXPECT_EQ(st["max_abs_delta"], 0.0);
  EXPECT_EQ(st["compared"], expected);
  EXPECT_TRUE(fs::exists(ws() / "trajectories" / "zs.tsv"));

  r = ktrace({"evaluate", "-c", cfg.string(), "--tags", "zs"});
  EXPECT_EQ(r.code, 0) << r.err;
  auto m = json::parse(read_file(ws() / "reports" / "metrics.json"))["models"][0];
  EXPECT_TRUE(m.contains("coherence"));
}

TEST_F(CliTest, ProbeEndpointDownFailsFast) {
  auto cfg = write_config({{"probe", {{"endpoint", "http://127.0.0.1:9"}, {"max_retries", 0}, {"max_students", 1}}}});
  ASSERT_EQ(ktrace({"prepare", "-c", cfg.string()}).code, 0);
  auto r = ktrace({"probe", "-c", cfg.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("cannot reach"), std::string::npos);
  EXPECT_FALSE(fs::exists(ws() / "predictions" / "llm.tsv"));
}

TEST_F(CliTest, PredictRefusesStaleCheckpoint) {
  auto cfg = write_config({});
  ASSERT_EQ(ktrace({"prepare", "-c", cfg.string()}).code, 0);
  ASSERT_EQ(ktrace({"train", "-c", cfg.string()}).code, 0);
  // re-prepare with renamed skills: new vocabulary, old checkpoint
  auto csv = read_file(toy_csv());
  for (auto pos = csv.find("Skill A"); pos != std::string::npos; pos = csv.find("Skill A", pos))
    csv.replace(pos, 7, "Skill Z");
  write_file_atomic(dir_ / "log2.csv", csv);
  ASSERT_EQ(ktrace({"prepare", "-c", cfg.string(), "--set", "paths.raw=" + (dir_ / "log2.csv").string()}).code, 0);
  auto r = ktrace({"predict", "-c", cfg.string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("vocab"), std::string::npos);
}

TEST_F(CliTest, GradcheckAndSynth) {
  auto r = ktrace({"gradcheck"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("[ok]"), std::string::npos);
  auto cfg = write_config({{"synth", {{"n_students", 30}, {"mean_length", 8}}}});
  r = ktrace({"synth", "-c", cfg.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(ws() / "synth" / "interactions.csv"));
  EXPECT_TRUE(fs::exists(ws() / "synth" / "oracle.tsv"));
  EXPECT_EQ(ktrace({"synth", "-c", cfg.string(), "--set", "synth.p_slip=0.6"}).code, 2);
}

}  // namespace
}  // namespace kt::cli
