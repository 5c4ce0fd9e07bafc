#include "kt/ingest.hpp"

#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "kt/util.hpp"

namespace kt {
namespace {

const char* kHeader = "order_id,user_id,problem_id,correct,skill_id,skill_name\n";

ParseResult parse(const std::string& body) {
  std::istringstream in(std::string(kHeader) + body);
  return parse_interactions(in, ColumnMapping{});
}

TEST(ParseInteractions, SingleValidRow) {
  auto r = parse("1,u1,q1,1,10,Addition\n");
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_TRUE(r.rejects.empty());
  EXPECT_EQ(r.records[0].user_id, "u1");
  EXPECT_EQ(*r.records[0].correct, 1);
  EXPECT_EQ(*r.records[0].order_id, 1);
}

TEST(ParseInteractions, CorrectnessOutsideDomainIsRejected) {
  auto r = parse("1,u1,q1,2,10,Addition\n");
  EXPECT_TRUE(r.records.empty());
  ASSERT_EQ(r.rejects.size(), 1u);
  EXPECT_EQ(r.rejects[0].line, 2u);
}

TEST(ParseInteractions, MissingColumnIsConfigError) {
  std::istringstream in("order_id,user_id,correct,skill_id,skill_name\n1,u,1,1,a\n");
  EXPECT_THROW(parse_interactions(in, ColumnMapping{}), ConfigError);
}

TEST(ParseInteractions, QuotedMultiSkillFieldAndTabs) {
  auto r = parse("5,u1,q1,0,\"10,12\",\"Fractions, Decimals\"\n");
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.records[0].skill_raw, "10,12");
  EXPECT_EQ(r.records[0].skill_name, "Fractions, Decimals");

  std::istringstream tsv("order_id\tuser_id\tproblem_id\tcorrect\tskill_id\tskill_name\n3\tu\tq\t1\t7\tX\n");
  ColumnMapping m;
  m.delimiter = '\t';
  EXPECT_EQ(parse_interactions(tsv, m).records.size(), 1u);
}

TEST(ParseInteractions, EmptyFieldsAreKeptForTheFilter) {
  auto r = parse("1,u1,q1,,10,A\n,u1,q1,1,10,A\n2,u1,q1,1,,\n");
  EXPECT_EQ(r.records.size(), 3u);
  EXPECT_TRUE(r.rejects.empty());
  auto f = filter_and_order(r.records);
  EXPECT_EQ(f.report.missing, 3u);
}

TEST(FilterAndOrder, DropsShortStudents) {
  auto r = parse("1,u1,q1,1,1,A\n2,u1,q2,0,1,A\n");
  auto f = filter_and_order(r.records);
  EXPECT_TRUE(f.sequences.empty());
  EXPECT_EQ(f.report.short_students, 1u);
}

TEST(FilterAndOrder, DropsMultiSkillRows) {
  auto r = parse("1,u1,q1,1,\"10,12\",A\n2,u1,q2,0,1,A\n3,u1,q3,0,1,A\n4,u1,q4,1,1,A\n");
  auto f = filter_and_order(r.records);
  EXPECT_EQ(f.report.multi_skill, 1u);
  ASSERT_EQ(f.sequences.size(), 1u);
  EXPECT_EQ(f.sequences[0].steps.size(), 3u);
}

TEST(FilterAndOrder, OrdersByOrderIdThenProblemThenLine) {
  auto r = parse(
      "30,u1,q9,1,1,A\n"
      "10,u1,q5,1,1,A\n"
      "10,u1,q2,0,1,A\n"
      "20,u1,q1,1,1,A\n"
      "20,u1,q1,0,1,A\n");
  auto f = filter_and_order(r.records);
  ASSERT_EQ(f.sequences.size(), 1u);
  const auto& s = f.sequences[0].steps;
  ASSERT_EQ(s.size(), 5u);
  EXPECT_EQ(s[0].quiz, "q2");
  EXPECT_EQ(s[1].quiz, "q5");
  EXPECT_EQ(s[2].correct, 1);  // earlier line wins the (20, q1) tie
  EXPECT_EQ(s[3].correct, 0);
  EXPECT_EQ(s[4].quiz, "q9");
}

TEST(FilterAndOrder, ExactDuplicateRowsCollapse) {
  auto r = parse("1,u1,q1,1,1,A\n1,u1,q1,1,1,A\n2,u1,q2,1,1,A\n3,u1,q3,1,1,A\n");
  auto f = filter_and_order(r.records);
  EXPECT_EQ(f.report.duplicates, 1u);
  EXPECT_EQ(f.report.output_records, 3u);
}

TEST(FilterAndOrder, StudentsSortedNumerically) {
  auto r = parse(
      "1,10,q,1,1,A\n2,10,q,1,1,A\n3,10,q,1,1,A\n"
      "4,9,q,1,1,A\n5,9,q,1,1,A\n6,9,q,1,1,A\n");
  auto f = filter_and_order(r.records);
  ASSERT_EQ(f.sequences.size(), 2u);
  EXPECT_EQ(f.sequences[0].user_id, "9");
  EXPECT_EQ(f.sequences[1].user_id, "10");
}

std::string random_log(Rng& rng, int rows) {
  std::ostringstream out;
  for (int i = 0; i < rows; ++i) {
    const auto user = rng.below(12);
    const auto skill = rng.below(5);
    std::string skill_field = rng.bernoulli(0.1) ? "\"1,2\"" : (rng.bernoulli(0.05) ? "" : std::to_string(skill));
    out << rng.below(40) << ',' << user << ",q" << rng.below(20) << ',' << rng.below(2) << ','
        << skill_field << ",S" << skill << '\n';
  }
  return out.str();
}

TEST(FilterAndOrder, IdempotentAndOrderedOnRandomLogs) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto r = parse(random_log(rng, 200));
    auto once = filter_and_order(r.records);
    auto twice = filter_and_order(flatten(once.sequences));
    ASSERT_EQ(once.sequences.size(), twice.sequences.size());
    for (std::size_t i = 0; i < once.sequences.size(); ++i) {
      const auto& a = once.sequences[i];
      const auto& b = twice.sequences[i];
      EXPECT_EQ(a.user_id, b.user_id);
      ASSERT_EQ(a.steps.size(), b.steps.size());
      EXPECT_GE(a.steps.size(), kMinSequenceLength);
      for (std::size_t t = 0; t < a.steps.size(); ++t) {
        EXPECT_EQ(a.steps[t].line, b.steps[t].line);
        if (t > 0) {
          const auto& p = a.steps[t - 1];
          const auto& c = a.steps[t];
          const bool ordered = p.order_id < c.order_id ||
                               (p.order_id == c.order_id &&
                                (id_less(p.quiz, c.quiz) || (p.quiz == c.quiz && p.line < c.line)));
          EXPECT_TRUE(ordered);
        }
      }
    }
    EXPECT_EQ(twice.report.missing + twice.report.multi_skill + twice.report.short_students, 0u);
  }
}

std::vector<RawSequence> raw_two_skills() {
  RawSequence s{"1", {}};
  s.steps.push_back({1, "q1", "A", "Skill A", 1, 2});
  s.steps.push_back({2, "q2", "B", "Skill B", 0, 3});
  s.steps.push_back({3, "q1", "A", "Skill A", 1, 4});
  return {s};
}

TEST(BuildVocab, FirstAppearanceOrder) {
  auto v = build_vocab(raw_two_skills());
  EXPECT_EQ(v.num_skills(), 2);
  EXPECT_EQ(v.skill_index("A"), 0);
  EXPECT_EQ(v.skill_index("B"), 1);
  EXPECT_EQ(v.skill_name(1), "Skill B");
  EXPECT_EQ(v.num_quizzes(), 2);
}

TEST(BuildVocab, DeterministicAndSerializable) {
  auto a = build_vocab(raw_two_skills());
  auto b = build_vocab(raw_two_skills());
  EXPECT_TRUE(a == b);
  EXPECT_EQ(a.hash(), b.hash());
  auto c = Vocab::from_json(a.to_json());
  EXPECT_TRUE(a == c);
  EXPECT_THROW(a.skill_index("Z"), ConfigError);
}

std::vector<StudentSequence> students(int n, int len = 3) {
  std::vector<StudentSequence> out;
  for (int i = 0; i < n; ++i) {
    StudentSequence s{std::to_string(i), {}};
    for (int t = 0; t < len + i % 3; ++t) s.steps.push_back({t % 2, t, (i + t) % 2});
    out.push_back(s);
  }
  return out;
}

TEST(SplitStudents, TenStudentsGiveEightOneOne) {
  auto sp = split_students(students(10), SplitRatios{}, 3);
  EXPECT_EQ(sp.train.size(), 8u);
  EXPECT_EQ(sp.val.size(), 1u);
  EXPECT_EQ(sp.test.size(), 1u);
}

TEST(SplitStudents, SeedDeterministicAndDisjoint) {
  auto all = students(97);
  auto a = split_students(all, SplitRatios{}, 42);
  auto b = split_students(all, SplitRatios{}, 42);
  auto ids = [](const std::vector<StudentSequence>& v) {
    std::vector<std::string> out;
    for (const auto& s : v) out.push_back(s.user_id);
    return out;
  };
  EXPECT_EQ(ids(a.train), ids(b.train));
  EXPECT_EQ(ids(a.test), ids(b.test));

  std::set<std::string> seen;
  std::size_t records = 0;
  for (const auto* part : {&a.train, &a.val, &a.test}) {
    for (const auto& s : *part) {
      EXPECT_TRUE(seen.insert(s.user_id).second) << s.user_id << " appears twice";
      records += s.size();
    }
  }
  EXPECT_EQ(seen.size(), all.size());
  EXPECT_EQ(records, summarize(all).records);
  EXPECT_LE(std::abs(static_cast<double>(a.train.size()) - 0.8 * 97), 1.0);
  EXPECT_LE(std::abs(static_cast<double>(a.val.size()) - 0.1 * 97), 1.0);
  EXPECT_LE(std::abs(static_cast<double>(a.test.size()) - 0.1 * 97), 1.0);

  auto c = split_students(all, SplitRatios{}, 43);
  EXPECT_NE(ids(a.train), ids(c.train));
}

TEST(SplitStudents, TooFewStudents) {
  EXPECT_THROW(split_students(students(2), SplitRatios{}, 1), ConfigError);
  EXPECT_THROW(split_students(students(10), SplitRatios{0.5, 0.1, 0.1}, 1), ConfigError);
}

TEST(SplitStudents, FullDatasetCountsWithinOne) {
  auto sp = split_students(students(7981, 3), SplitRatios{}, 7);
  EXPECT_LE(std::abs(static_cast<double>(sp.train.size()) - 0.8 * 7981), 1.0);
  EXPECT_LE(std::abs(static_cast<double>(sp.val.size()) - 0.1 * 7981), 1.0);
  EXPECT_LE(std::abs(static_cast<double>(sp.test.size()) - 0.1 * 7981), 1.0);
}

TEST(Summarize, EmptyIsAllZero) {
  std::vector<StudentSequence> none;
  auto s = summarize(none);
  EXPECT_EQ(s.records, 0u);
  EXPECT_EQ(s.students, 0u);
  EXPECT_EQ(s.per_student, 0.0);
  EXPECT_EQ(s.per_skill, 0.0);
}

TEST(Summarize, AverageInteractionsPerStudent) {
  std::vector<StudentSequence> v(2);
  v[0].steps.assign(3, Step{0, 0, 1});
  v[1].steps.assign(5, Step{1, 1, 0});
  auto s = summarize(v);
  EXPECT_DOUBLE_EQ(s.per_student, 4.0);
  EXPECT_EQ(s.correct, 3u);
  EXPECT_EQ(s.incorrect, 5u);
  EXPECT_EQ(s.correct + s.incorrect, s.records);
  EXPECT_EQ(s.skills, 2u);
}

TEST(SequenceFile, RoundTrip) {
  auto all = students(5);
  std::stringstream ss;
  write_sequences(ss, all);
  auto back = read_sequences(ss);
  ASSERT_EQ(back.size(), all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    EXPECT_EQ(back[i].user_id, all[i].user_id);
    ASSERT_EQ(back[i].size(), all[i].size());
    for (std::size_t t = 0; t < all[i].size(); ++t) {
      EXPECT_EQ(back[i].steps[t].skill, all[i].steps[t].skill);
      EXPECT_EQ(back[i].steps[t].quiz, all[i].steps[t].quiz);
      EXPECT_EQ(back[i].steps[t].correct, all[i].steps[t].correct);
    }
  }
  std::istringstream bad("u1\t1,2,3\n");
  EXPECT_THROW(read_sequences(bad), ConfigError);
}

}  // namespace
}  // namespace kt
