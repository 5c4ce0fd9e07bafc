#pragma once

// Interaction-log ingestion: CSV parsing, preprocessing filters, vocabulary
// construction, student-level splits and summary statistics.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace kt {

/// Header names of the required fields. Defaults follow the ASSISTments
/// 2009-2010 non-skill-builder export.
struct ColumnMapping {
  std::string order_id = "order_id";
  std::string user_id = "user_id";
  std::string problem_id = "problem_id";
  std::string correct = "correct";
  std::string skill_id = "skill_id";
  std::string skill_name = "skill_name";
  char delimiter = ',';
};

/// One logged attempt. Empty required fields stay empty / nullopt here and
/// are removed by filter_and_order as missing entries.
struct InteractionRecord {
  std::optional<std::int64_t> order_id;
  std::string user_id;
  std::string problem_id;
  std::string skill_raw;
  std::string skill_name;
  std::optional<int> correct;
  std::size_t line = 0;        // 1-based line in the source file
  std::uint64_t row_key = 0;   // hash of the full raw row, for exact-duplicate detection
};

struct RejectedRow {
  std::size_t line = 0;
  std::string reason;
  std::string text;
};

struct ParseResult {
  std::vector<InteractionRecord> records;
  std::vector<RejectedRow> rejects;
};

/// Throws ConfigError when a mapped column is absent from the header.
ParseResult parse_interactions(std::istream& source, const ColumnMapping& columns);

/// Splits one delimited line, honouring double-quoted fields.
std::vector<std::string> split_delimited(const std::string& line, char delim);

struct RawStep {
  std::int64_t order_id = 0;
  std::string quiz;
  std::string skill;
  std::string skill_name;
  int correct = 0;
  std::size_t line = 0;
};

struct RawSequence {
  std::string user_id;
  std::vector<RawStep> steps;
};

struct FilterReport {
  std::size_t input_records = 0;
  std::size_t missing = 0;
  std::size_t multi_skill = 0;
  std::size_t duplicates = 0;
  std::size_t short_students = 0;
  std::size_t short_records = 0;
  std::size_t output_records = 0;
  std::size_t output_students = 0;
};

struct FilterResult {
  std::vector<RawSequence> sequences;
  FilterReport report;
};

inline constexpr std::size_t kMinSequenceLength = 3;

/// Drops missing and multi-skill rows and exact duplicates, groups by
/// student, orders each student by (order_id, problem_id, line) and removes
/// students with fewer than three interactions. Students come out sorted by
/// id (numerically when both ids are integers).
FilterResult filter_and_order(const std::vector<InteractionRecord>& records);

/// Flattens sequences back into records (used to check filter idempotence).
std::vector<InteractionRecord> flatten(const std::vector<RawSequence>& sequences);

/// Numeric-aware id ordering: integers compare by value and sort before
/// non-integer ids, which compare lexicographically.
bool id_less(const std::string& a, const std::string& b);

/// Dense zero-based skill and quiz indices.
class Vocab {
 public:
  int num_skills() const { return static_cast<int>(skill_ids_.size()); }
  int num_quizzes() const { return static_cast<int>(quiz_ids_.size()); }

  int skill_index(const std::string& raw) const;
  int quiz_index(const std::string& raw) const;
  std::optional<int> find_skill(const std::string& raw) const;

  const std::string& skill_id(int index) const { return skill_ids_.at(index); }
  const std::string& skill_name(int index) const { return skill_names_.at(index); }
  const std::string& quiz_id(int index) const { return quiz_ids_.at(index); }

  int add_skill(const std::string& raw, const std::string& name);
  int add_quiz(const std::string& raw);

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);

  /// SHA-256 of the canonical JSON form.
  std::string hash() const;

  bool operator==(const Vocab& other) const {
    return skill_ids_ == other.skill_ids_ && skill_names_ == other.skill_names_ &&
           quiz_ids_ == other.quiz_ids_;
  }

 private:
  std::vector<std::string> skill_ids_;
  std::vector<std::string> skill_names_;
  std::vector<std::string> quiz_ids_;
  std::unordered_map<std::string, int> skill_lookup_;
  std::unordered_map<std::string, int> quiz_lookup_;
};

/// Indices assigned in first-appearance order over the given student order.
Vocab build_vocab(const std::vector<RawSequence>& sequences);

struct Step {
  int skill = 0;
  int quiz = 0;
  int correct = 0;
};

struct StudentSequence {
  std::string user_id;
  std::vector<Step> steps;

  std::size_t size() const { return steps.size(); }
};

std::vector<StudentSequence> index_sequences(const std::vector<RawSequence>& raw,
                                             const Vocab& vocab);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetSplit {
  std::vector<StudentSequence> train;
  std::vector<StudentSequence> val;
  std::vector<StudentSequence> test;
  std::uint64_t seed = 0;
  SplitRatios ratios;
};

/// Seeded shuffle of students followed by a contiguous partition. Sizes are
/// round(n * train) and round(n * val); test takes the remainder.
DatasetSplit split_students(const std::vector<StudentSequence>& sequences,
                            const SplitRatios& ratios, std::uint64_t seed);

struct DatasetStats {
  std::size_t records = 0;
  std::size_t students = 0;
  std::size_t quizzes = 0;
  std::size_t skills = 0;
  double per_student = 0.0;
  double per_quiz = 0.0;
  double per_skill = 0.0;
  std::size_t correct = 0;
  std::size_t incorrect = 0;
};

DatasetStats summarize(std::span<const StudentSequence> sequences);

/// Statistics of the unfiltered log. Multi-skill rows count every listed skill.
DatasetStats summarize(std::span<const InteractionRecord> records);

nlohmann::json to_json(const DatasetStats& s);
nlohmann::json to_json(const FilterReport& r);

/// Canonical sequence file: one student per line, user id followed by
/// tab-separated "skill,quiz,correct" triplets.
void write_sequences(std::ostream& out, std::span<const StudentSequence> sequences);
std::vector<StudentSequence> read_sequences(std::istream& in);

void write_rejects(std::ostream& out, std::span<const RejectedRow> rejects);

}  // namespace kt
