#include "kt/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_set>

#include "kt/util.hpp"

namespace kt {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::optional<std::int64_t> parse_int(std::string_view s) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::size_t column_of(const std::vector<std::string>& header, const std::string& name) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw ConfigError("missing required column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

}  // namespace

std::vector<std::string> split_delimited(const std::string& line, char delim) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delim) {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r' || i + 1 != line.size()) {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

ParseResult parse_interactions(std::istream& source, const ColumnMapping& columns) {
  std::string line;
  if (!std::getline(source, line)) throw ConfigError("input has no header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  auto header = split_delimited(line, columns.delimiter);
  for (auto& h : header) h = std::string(trim(h));

  const std::size_t c_order = column_of(header, columns.order_id);
  const std::size_t c_user = column_of(header, columns.user_id);
  const std::size_t c_problem = column_of(header, columns.problem_id);
  const std::size_t c_correct = column_of(header, columns.correct);
  const std::size_t c_skill = column_of(header, columns.skill_id);
  const std::size_t c_name = column_of(header, columns.skill_name);

  ParseResult out;
  std::size_t lineno = 1;
  while (std::getline(source, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto fields = split_delimited(line, columns.delimiter);
    auto reject = [&](std::string reason) {
      out.rejects.push_back({lineno, std::move(reason), line});
    };
    if (fields.size() < header.size()) {
      reject("expected " + std::to_string(header.size()) + " fields, got " +
             std::to_string(fields.size()));
      continue;
    }
    InteractionRecord rec;
    rec.line = lineno;
    rec.row_key = std::hash<std::string>{}(line);
    rec.user_id = std::string(trim(fields[c_user]));
    rec.problem_id = std::string(trim(fields[c_problem]));
    rec.skill_raw = std::string(trim(fields[c_skill]));
    rec.skill_name = std::string(trim(fields[c_name]));

    auto order = trim(fields[c_order]);
    if (!order.empty()) {
      rec.order_id = parse_int(order);
      if (!rec.order_id) {
        reject("unparseable order_id '" + std::string(order) + "'");
        continue;
      }
    }
    auto correct = trim(fields[c_correct]);
    if (!correct.empty()) {
      auto v = parse_int(correct);
      if (!v || (*v != 0 && *v != 1)) {
        reject("correct must be 0 or 1, got '" + std::string(correct) + "'");
        continue;
      }
      rec.correct = static_cast<int>(*v);
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

bool id_less(const std::string& a, const std::string& b) {
  auto na = parse_int(a);
  auto nb = parse_int(b);
  if (na && nb) return *na != *nb ? *na < *nb : a < b;
  if (na != nb) return na.has_value();
  return a < b;
}

FilterResult filter_and_order(const std::vector<InteractionRecord>& records) {
  FilterResult result;
  auto& rep = result.report;
  rep.input_records = records.size();

  std::map<std::string, std::vector<RawStep>, decltype(&id_less)> by_user(&id_less);
  std::unordered_set<std::uint64_t> seen_rows;
  for (const auto& r : records) {
    if (!r.order_id || !r.correct || r.skill_raw.empty() || r.user_id.empty() ||
        r.problem_id.empty()) {
      ++rep.missing;
      continue;
    }
    if (r.skill_raw.find(',') != std::string::npos) {
      ++rep.multi_skill;
      continue;
    }
    if (!seen_rows.insert(r.row_key).second) {
      ++rep.duplicates;
      continue;
    }
    by_user[r.user_id].push_back(
        RawStep{*r.order_id, r.problem_id, r.skill_raw, r.skill_name, *r.correct, r.line});
  }

  for (auto& [user, steps] : by_user) {
    if (steps.size() < kMinSequenceLength) {
      ++rep.short_students;
      rep.short_records += steps.size();
      continue;
    }
    std::sort(steps.begin(), steps.end(), [](const RawStep& a, const RawStep& b) {
      if (a.order_id != b.order_id) return a.order_id < b.order_id;
      if (a.quiz != b.quiz) return id_less(a.quiz, b.quiz);
      return a.line < b.line;
    });
    rep.output_records += steps.size();
    result.sequences.push_back(RawSequence{user, std::move(steps)});
  }
  rep.output_students = result.sequences.size();
  return result;
}

std::vector<InteractionRecord> flatten(const std::vector<RawSequence>& sequences) {
  std::vector<InteractionRecord> out;
  for (const auto& seq : sequences) {
    for (const auto& s : seq.steps) {
      InteractionRecord r;
      r.order_id = s.order_id;
      r.user_id = seq.user_id;
      r.problem_id = s.quiz;
      r.skill_raw = s.skill;
      r.skill_name = s.skill_name;
      r.correct = s.correct;
      r.line = s.line;
      std::ostringstream key;
      key << seq.user_id << '\x1f' << s.order_id << '\x1f' << s.quiz << '\x1f' << s.skill << '\x1f'
          << s.correct << '\x1f' << s.line;
      r.row_key = std::hash<std::string>{}(key.str());
      out.push_back(std::move(r));
    }
  }
  return out;
}

int Vocab::skill_index(const std::string& raw) const {
  auto it = skill_lookup_.find(raw);
  if (it == skill_lookup_.end()) throw ConfigError("unknown skill id '" + raw + "'");
  return it->second;
}

int Vocab::quiz_index(const std::string& raw) const {
  auto it = quiz_lookup_.find(raw);
  if (it == quiz_lookup_.end()) throw ConfigError("unknown quiz id '" + raw + "'");
  return it->second;
}

std::optional<int> Vocab::find_skill(const std::string& raw) const {
  auto it = skill_lookup_.find(raw);
  if (it == skill_lookup_.end()) return std::nullopt;
  return it->second;
}

int Vocab::add_skill(const std::string& raw, const std::string& name) {
  auto [it, inserted] = skill_lookup_.emplace(raw, num_skills());
  if (inserted) {
    skill_ids_.push_back(raw);
    skill_names_.push_back(name.empty() ? raw : name);
  }
  return it->second;
}

int Vocab::add_quiz(const std::string& raw) {
  auto [it, inserted] = quiz_lookup_.emplace(raw, num_quizzes());
  if (inserted) quiz_ids_.push_back(raw);
  return it->second;
}

nlohmann::json Vocab::to_json() const {
  return {{"skill_ids", skill_ids_}, {"skill_names", skill_names_}, {"quiz_ids", quiz_ids_}};
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  Vocab v;
  const auto ids = j.at("skill_ids").get<std::vector<std::string>>();
  const auto names = j.at("skill_names").get<std::vector<std::string>>();
  if (ids.size() != names.size()) throw ConfigError("vocab: skill id/name length mismatch");
  for (std::size_t i = 0; i < ids.size(); ++i) v.add_skill(ids[i], names[i]);
  for (const auto& q : j.at("quiz_ids").get<std::vector<std::string>>()) v.add_quiz(q);
  if (v.num_skills() != static_cast<int>(ids.size())) throw ConfigError("vocab: duplicate skill ids");
  return v;
}

std::string Vocab::hash() const { return sha256_hex(to_json().dump()); }

Vocab build_vocab(const std::vector<RawSequence>& sequences) {
  Vocab v;
  for (const auto& seq : sequences) {
    for (const auto& s : seq.steps) {
      v.add_skill(s.skill, s.skill_name);
      v.add_quiz(s.quiz);
    }
  }
  return v;
}

std::vector<StudentSequence> index_sequences(const std::vector<RawSequence>& raw,
                                             const Vocab& vocab) {
  std::vector<StudentSequence> out;
  out.reserve(raw.size());
  for (const auto& seq : raw) {
    StudentSequence s{seq.user_id, {}};
    s.steps.reserve(seq.steps.size());
    for (const auto& r : seq.steps) {
      s.steps.push_back({vocab.skill_index(r.skill), vocab.quiz_index(r.quiz), r.correct});
    }
    out.push_back(std::move(s));
  }
  return out;
}

DatasetSplit split_students(const std::vector<StudentSequence>& sequences,
                            const SplitRatios& ratios, std::uint64_t seed) {
  const double total = ratios.train + ratios.val + ratios.test;
  if (std::abs(total - 1.0) > 1e-9 || ratios.train < 0 || ratios.val < 0 || ratios.test < 0) {
    throw ConfigError("split ratios must be non-negative and sum to 1");
  }
  const std::size_t n = sequences.size();
  if (n < 3) throw ConfigError("need at least 3 students to form train/val/test partitions");

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);

  const auto n_train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.train));
  const auto n_val = std::min(n - n_train,
                              static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios.val)));
  DatasetSplit split;
  split.seed = seed;
  split.ratios = ratios;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = sequences[order[i]];
    if (i < n_train) {
      split.train.push_back(s);
    } else if (i < n_train + n_val) {
      split.val.push_back(s);
    } else {
      split.test.push_back(s);
    }
  }
  return split;
}

namespace {

DatasetStats finish(std::size_t records, std::size_t students, std::size_t quizzes,
                    std::size_t skills, std::size_t correct) {
  DatasetStats s;
  s.records = records;
  s.students = students;
  s.quizzes = quizzes;
  s.skills = skills;
  s.correct = correct;
  s.incorrect = records - correct;
  auto avg = [&](std::size_t d) { return d == 0 ? 0.0 : static_cast<double>(records) / d; };
  s.per_student = avg(students);
  s.per_quiz = avg(quizzes);
  s.per_skill = avg(skills);
  return s;
}

}  // namespace

DatasetStats summarize(std::span<const StudentSequence> sequences) {
  std::set<int> quizzes, skills;
  std::size_t records = 0, correct = 0;
  for (const auto& seq : sequences) {
    for (const auto& s : seq.steps) {
      quizzes.insert(s.quiz);
      skills.insert(s.skill);
      correct += static_cast<std::size_t>(s.correct);
      ++records;
    }
  }
  return finish(records, sequences.size(), quizzes.size(), skills.size(), correct);
}

DatasetStats summarize(std::span<const InteractionRecord> records) {
  std::set<std::string> users, quizzes, skills;
  std::size_t correct = 0;
  for (const auto& r : records) {
    users.insert(r.user_id);
    quizzes.insert(r.problem_id);
    for (const auto& sk : split(r.skill_raw, ',')) {
      auto t = trim(sk);
      if (!t.empty()) skills.emplace(t);
    }
    if (r.correct.value_or(0) == 1) ++correct;
  }
  return finish(records.size(), users.size(), quizzes.size(), skills.size(), correct);
}

nlohmann::json to_json(const DatasetStats& s) {
  return {{"records", s.records},
          {"students", s.students},
          {"quizzes", s.quizzes},
          {"skills", s.skills},
          {"avg_per_student", s.per_student},
          {"avg_per_quiz", s.per_quiz},
          {"avg_per_skill", s.per_skill},
          {"correct", s.correct},
          {"incorrect", s.incorrect}};
}

nlohmann::json to_json(const FilterReport& r) {
  return {{"input_records", r.input_records},   {"dropped_missing", r.missing},
          {"dropped_multi_skill", r.multi_skill}, {"dropped_duplicates", r.duplicates},
          {"dropped_short_students", r.short_students},
          {"dropped_short_records", r.short_records},
          {"output_records", r.output_records}, {"output_students", r.output_students}};
}

void write_sequences(std::ostream& out, std::span<const StudentSequence> sequences) {
  for (const auto& seq : sequences) {
    out << seq.user_id;
    for (const auto& s : seq.steps) out << '\t' << s.skill << ',' << s.quiz << ',' << s.correct;
    out << '\n';
  }
}

std::vector<StudentSequence> read_sequences(std::istream& in) {
  std::vector<StudentSequence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    StudentSequence seq{fields[0], {}};
    for (std::size_t i = 1; i < fields.size(); ++i) {
      auto parts = split(fields[i], ',');
      std::optional<std::int64_t> s, q, y;
      if (parts.size() == 3) {
        s = parse_int(parts[0]);
        q = parse_int(parts[1]);
        y = parse_int(parts[2]);
      }
      if (!s || !q || !y || *s < 0 || *q < 0 || (*y != 0 && *y != 1)) {
        throw ConfigError("sequence file line " + std::to_string(lineno) + ": bad triplet '" +
                          fields[i] + "'");
      }
      seq.steps.push_back({static_cast<int>(*s), static_cast<int>(*q), static_cast<int>(*y)});
    }
    out.push_back(std::move(seq));
  }
  return out;
}

void write_rejects(std::ostream& out, std::span<const RejectedRow> rejects) {
  out << "line\treason\trow\n";
  for (const auto& r : rejects) {
    std::string row = r.text;
    std::replace(row.begin(), row.end(), '\t', ' ');
    out << r.line << '\t' << r.reason << '\t' << row << '\n';
  }
}

}  // namespace kt
