#include "kt/synth.hpp"

#include <ostream>
#include <set>

#include "kt/eval.hpp"
#include "kt/util.hpp"

namespace kt::synth {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void check_probability(double p, const std::string& what) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(what + " must lie in [0, 1], got " + format_double(p));
}

}  // namespace

void GenerativeSpec::validate() const {
  if (skills.empty()) throw ConfigError("synthetic spec needs at least one skill");
  for (std::size_t k = 0; k < skills.size(); ++k) {
    const auto& s = skills[k];
    const std::string at = " of skill " + std::to_string(k);
    check_probability(s.p_init, "p_init" + at);
    check_probability(s.p_learn, "p_learn" + at);
    check_probability(s.p_guess, "p_guess" + at);
    check_probability(s.p_slip, "p_slip" + at);
    if (s.p_guess >= 0.5) throw ConfigError("p_guess" + at + " must be below 0.5");
    if (s.p_slip >= 0.5) throw ConfigError("p_slip" + at + " must be below 0.5");
  }
  if (n_students < 1) throw ConfigError("n_students must be positive");
  if (min_length < 1) throw ConfigError("min_length must be positive");
  if (mean_length < min_length) throw ConfigError("mean_length must be at least min_length");
}

GenerativeSpec GenerativeSpec::uniform(int K, const SkillParams& params, int n_students, int mean_length,
                                       std::uint64_t seed) {
  GenerativeSpec s;
  s.skills.assign(static_cast<std::size_t>(std::max(K, 0)), params);
  s.n_students = n_students;
  s.mean_length = mean_length;
  s.seed = seed;
  return s;
}

GenerativeSpec GenerativeSpec::reference() { return uniform(5, SkillParams{0.3, 0.15, 0.2, 0.1}, 2000, 40, 7); }

nlohmann::json to_json(const GenerativeSpec& spec) {
  nlohmann::json skills = nlohmann::json::array();
  for (const auto& s : spec.skills)
    skills.push_back({{"p_init", s.p_init}, {"p_learn", s.p_learn}, {"p_guess", s.p_guess}, {"p_slip", s.p_slip}});
  return {{"skills", skills},
          {"n_students", spec.n_students},
          {"mean_length", spec.mean_length},
          {"min_length", spec.min_length},
          {"seed", spec.seed}};
}

GenerativeSpec spec_from_json(const nlohmann::json& j) {
  GenerativeSpec s;
  try {
    for (const auto& k : j.at("skills"))
      s.skills.push_back({k.at("p_init").get<double>(), k.at("p_learn").get<double>(),
                          k.at("p_guess").get<double>(), k.at("p_slip").get<double>()});
    s.n_students = j.at("n_students").get<int>();
    s.mean_length = j.at("mean_length").get<int>();
    s.min_length = j.value("min_length", 3);
    s.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<StudentSequence> Corpus::sequences() const {
  std::vector<StudentSequence> out;
  out.reserve(students.size());
  for (const auto& s : students) out.push_back(s.sequence);
  return out;
}

std::vector<double> forward_filter(const GenerativeSpec& spec, std::span<const Step> steps) {
  std::vector<double> m;
  for (const auto& s : spec.skills) m.push_back(s.p_init);
  std::vector<double> out;
  out.reserve(steps.size());
  for (const Step& st : steps) {
    const auto& prm = spec.skills.at(static_cast<std::size_t>(st.skill));
    double& mk = m[static_cast<std::size_t>(st.skill)];
    double p = prm.emit(mk);
    out.push_back(p);
    double post = st.correct ? mk * (1.0 - prm.p_slip) / p : mk * prm.p_slip / (1.0 - p);
    mk = post + (1.0 - post) * prm.p_learn;
  }
  return out;
}

Corpus generate(const GenerativeSpec& spec) {
  spec.validate();
  Corpus c;
  c.spec = spec;
  const int K = spec.num_skills();
  const auto span = static_cast<std::uint64_t>(2 * (spec.mean_length - spec.min_length) + 1);
  for (int i = 0; i < spec.n_students; ++i) {
    Rng rng(splitmix64(spec.seed ^ splitmix64(static_cast<std::uint64_t>(i))));
    SyntheticStudent s;
    s.sequence.user_id = std::to_string(i + 1);
    std::vector<std::uint8_t> state;
    for (const auto& prm : spec.skills) state.push_back(rng.bernoulli(prm.p_init));
    const int len = spec.min_length + static_cast<int>(rng.below(span));
    for (int t = 0; t < len; ++t) {
      int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(K)));
      const auto& prm = spec.skills[static_cast<std::size_t>(k)];
      auto& known = state[static_cast<std::size_t>(k)];
      bool correct = known ? !rng.bernoulli(prm.p_slip) : rng.bernoulli(prm.p_guess);
      int item = static_cast<int>(rng.below(10));
      s.mastered.push_back(known);
      s.sequence.steps.push_back({k, k * 10 + item, correct ? 1 : 0});
      if (!known && rng.bernoulli(prm.p_learn)) known = 1;
    }
    s.oracle = forward_filter(spec, s.sequence.steps);
    c.students.push_back(std::move(s));
  }
  return c;
}

double oracle_auc(const Corpus& corpus, int min_step, const std::vector<std::string>* only_users) {
  std::set<std::string> keep;
  if (only_users) keep.insert(only_users->begin(), only_users->end());
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& s : corpus.students) {
    if (only_users && !keep.count(s.sequence.user_id)) continue;
    for (std::size_t t = static_cast<std::size_t>(std::max(min_step, 0)); t < s.oracle.size(); ++t) {
      scores.push_back(s.oracle[t]);
      labels.push_back(s.sequence.steps[t].correct);
    }
  }
  return eval::roc_auc(scores, labels).auc;
}

void write_raw_csv(std::ostream& out, const Corpus& corpus) {
  out << "order_id,user_id,problem_id,correct,skill_id,skill_name\n";
  long order = 1;
  for (const auto& s : corpus.students)
    for (const auto& st : s.sequence.steps)
      out << order++ << ',' << s.sequence.user_id << ',' << st.quiz << ',' << st.correct << ',' << st.skill
          << ",Synthetic skill " << st.skill << '\n';
}

void write_oracle(std::ostream& out, const Corpus& corpus) {
  out << "user_id\tt\tskill\tcorrect\tmastered\tp_oracle\n";
  for (const auto& s : corpus.students)
    for (std::size_t t = 0; t < s.oracle.size(); ++t) {
      const auto& st = s.sequence.steps[t];
      out << s.sequence.user_id << '\t' << t << '\t' << st.skill << '\t' << st.correct << '\t'
          << int{s.mastered[t]} << '\t' << format_double(s.oracle[t]) << '\n';
    }
}

}  // namespace kt::synth
