#pragma once

// Synthetic learner corpora from Bayesian knowledge tracing without
// forgetting, with the exact forward-filter probability of every response.

#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "kt/ingest.hpp"

namespace kt::synth {

struct SkillParams {
  double p_init = 0.3;
  double p_learn = 0.15;
  double p_guess = 0.2;
  double p_slip = 0.1;

  /// P(correct) given the probability that the skill is mastered.
  double emit(double mastered) const { return mastered * (1.0 - p_slip) + (1.0 - mastered) * p_guess; }
};

/// Each step practices a uniformly drawn skill. Sequence lengths are uniform
/// on [min_length, 2 * mean_length - min_length].
struct GenerativeSpec {
  std::vector<SkillParams> skills;
  int n_students = 2000;
  int mean_length = 40;
  int min_length = 3;
  std::uint64_t seed = 7;

  int num_skills() const { return static_cast<int>(skills.size()); }

  /// Throws ConfigError when a probability is outside [0, 1], guess or slip
  /// is not below 0.5, or the length range is empty.
  void validate() const;

  /// K identical skills.
  static GenerativeSpec uniform(int K, const SkillParams& params, int n_students, int mean_length,
                                std::uint64_t seed);

  /// K=5, p_init 0.3, p_learn 0.15, guess 0.2, slip 0.1, 2000 students, mean length 40, seed 7.
  static GenerativeSpec reference();
};

nlohmann::json to_json(const GenerativeSpec& spec);
GenerativeSpec spec_from_json(const nlohmann::json& j);

struct SyntheticStudent {
  StudentSequence sequence;
  std::vector<std::uint8_t> mastered;  // latent state of the practiced skill when answering
  std::vector<double> oracle;          // P(correct at t | steps 0..t-1)
};

struct Corpus {
  GenerativeSpec spec;
  std::vector<SyntheticStudent> students;

  std::vector<StudentSequence> sequences() const;
};

/// Seed-deterministic; each student draws from its own derived stream.
Corpus generate(const GenerativeSpec& spec);

/// Exact P(correct | history) at every step of a sequence.
std::vector<double> forward_filter(const GenerativeSpec& spec, std::span<const Step> steps);

/// AUC of the oracle on its own observations, optionally restricted to steps
/// t >= min_step of the named students.
double oracle_auc(const Corpus& corpus, int min_step = 0,
                  const std::vector<std::string>* only_users = nullptr);

/// Raw interaction log in the default column layout, consumable by prepare.
void write_raw_csv(std::ostream& out, const Corpus& corpus);

/// "user_id\tt\tskill\tcorrect\tmastered\tp_oracle" rows.
void write_oracle(std::ostream& out, const Corpus& corpus);

}  // namespace kt::synth
