#pragma once

// Evaluation battery over prediction dumps and mastery trajectories:
// ROC/AUC, thresholded confusion metrics, Youden's J, stage errors by learner
// profile, temporal coherence (volatility, inconsistency) and heatmaps.

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kt/predictions.hpp"

namespace kt::eval {

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;  // predict positive iff score >= threshold
};

struct ThresholdAnalysis {
  std::vector<RocPoint> roc;  // from (0, 0) at +inf to (1, 1) at -inf
  double auc = 0.0;
  double youden_threshold = 0.0;
  double youden_j = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
};

/// Mann-Whitney U / (n1 n0) with midranks for tied scores.
double rank_auc(std::span<const double> scores, std::span<const int> labels);

/// Throws std::invalid_argument("AUC undefined ...") unless both classes occur.
ThresholdAnalysis roc_auc(std::span<const double> scores, std::span<const int> labels);

/// Uses resolved records only.
ThresholdAnalysis roc_auc(std::span<const PredictionRecord> records);

/// argmax over ROC thresholds of TPR - FPR; ties go to the larger threshold.
double youden_threshold(const ThresholdAnalysis& analysis);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
  bool zero_division = false;  // some ratio had an empty denominator and was set to 0
};

/// Class 0 (incorrect) is reported as the low performer row, class 1 as high.
struct ConfusionMetrics {
  double threshold = 0.5;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  double accuracy = 0.0;
  ClassMetrics low, high;
};

/// Predicted label is 1 iff p >= threshold. Unresolved records are skipped.
ConfusionMetrics confusion_metrics(std::span<const PredictionRecord> records, double threshold = 0.5);

enum class Profile { kStable = 0, kSwitching = 1 };
enum class Stage { kEarly = 0, kMiddle = 1, kLate = 2 };
enum class Averaging { kMicro, kMacro };

const char* to_string(Profile p);
const char* to_string(Stage s);

/// Number of positions where y[t] != y[t+1].
std::size_t count_switches(std::span<const int> y);

/// Fewer than two switches is stable.
Profile classify_profile(std::span<const int> y);

/// Early/middle/late sizes floor(n/3), floor((n+1)/3), remainder; fewer than
/// three predictions all count as early.
std::array<std::size_t, 3> stage_sizes(std::size_t n);

struct StageCell {
  double error = 0.0;
  std::size_t n = 0;
  std::size_t mismatches = 0;
  std::size_t students = 0;
};

struct StageErrorTable {
  double threshold = 0.5;
  Averaging averaging = Averaging::kMicro;
  std::array<std::array<StageCell, 3>, 2> cells{};  // [profile][stage]
  std::array<std::size_t, 2> students{};

  const StageCell& at(Profile p, Stage s) const {
    return cells[static_cast<std::size_t>(p)][static_cast<std::size_t>(s)];
  }
};

/// Groups records by student (ordered by step), profiles each student from
/// their label sequence and splits their resolved predictions into thirds.
StageErrorTable stage_errors(std::span<const PredictionRecord> records, double threshold,
                             Averaging averaging = Averaging::kMicro);

/// (1 / (T - 1)) * sum |P_t - P_{t-1}|; nullopt for fewer than two values.
std::optional<double> volatility(std::span<const double> p);

/// Fraction of updates dP_t = P_t - P_{t-1} whose sign contradicts y_t
/// (increase expected after a correct response, decrease after an incorrect
/// one; dP = 0 contradicts nothing). nullopt for fewer than two values.
std::optional<double> inconsistency(std::span<const double> p, std::span<const int> y);

enum class CoherenceScope {
  kPracticedSkill,  // consecutive attempts on the same skill, P of that skill
  kAllSkills,       // every skill between consecutive steps, direction from y_t
};

struct CoherenceCounts {
  double abs_change = 0.0;
  std::size_t pairs = 0;
  std::size_t mismatches = 0;
  std::size_t skipped_unresolved = 0;

  void add(const CoherenceCounts& o) {
    abs_change += o.abs_change;
    pairs += o.pairs;
    mismatches += o.mismatches;
    skipped_unresolved += o.skipped_unresolved;
  }
  double volatility() const { return pairs == 0 ? 0.0 : abs_change / static_cast<double>(pairs); }
  double inconsistency() const {
    return pairs == 0 ? 0.0 : static_cast<double>(mismatches) / static_cast<double>(pairs);
  }
};

/// A practiced-skill update that contradicts the response at step t.
struct AnnotatedCell {
  Eigen::Index step = 0;
  int skill = 0;
  double p_before = 0.0;
  double p_after = 0.0;
};

CoherenceCounts coherence_counts(const MasteryTrajectory& trajectory, CoherenceScope scope,
                                 std::vector<AnnotatedCell>* contradictions = nullptr);

struct StudentCoherence {
  std::string user_id;
  CoherenceCounts counts;
};

/// Pooled values are micro-averages over all consecutive-pair terms.
struct CoherenceReport {
  CoherenceScope scope = CoherenceScope::kPracticedSkill;
  CoherenceCounts pooled;
  std::vector<StudentCoherence> per_student;

  double volatility() const { return pooled.volatility(); }
  double inconsistency() const { return pooled.inconsistency(); }
};

CoherenceReport coherence(std::span<const MasteryTrajectory> trajectories, CoherenceScope scope);

struct HeatmapOptions {
  std::string title;
  bool all_skills = false;  // otherwise only skills the student practiced
  int cell_size = 18;
};

struct Heatmap {
  std::string svg;
  std::string matrix_tsv;
  std::vector<AnnotatedCell> annotations;
};

/// Time x skill probability grid. Practiced-skill updates that contradict the
/// response are outlined and labelled; a white line traces the practiced
/// cell at every step.
Heatmap heatmap_export(const MasteryTrajectory& trajectory, std::span<const std::string> skill_names,
                       const HeatmapOptions& options = {});

/// "fpr\ttpr\tthreshold" rows.
std::string roc_tsv(const ThresholdAnalysis& analysis);

struct EvalOptions {
  double confusion_threshold = 0.5;
  std::optional<double> stage_threshold;  // defaults to the Youden threshold
  Averaging stage_averaging = Averaging::kMicro;
  CoherenceScope coherence_scope = CoherenceScope::kPracticedSkill;
};

struct ModelReport {
  std::string model_tag;
  std::size_t records = 0;
  std::size_t unresolved = 0;
  ThresholdAnalysis roc;
  ConfusionMetrics confusion;
  StageErrorTable stages;
  std::optional<CoherenceReport> coherence;
};

/// Runs the whole battery for one model. Throws on duplicate
/// (user_id, step, model_tag) keys.
ModelReport evaluate_model(const std::string& model_tag, std::span<const PredictionRecord> records,
                           std::span<const MasteryTrajectory> trajectories, const EvalOptions& options);

nlohmann::json to_json(const ModelReport& report);

}  // namespace kt::eval
