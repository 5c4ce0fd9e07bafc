#pragma once

// Shared currency between predictors (DKT, LLM probe) and the evaluation
// battery: per-step prediction dumps and full mastery trajectories.

#include <Eigen/Dense>

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kt/ingest.hpp"

namespace kt {

/// Prediction for step t of a student (t >= 1) made from steps 0..t-1.
/// An unresolved probe step has no probability.
struct PredictionRecord {
  std::string user_id;
  int step = 0;
  int skill = 0;
  int y_true = 0;
  std::optional<double> p_pred;
  std::string model_tag;

  bool resolved() const { return p_pred.has_value(); }
};

/// T x K matrix; row t holds per-skill correctness probabilities after
/// observing steps 0..t. unresolved(t, k) != 0 marks probe cells that could
/// not be derived (their P entry is NaN).
struct MasteryTrajectory {
  std::string user_id;
  Eigen::MatrixXd P;
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> unresolved;
  std::vector<Step> steps;

  Eigen::Index length() const { return P.rows(); }
  Eigen::Index num_skills() const { return P.cols(); }
  bool resolved(Eigen::Index t, Eigen::Index k) const {
    return unresolved.size() == 0 || unresolved(t, k) == 0;
  }
};

inline constexpr const char* kDumpHeader = "user_id\tt\tskill\ty_true\tp_pred\tmodel_tag";

/// Tab-separated dump. The optional first comment line records the
/// vocabulary hash the predictions were made against. Unresolved
/// probabilities are written as NA.
void write_predictions(std::ostream& out, std::span<const PredictionRecord> records,
                       const std::string& vocab_hash = {});

struct PredictionDump {
  std::vector<PredictionRecord> records;
  std::string vocab_hash;
};

PredictionDump read_predictions(std::istream& in);

/// Trajectory file: one row per (student, step) with the step metadata
/// followed by K probabilities (NA for unresolved cells).
void write_trajectories(std::ostream& out, std::span<const MasteryTrajectory> trajectories,
                        const std::string& vocab_hash = {});
std::vector<MasteryTrajectory> read_trajectories(std::istream& in);

}  // namespace kt
