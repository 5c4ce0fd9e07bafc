#pragma once

// Deep knowledge tracing: 2K input encoding, padded/masked batches, the
// embedding -> GRU -> sigmoid readout model, its training loop with early
// stopping, and next-step / full-mastery inference.

#include <Eigen/Dense>

#include <array>
#include <chrono>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "kt/ingest.hpp"
#include "kt/nn.hpp"
#include "kt/predictions.hpp"

namespace kt::dkt {

using nn::Mat;

/// x = s + y * K. Throws std::out_of_range unless 0 <= s < K and y is 0/1.
int encode_step(int skill, int correct, int num_skills);

/// Inverse of encode_step: (x mod K, x div K).
std::pair<int, int> decode_step(int x, int num_skills);

/// Padded batch, B x T. Target of cell (i, t) is the shifted pair
/// (S(i, t+1), Y(i, t+1)); W(i, t) = 1 iff that target exists. Padded cells
/// hold pad_index in X and S and 0 in W.
struct EncodedBatch {
  Eigen::MatrixXi X, S, Y;
  Eigen::MatrixXd W;
  std::vector<int> lengths;
  int num_skills = 0;
  int pad_index = 0;

  Eigen::Index batch_size() const { return X.rows(); }
  Eigen::Index max_len() const { return X.cols(); }
  std::size_t num_targets() const { return static_cast<std::size_t>(W.sum()); }
};

/// A contiguous slice of one student's sequence fed to the model with a
/// fresh hidden state.
struct Window {
  std::size_t sequence = 0;
  std::size_t start = 0;
  std::size_t length = 0;
};

/// Consecutive non-overlapping windows of at most max_len steps. Windows
/// with fewer than two steps carry no target and are dropped.
std::vector<Window> make_windows(std::span<const StudentSequence> sequences, int max_len);

EncodedBatch build_batch(std::span<const StudentSequence> sequences,
                         std::span<const Window> windows, int num_skills);

/// Windows every sequence and packs all windows into one batch. Throws on
/// empty input or a sequence shorter than two steps.
EncodedBatch build_batch(std::span<const StudentSequence> sequences, int num_skills, int max_len);

/// Embedding table (2K x d_emb), GRU, readout (d_h x K) and bias (1 x K).
template <typename Scalar>
struct DktParams {
  Mat<Scalar> E;
  nn::GruParams<Scalar> gru;
  Mat<Scalar> Wout;
  Mat<Scalar> bout;

  static constexpr std::size_t kNumTensors = 12;
  static constexpr std::array<const char*, kNumTensors> kNames = {
      "embedding", "W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h", "W_out", "b_out"};

  static DktParams zeros(int num_skills, int embedding_dim, int hidden_dim) {
    DktParams p;
    p.E = Mat<Scalar>::Zero(2 * num_skills, embedding_dim);
    p.gru = nn::GruParams<Scalar>::zeros(embedding_dim, hidden_dim);
    p.Wout = Mat<Scalar>::Zero(hidden_dim, num_skills);
    p.bout = Mat<Scalar>::Zero(1, num_skills);
    return p;
  }

  /// Scaled-uniform matrices, zero biases; draws in a fixed tensor order.
  static DktParams init(int num_skills, int embedding_dim, int hidden_dim, std::uint64_t seed) {
    auto p = zeros(num_skills, embedding_dim, hidden_dim);
    Rng rng(seed);
    for (auto* m : {&p.E, &p.gru.Wz, &p.gru.Wr, &p.gru.Wh, &p.gru.Uz, &p.gru.Ur, &p.gru.Uh, &p.Wout}) {
      nn::init_uniform_scaled(*m, rng);
    }
    return p;
  }

  std::array<Mat<Scalar>*, kNumTensors> tensors() {
    return {&E, &gru.Wz, &gru.Wr, &gru.Wh, &gru.Uz, &gru.Ur, &gru.Uh,
            &gru.bz, &gru.br, &gru.bh, &Wout, &bout};
  }
  std::array<const Mat<Scalar>*, kNumTensors> tensors() const {
    return {&E, &gru.Wz, &gru.Wr, &gru.Wh, &gru.Uz, &gru.Ur, &gru.Uh,
            &gru.bz, &gru.br, &gru.bh, &Wout, &bout};
  }

  int num_skills() const { return static_cast<int>(Wout.cols()); }
  int embedding_dim() const { return static_cast<int>(E.cols()); }
  int hidden_dim() const { return static_cast<int>(Wout.rows()); }

  bool operator==(const DktParams& o) const {
    auto a = tensors();
    auto b = o.tensors();
    for (std::size_t i = 0; i < kNumTensors; ++i) {
      if (a[i]->rows() != b[i]->rows() || a[i]->cols() != b[i]->cols() || *a[i] != *b[i]) return false;
    }
    return true;
  }
};

template <typename Scalar>
struct BatchForward {
  nn::GruTape<Scalar> tape;
  Mat<Scalar> p_sel;   // B x T, probability of the shifted target skill
  Mat<Scalar> y_next;  // B x T, shifted labels
  Scalar loss{};
};

/// Embedded inputs for step t; padded cells embed to zero.
template <typename Scalar>
Mat<Scalar> embed_step(const DktParams<Scalar>& p, const EncodedBatch& batch, Eigen::Index t) {
  Mat<Scalar> x = Mat<Scalar>::Zero(batch.batch_size(), p.embedding_dim());
  for (Eigen::Index i = 0; i < batch.batch_size(); ++i) {
    const int idx = batch.X(i, t);
    if (idx == batch.pad_index) continue;
    if (idx < 0 || idx >= p.E.rows()) {
      throw std::out_of_range("input index " + std::to_string(idx) + " outside [0, " +
                              std::to_string(p.E.rows()) + ")");
    }
    x.row(i) = p.E.row(idx);
  }
  return x;
}

template <typename Scalar>
BatchForward<Scalar> forward_batch(const DktParams<Scalar>& p, const EncodedBatch& batch) {
  const Eigen::Index B = batch.batch_size();
  const Eigen::Index T = batch.max_len();
  std::vector<Mat<Scalar>> inputs;
  inputs.reserve(static_cast<std::size_t>(T));
  for (Eigen::Index t = 0; t < T; ++t) inputs.push_back(embed_step(p, batch, t));

  BatchForward<Scalar> fwd;
  fwd.tape = nn::gru_forward(std::move(inputs), p.gru, Mat<Scalar>(Mat<Scalar>::Zero(B, p.hidden_dim())));
  fwd.p_sel = Mat<Scalar>::Constant(B, T, Scalar(0.5));
  fwd.y_next = Mat<Scalar>::Zero(B, T);
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    const Mat<Scalar>& h = fwd.tape.h[static_cast<std::size_t>(t) + 1];
    for (Eigen::Index i = 0; i < B; ++i) {
      if (batch.W(i, t) == 0.0) continue;
      const int s = batch.S(i, t + 1);
      const Scalar logit = h.row(i).dot(p.Wout.col(s)) + p.bout(0, s);
      fwd.p_sel(i, t) = nn::sigmoid(logit);
      fwd.y_next(i, t) = Scalar(batch.Y(i, t + 1));
    }
  }
  fwd.loss = nn::masked_bce<Scalar>(fwd.p_sel, fwd.y_next, batch.W.cast<Scalar>());
  return fwd;
}

/// Exact gradient of forward_batch's loss with respect to every parameter.
template <typename Scalar>
DktParams<Scalar> backward_batch(const DktParams<Scalar>& p, const EncodedBatch& batch,
                                 const BatchForward<Scalar>& fwd) {
  const Eigen::Index B = batch.batch_size();
  const Eigen::Index T = batch.max_len();
  auto g = DktParams<Scalar>::zeros(p.num_skills(), p.embedding_dim(), p.hidden_dim());
  const Scalar count = Scalar(batch.W.sum());

  std::vector<Mat<Scalar>> grad_h(static_cast<std::size_t>(T), Mat<Scalar>::Zero(B, p.hidden_dim()));
  for (Eigen::Index t = 0; t + 1 < T; ++t) {
    const Mat<Scalar>& h = fwd.tape.h[static_cast<std::size_t>(t) + 1];
    for (Eigen::Index i = 0; i < B; ++i) {
      if (batch.W(i, t) == 0.0) continue;
      const int s = batch.S(i, t + 1);
      // d(bce)/d(logit) = p - y
      const Scalar d = (fwd.p_sel(i, t) - fwd.y_next(i, t)) / count;
      g.Wout.col(s) += d * h.row(i).transpose();
      g.bout(0, s) += d;
      grad_h[static_cast<std::size_t>(t)].row(i) += d * p.Wout.col(s).transpose();
    }
  }
  auto grad_x = nn::gru_backward(fwd.tape, p.gru, grad_h, g.gru);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index i = 0; i < B; ++i) {
      const int idx = batch.X(i, t);
      if (idx == batch.pad_index) continue;
      g.E.row(idx) += grad_x[static_cast<std::size_t>(t)].row(i);
    }
  }
  return g;
}

/// Central-difference check of backward_batch over every parameter entry.
/// `tamper` may modify the analytic gradients first (fault injection).
inline nn::GradCheckResult grad_check(DktParams<double>& params, const EncodedBatch& batch, double eps,
                                      const std::function<void(DktParams<double>&)>& tamper = {}) {
  auto grads = backward_batch(params, batch, forward_batch(params, batch));
  if (tamper) tamper(grads);
  std::vector<Mat<double>> analytic;
  for (const auto* g : grads.tensors()) analytic.push_back(*g);
  auto tensors = params.tensors();
  return nn::grad_check<double>(tensors, analytic, [&] { return forward_batch(params, batch).loss; }, eps);
}

/// Hyperparameters of the model and its training loop.
struct TrainConfig {
  int embedding_dim = 64;
  int hidden_dim = 128;
  double learning_rate = 1e-3;
  int patience = 3;
  int batch_size = 32;
  int max_len = 200;
  double clip_norm = 5.0;
  int max_epochs = 100;
  std::uint64_t seed = 1;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct DktModel {
  DktParams<double> params;
  TrainConfig config;
  std::string vocab_hash;

  int num_skills() const { return params.num_skills(); }
};

/// Tracks the best validation loss; stop after `patience` consecutive
/// epochs without strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Records one epoch's validation loss; returns true if it is a new best.
  bool observe(double val_loss);
  bool should_stop() const { return stale_ >= patience_; }
  int best_epoch() const { return best_epoch_; }  // 1-based, 0 before any epoch
  double best_loss() const { return best_loss_; }
  int epochs_seen() const { return epochs_; }

 private:
  int patience_;
  int epochs_ = 0;
  int stale_ = 0;
  int best_epoch_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double seconds = 0.0;
  bool improved = false;
};

struct TrainResult {
  DktModel model;  // weights from the best validation epoch
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
  double seconds = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

TrainResult train(std::span<const StudentSequence> train_set, std::span<const StudentSequence> val_set,
                  int num_skills, const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Mean masked loss over all targets of a sequence set, windowed as in training.
double evaluate_loss(const DktParams<double>& params, std::span<const StudentSequence> sequences,
                     const TrainConfig& config);

/// Full T x K mastery matrix; row t sees steps 0..t only.
MasteryTrajectory mastery_trajectory(const DktModel& model, const StudentSequence& sequence);

/// Probability that next_skill is answered correctly after the given prefix.
double predict_next(const DktModel& model, std::span<const Step> prefix, int next_skill);

/// One record per step t = 1..T-1, p = P[t-1][s_t].
std::vector<PredictionRecord> predict_sequence(const DktModel& model, const StudentSequence& sequence,
                                               const std::string& model_tag);

nlohmann::json checkpoint_to_json(const DktModel& model);

/// Throws ConfigError if expected_vocab_hash is non-empty and differs from
/// the checkpoint's.
DktModel checkpoint_from_json(const nlohmann::json& j, const std::string& expected_vocab_hash = {});

}  // namespace kt::dkt
