#include "kt/dkt.hpp"

#include <cmath>
#include <stdexcept>

namespace kt::dkt {

int encode_step(int skill, int correct, int num_skills) {
  if (skill < 0 || skill >= num_skills) {
    throw std::out_of_range("skill " + std::to_string(skill) + " outside [0, " +
                            std::to_string(num_skills) + ")");
  }
  if (correct != 0 && correct != 1) throw std::out_of_range("correctness must be 0 or 1");
  return skill + correct * num_skills;
}

std::pair<int, int> decode_step(int x, int num_skills) {
  if (x < 0 || x >= 2 * num_skills) throw std::out_of_range("encoded index out of range");
  return {x % num_skills, x / num_skills};
}

std::vector<Window> make_windows(std::span<const StudentSequence> sequences, int max_len) {
  if (max_len < 2) throw std::invalid_argument("max_len must be at least 2");
  std::vector<Window> out;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const std::size_t n = sequences[i].size();
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(max_len)) {
      const std::size_t len = std::min(static_cast<std::size_t>(max_len), n - start);
      if (len >= 2) out.push_back({i, start, len});
    }
  }
  return out;
}

EncodedBatch build_batch(std::span<const StudentSequence> sequences, std::span<const Window> windows,
                         int num_skills) {
  if (windows.empty()) throw std::invalid_argument("build_batch: empty input");
  std::size_t T = 0;
  for (const auto& w : windows) T = std::max(T, w.length);
  const auto B = static_cast<Eigen::Index>(windows.size());
  EncodedBatch b;
  b.num_skills = num_skills;
  b.pad_index = 2 * num_skills;
  b.X = Eigen::MatrixXi::Constant(B, static_cast<Eigen::Index>(T), b.pad_index);
  b.S = Eigen::MatrixXi::Constant(B, static_cast<Eigen::Index>(T), b.pad_index);
  b.Y = Eigen::MatrixXi::Zero(B, static_cast<Eigen::Index>(T));
  b.W = Eigen::MatrixXd::Zero(B, static_cast<Eigen::Index>(T));
  for (Eigen::Index i = 0; i < B; ++i) {
    const auto& w = windows[static_cast<std::size_t>(i)];
    const auto& steps = sequences[w.sequence].steps;
    for (std::size_t t = 0; t < w.length; ++t) {
      const Step& s = steps[w.start + t];
      const auto c = static_cast<Eigen::Index>(t);
      b.X(i, c) = encode_step(s.skill, s.correct, num_skills);
      b.S(i, c) = s.skill;
      b.Y(i, c) = s.correct;
      if (t + 1 < w.length) b.W(i, c) = 1.0;
    }
    b.lengths.push_back(static_cast<int>(w.length));
  }
  return b;
}

EncodedBatch build_batch(std::span<const StudentSequence> sequences, int num_skills, int max_len) {
  if (sequences.empty()) throw std::invalid_argument("build_batch: empty input");
  for (const auto& s : sequences) {
    if (s.size() < 2) {
      throw std::invalid_argument("build_batch: sequence for " + s.user_id + " has fewer than 2 steps");
    }
  }
  auto windows = make_windows(sequences, max_len);
  return build_batch(sequences, windows, num_skills);
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"embedding_dim", c.embedding_dim}, {"hidden_dim", c.hidden_dim},
          {"learning_rate", c.learning_rate}, {"patience", c.patience},
          {"batch_size", c.batch_size},       {"max_len", c.max_len},
          {"clip_norm", c.clip_norm},         {"max_epochs", c.max_epochs},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.embedding_dim = j.at("embedding_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.patience = j.at("patience").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

bool EarlyStopping::observe(double val_loss) {
  ++epochs_;
  if (val_loss < best_loss_) {
    best_loss_ = val_loss;
    best_epoch_ = epochs_;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

namespace {

struct LossSum {
  double total = 0.0;
  std::size_t count = 0;
  double mean() const { return count == 0 ? 0.0 : total / static_cast<double>(count); }
};

template <typename Fn>
void for_each_batch(std::span<const StudentSequence> sequences, const std::vector<Window>& windows,
                    int batch_size, int num_skills, Fn&& fn) {
  for (std::size_t start = 0; start < windows.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t n = std::min(static_cast<std::size_t>(batch_size), windows.size() - start);
    fn(build_batch(sequences, std::span(windows).subspan(start, n), num_skills), start / batch_size);
  }
}

}  // namespace

double evaluate_loss(const DktParams<double>& params, std::span<const StudentSequence> sequences,
                     const TrainConfig& config) {
  const auto windows = make_windows(sequences, config.max_len);
  LossSum sum;
  for_each_batch(sequences, windows, config.batch_size, params.num_skills(),
                 [&](const EncodedBatch& batch, std::size_t) {
                   const auto n = batch.num_targets();
                   sum.total += forward_batch(params, batch).loss * static_cast<double>(n);
                   sum.count += n;
                 });
  if (sum.count == 0) throw std::invalid_argument("evaluate_loss: no targets");
  return sum.mean();
}

TrainResult train(std::span<const StudentSequence> train_set, std::span<const StudentSequence> val_set,
                  int num_skills, const TrainConfig& config, const EpochCallback& on_epoch) {
  if (train_set.empty() || val_set.empty()) throw ConfigError("train: empty train or validation split");
  if (num_skills <= 0) throw ConfigError("train: no skills");
  using Clock = std::chrono::steady_clock;
  const auto t_begin = Clock::now();

  DktModel model;
  model.config = config;
  model.params = DktParams<double>::init(num_skills, config.embedding_dim, config.hidden_dim, config.seed);
  auto tensors = model.params.tensors();
  nn::AdamState<double> adam(nn::AdamConfig{config.learning_rate}, tensors);

  TrainResult result;
  DktParams<double> best = model.params;
  EarlyStopping stopper(config.patience);
  Rng order_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<StudentSequence> shuffled(train_set.begin(), train_set.end());

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto t_epoch = Clock::now();
    order_rng.shuffle(shuffled);
    const auto windows = make_windows(shuffled, config.max_len);
    LossSum train_loss;
    for_each_batch(shuffled, windows, config.batch_size, num_skills,
                   [&](const EncodedBatch& batch, std::size_t index) {
                     auto fwd = forward_batch(model.params, batch);
                     if (!std::isfinite(fwd.loss)) {
                       throw RuntimeFailure("training diverged: non-finite loss at epoch " +
                                            std::to_string(epoch) + ", batch " + std::to_string(index));
                     }
                     auto grads = backward_batch(model.params, batch, fwd);
                     auto gt = grads.tensors();
                     nn::clip_global_norm<double>(gt, config.clip_norm);
                     nn::adam_update<double>(tensors, gt, adam);
                     const auto n = batch.num_targets();
                     train_loss.total += fwd.loss * static_cast<double>(n);
                     train_loss.count += n;
                   });

    EpochLog entry;
    entry.epoch = epoch;
    entry.train_loss = train_loss.mean();
    entry.val_loss = evaluate_loss(model.params, val_set, config);
    if (!std::isfinite(entry.val_loss)) {
      throw RuntimeFailure("training diverged: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    entry.improved = stopper.observe(entry.val_loss);
    if (entry.improved) best = model.params;
    entry.seconds = std::chrono::duration<double>(Clock::now() - t_epoch).count();
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (stopper.should_stop()) {
      result.stopped_early = true;
      break;
    }
  }

  model.params = std::move(best);
  result.model = std::move(model);
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  result.seconds = std::chrono::duration<double>(Clock::now() - t_begin).count();
  return result;
}

MasteryTrajectory mastery_trajectory(const DktModel& model, const StudentSequence& sequence) {
  const auto& p = model.params;
  const int K = p.num_skills();
  MasteryTrajectory tr;
  tr.user_id = sequence.user_id;
  tr.steps = sequence.steps;
  tr.P.resize(static_cast<Eigen::Index>(sequence.size()), K);
  Mat<double> h = Mat<double>::Zero(1, p.hidden_dim());
  for (std::size_t t = 0; t < sequence.size(); ++t) {
    const Step& s = sequence.steps[t];
    const int x = encode_step(s.skill, s.correct, K);
    Mat<double> in = p.E.row(x);
    h = nn::gru_cell(in, h, p.gru).h;
    if (!h.allFinite()) throw RuntimeFailure("non-finite hidden state at step " + std::to_string(t));
    tr.P.row(static_cast<Eigen::Index>(t)) = nn::readout<double>(h, p.Wout, p.bout);
  }
  return tr;
}

double predict_next(const DktModel& model, std::span<const Step> prefix, int next_skill) {
  if (prefix.empty()) throw std::invalid_argument("predict_next: empty prefix");
  if (next_skill < 0 || next_skill >= model.num_skills()) {
    throw std::out_of_range("predict_next: unknown skill " + std::to_string(next_skill));
  }
  StudentSequence seq{{}, std::vector<Step>(prefix.begin(), prefix.end())};
  auto tr = mastery_trajectory(model, seq);
  return tr.P(tr.length() - 1, next_skill);
}

std::vector<PredictionRecord> predict_sequence(const DktModel& model, const StudentSequence& sequence,
                                               const std::string& model_tag) {
  std::vector<PredictionRecord> out;
  if (sequence.size() < 2) return out;
  auto tr = mastery_trajectory(model, sequence);
  for (std::size_t t = 1; t < sequence.size(); ++t) {
    const Step& s = sequence.steps[t];
    out.push_back({sequence.user_id, static_cast<int>(t), s.skill, s.correct,
                   tr.P(static_cast<Eigen::Index>(t) - 1, s.skill), model_tag});
  }
  return out;
}

namespace {

constexpr const char* kCheckpointFormat = "kt-dkt-checkpoint";
constexpr int kCheckpointVersion = 1;

nlohmann::json tensor_json(const Mat<double>& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(data)}};
}

void load_tensor(const nlohmann::json& j, Mat<double>& m, const char* name) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto& data = j.at("data");
  if (rows != m.rows() || cols != m.cols() || static_cast<Eigen::Index>(data.size()) != rows * cols) {
    throw ConfigError(std::string("checkpoint tensor '") + name + "' has unexpected shape");
  }
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index c = 0; c < cols; ++c) m(i, c) = data[k++].get<double>();
  }
  if (!m.allFinite()) throw ConfigError(std::string("checkpoint tensor '") + name + "' is not finite");
}

}  // namespace

nlohmann::json checkpoint_to_json(const DktModel& model) {
  nlohmann::json tensors = nlohmann::json::object();
  auto ts = model.params.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) tensors[DktParams<double>::kNames[i]] = tensor_json(*ts[i]);
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"num_skills", model.num_skills()},
          {"embedding_dim", model.params.embedding_dim()},
          {"hidden_dim", model.params.hidden_dim()},
          {"vocab_hash", model.vocab_hash},
          {"config", to_json(model.config)},
          {"tensors", std::move(tensors)}};
}

DktModel checkpoint_from_json(const nlohmann::json& j, const std::string& expected_vocab_hash) {
  if (j.value("format", "") != kCheckpointFormat) throw ConfigError("not a DKT checkpoint");
  if (j.at("version").get<int>() != kCheckpointVersion) throw ConfigError("unsupported checkpoint version");
  DktModel model;
  model.vocab_hash = j.at("vocab_hash").get<std::string>();
  if (!expected_vocab_hash.empty() && expected_vocab_hash != model.vocab_hash) {
    throw ConfigError("checkpoint vocabulary hash " + model.vocab_hash +
                      " does not match workspace vocabulary " + expected_vocab_hash);
  }
  model.config = train_config_from_json(j.at("config"));
  model.params = DktParams<double>::zeros(j.at("num_skills").get<int>(), j.at("embedding_dim").get<int>(),
                                          j.at("hidden_dim").get<int>());
  auto ts = model.params.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i) {
    load_tensor(j.at("tensors").at(DktParams<double>::kNames[i]), *ts[i], DktParams<double>::kNames[i]);
  }
  return model;
}

}  // namespace kt::dkt
