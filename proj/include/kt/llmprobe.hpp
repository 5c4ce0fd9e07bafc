#pragma once

// Next-step correctness probabilities from a served language model, read off
// the log-probabilities of the single output tokens "0" and "1".

#include <atomic>
#include <filesystem>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kt/ingest.hpp"
#include "kt/predictions.hpp"
#include "kt/util.hpp"

namespace kt::probe {

enum class Api {
  kChat,         // messages + logprobs/top_logprobs, choices[0].logprobs.content[0].top_logprobs
  kCompletions,  // prompt + logprobs=N, choices[0].logprobs.top_logprobs[0]
};

struct ProbeConfig {
  std::string endpoint = "http://127.0.0.1:11434";  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  Api api = Api::kChat;
  std::string model;
  double timeout_seconds = 60.0;
  int max_retries = 3;
  double backoff_seconds = 0.5;  // doubled after every failed attempt
  int max_concurrency = 4;
  double temperature = 0.0;
  int top_logprobs = 20;
  std::size_t max_history = 100;
  std::string auth_token;            // sent as a bearer token when set
  std::filesystem::path cache_dir;   // empty disables the cache
  bool read_cache = true;            // false forces fresh requests (still written)

  /// Throws ConfigError on a non-zero temperature, an unsupported scheme,
  /// concurrency below one and similar.
  void validate() const;
};

/// Thrown when the endpoint cannot be reached or keeps failing.
class ProbeError : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

/// Neither usable "0" nor "1" entry was returned for a step.
class UnresolvableLogits : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kSystemMessage =
    "You are a classification model. Output only a single token: either 0 or 1. Do not generate "
    "explanations or additional text.";

struct HistoryItem {
  std::string quiz;
  std::string skill_name;
  int correct = 0;
};

struct PromptRecord {
  std::string system;
  std::string user;
  std::size_t history_length = 0;  // lines actually rendered
  bool truncated = false;          // older lines were dropped
  std::string next_quiz;
  std::string next_skill;
};

/// Keeps only the most recent max_history lines.
PromptRecord render_prompt(std::span<const HistoryItem> history, const std::string& next_quiz,
                           const std::string& next_skill, std::size_t max_history = 100);

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
};

struct LogitPair {
  double l0 = 0.0;
  double l1 = 0.0;
  bool spaced0 = false;  // resolved from " 0" instead of "0"
  bool spaced1 = false;
  std::vector<TokenLogprob> top;
};

/// exp(l1) / (exp(l0) + exp(l1)) with the larger term factored out.
double prob_from_logits(const LogitPair& pair);

/// Bare tokens are preferred; " 0" / " 1" are used only when the bare one is
/// missing. Throws UnresolvableLogits if either side stays missing.
LogitPair resolve_logits(std::vector<TokenLogprob> top);

/// Top-k list of the first generated token, for both response shapes.
std::vector<TokenLogprob> parse_top_logprobs(const nlohmann::json& response, Api api);

nlohmann::json request_body(const ProbeConfig& config, const PromptRecord& prompt);

struct AuditEntry {
  std::string user_id;
  int step = 0;  // row of the trajectory, or the predicted step of a sequence probe
  int skill = 0;
  std::string cache_key;
  bool from_cache = false;
  bool truncated = false;
  std::vector<TokenLogprob> top;
  std::optional<LogitPair> logits;
  std::string error;
};

nlohmann::json to_json(const AuditEntry& e);

/// Thread-safe: concurrent fetches are fine.
class Client {
 public:
  explicit Client(ProbeConfig config);

  const ProbeConfig& config() const { return config_; }

  struct Fetch {
    std::vector<TokenLogprob> top;
    std::string cache_key;
    bool from_cache = false;
  };

  /// Cache lookup, then the endpoint with retries. Throws ProbeError.
  Fetch fetch(const PromptRecord& prompt);

  LogitPair request_logits(const PromptRecord& prompt) { return resolve_logits(fetch(prompt).top); }

  std::size_t network_requests() const { return network_requests_; }
  std::size_t cache_hits() const { return cache_hits_; }

 private:
  std::string post(const std::string& body);

  ProbeConfig config_;
  std::atomic<std::size_t> network_requests_{0};
  std::atomic<std::size_t> cache_hits_{0};
};

/// Display strings for prompts.
struct Names {
  const Vocab* vocab = nullptr;

  std::string quiz(int q) const { return vocab->quiz_id(q); }
  std::string skill(int s) const {
    const auto& n = vocab->skill_name(s);
    return n.empty() ? vocab->skill_id(s) : n;
  }
};

struct SequenceProbe {
  std::vector<PredictionRecord> records;
  std::vector<AuditEntry> audit;
  std::size_t unresolved = 0;
  std::size_t truncated = 0;
};

/// One request per step t = 1..T-1 from steps 0..t-1.
SequenceProbe probe_sequence(Client& client, const StudentSequence& sequence, const Names& names,
                             const std::string& model_tag);

struct MasteryProbe {
  MasteryTrajectory trajectory;
  std::vector<AuditEntry> audit;
  std::size_t unresolved = 0;
};

/// Row t asks about every skill, using that skill's representative quiz,
/// after steps 0..t. T x K requests.
MasteryProbe probe_mastery(Client& client, const StudentSequence& sequence, const Names& names,
                           std::span<const int> representative_quiz);

/// Most frequent quiz per skill (smallest index on ties); nullopt for skills
/// that never occur.
std::vector<std::optional<int>> representative_quizzes(std::span<const StudentSequence> sequences, int num_skills);

struct StabilityReport {
  std::size_t compared = 0;
  std::size_t differing = 0;
  std::size_t resolution_mismatch = 0;  // resolved in one run only
  double max_abs_delta = 0.0;
};

/// Compares two runs record by record (same keys in the same order).
StabilityReport compare_runs(std::span<const PredictionRecord> a, std::span<const PredictionRecord> b);

nlohmann::json to_json(const StabilityReport& r);

}  // namespace kt::probe
