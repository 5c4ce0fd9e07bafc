#include "kt/llmprobe.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <thread>

#include "httplib.h"

namespace kt::probe {

namespace {

// Runs fn(0..n-1) on at most `workers` threads. The first exception is
// rethrown after all workers stop; remaining tasks are abandoned.
void run_bounded(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    while (!failed) {
      std::size_t i = next++;
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), n);
  if (count <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < count; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

std::vector<HistoryItem> history_of(const StudentSequence& seq, std::size_t upto, const Names& names) {
  std::vector<HistoryItem> h;
  h.reserve(upto);
  for (std::size_t i = 0; i < upto; ++i) {
    const Step& st = seq.steps[i];
    h.push_back({names.quiz(st.quiz), names.skill(st.skill), st.correct});
  }
  return h;
}

// One request: fills the audit entry and returns the probability, or nullopt
// when the logits cannot be resolved. Transport errors propagate.
std::optional<double> probe_one(Client& client, const PromptRecord& prompt, AuditEntry& audit) {
  auto f = client.fetch(prompt);
  audit.cache_key = f.cache_key;
  audit.from_cache = f.from_cache;
  audit.truncated = prompt.truncated;
  audit.top = f.top;
  try {
    auto pair = resolve_logits(f.top);
    double p = prob_from_logits(pair);
    pair.top.clear();
    audit.logits = pair;
    return p;
  } catch (const std::exception& e) {
    audit.error = e.what();
    return std::nullopt;
  }
}

}  // namespace

void ProbeConfig::validate() const {
  if (temperature != 0.0) throw ConfigError("probe temperature must be 0");
  if (max_concurrency < 1) throw ConfigError("probe max_concurrency must be at least 1");
  if (max_retries < 0) throw ConfigError("probe max_retries must be non-negative");
  if (top_logprobs < 2) throw ConfigError("probe top_logprobs must be at least 2");
  if (max_history < 1) throw ConfigError("probe max_history must be at least 1");
  if (timeout_seconds <= 0.0) throw ConfigError("probe timeout must be positive");
  if (backoff_seconds < 0.0) throw ConfigError("probe backoff must be non-negative");
  if (endpoint.rfind("http://", 0) != 0)
    throw ConfigError("probe endpoint must be an http:// URL, got '" + endpoint + "'");
  if (path.empty() || path[0] != '/') throw ConfigError("probe path must start with '/'");
}

PromptRecord render_prompt(std::span<const HistoryItem> history, const std::string& next_quiz,
                           const std::string& next_skill, std::size_t max_history) {
  PromptRecord p;
  p.system = kSystemMessage;
  p.next_quiz = next_quiz;
  p.next_skill = next_skill;
  std::size_t start = history.size() > max_history ? history.size() - max_history : 0;
  p.truncated = start > 0;
  p.history_length = history.size() - start;

  std::string u =
      "The following is a student's problem-solving history. Predict whether the next answer will be "
      "correct (1) or incorrect (0).\n\n";
  if (p.history_length > 0) {
    u += "Student's past performance:\n";
    for (std::size_t i = start; i < history.size(); ++i) {
      const auto& h = history[i];
      u += std::to_string(i - start + 1) + ". Quiz " + h.quiz + " (Skill: " + h.skill_name + ") → " +
           (h.correct ? "Correct" : "Incorrect") + "\n";
    }
    u += "\n";
  }
  u += "Next quiz: Quiz " + next_quiz + " (Skill: " + next_skill + ")";
  p.user = std::move(u);
  return p;
}

double prob_from_logits(const LogitPair& pair) {
  if (!std::isfinite(pair.l0) || !std::isfinite(pair.l1)) throw std::invalid_argument("non-finite logits");
  double m = std::max(pair.l0, pair.l1);
  double e0 = std::exp(pair.l0 - m);
  double e1 = std::exp(pair.l1 - m);
  return e1 / (e0 + e1);
}

LogitPair resolve_logits(std::vector<TokenLogprob> top) {
  auto find = [&](const char* tok) -> const TokenLogprob* {
    for (const auto& t : top)
      if (t.token == tok) return &t;
    return nullptr;
  };
  LogitPair pair;
  const auto* z = find("0");
  const auto* o = find("1");
  if (!z && (z = find(" 0"))) pair.spaced0 = true;
  if (!o && (o = find(" 1"))) pair.spaced1 = true;
  if (!z && !o) throw UnresolvableLogits("unresolvable logits: neither \"0\" nor \"1\" in top-k");
  if (!z) throw UnresolvableLogits("unresolvable logits: \"0\" missing from top-k");
  if (!o) throw UnresolvableLogits("unresolvable logits: \"1\" missing from top-k");
  if (!std::isfinite(z->logprob) || !std::isfinite(o->logprob))
    throw UnresolvableLogits("unresolvable logits: non-finite log-probability");
  pair.l0 = z->logprob;
  pair.l1 = o->logprob;
  pair.top = std::move(top);
  return pair;
}

std::vector<TokenLogprob> parse_top_logprobs(const nlohmann::json& r, Api api) {
  std::vector<TokenLogprob> out;
  try {
    const auto& lp = r.at("choices").at(0).at("logprobs");
    if (api == Api::kChat) {
      for (const auto& e : lp.at("content").at(0).at("top_logprobs"))
        out.push_back({e.at("token").get<std::string>(), e.at("logprob").get<double>()});
    } else {
      for (const auto& [tok, v] : lp.at("top_logprobs").at(0).items()) out.push_back({tok, v.get<double>()});
      std::stable_sort(out.begin(), out.end(),
                       [](const TokenLogprob& a, const TokenLogprob& b) { return a.logprob > b.logprob; });
    }
  } catch (const nlohmann::json::exception& e) {
    throw ProbeError(std::string("malformed endpoint response: ") + e.what());
  }
  return out;
}

nlohmann::json request_body(const ProbeConfig& c, const PromptRecord& p) {
  nlohmann::json b;
  b["model"] = c.model;
  b["max_tokens"] = 1;
  b["temperature"] = c.temperature;
  if (c.api == Api::kChat) {
    b["messages"] = nlohmann::json::array({{{"role", "system"}, {"content", p.system}},
                                           {{"role", "user"}, {"content", p.user}}});
    b["logprobs"] = true;
    b["top_logprobs"] = c.top_logprobs;
  } else {
    b["prompt"] = p.system + "\n\n" + p.user;
    b["logprobs"] = c.top_logprobs;
  }
  return b;
}

nlohmann::json to_json(const AuditEntry& e) {
  nlohmann::json top = nlohmann::json::array();
  for (const auto& t : e.top) top.push_back({t.token, t.logprob});
  nlohmann::json j = {{"user_id", e.user_id}, {"step", e.step},        {"skill", e.skill},
                      {"key", e.cache_key},   {"cache", e.from_cache}, {"truncated", e.truncated},
                      {"top", top}};
  if (e.logits) {
    j["l0"] = e.logits->l0;
    j["l1"] = e.logits->l1;
    if (e.logits->spaced0 || e.logits->spaced1) j["spaced_tokens"] = true;
  }
  if (!e.error.empty()) j["error"] = e.error;
  return j;
}

Client::Client(ProbeConfig config) : config_(std::move(config)) { config_.validate(); }

std::string Client::post(const std::string& body) {
  httplib::Client cli(config_.endpoint);
  auto secs = std::chrono::duration<double>(config_.timeout_seconds);
  cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
  cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
  cli.set_write_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
  if (!config_.auth_token.empty()) cli.set_bearer_token_auth(config_.auth_token);

  std::string last;
  double wait = config_.backoff_seconds;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
      wait *= 2.0;
    }
    ++network_requests_;
    auto res = cli.Post(config_.path, body, "application/json");
    if (!res) {
      last = "cannot reach " + config_.endpoint + ": " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 200) return res->body;
    last = "endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200);
    if (res->status != 429 && res->status < 500) break;
  }
  throw ProbeError(last);
}

Client::Fetch Client::fetch(const PromptRecord& prompt) {
  auto body = request_body(config_, prompt).dump();
  Fetch f;
  f.cache_key = sha256_hex(config_.endpoint + config_.path + "\n" + body);
  std::filesystem::path file;
  if (!config_.cache_dir.empty()) {
    file = config_.cache_dir / (f.cache_key + ".json");
    if (config_.read_cache && std::filesystem::exists(file)) {
      try {
        auto cached = nlohmann::json::parse(read_file(file));
        for (const auto& e : cached.at("top")) f.top.push_back({e.at(0).get<std::string>(), e.at(1).get<double>()});
        f.from_cache = true;
        ++cache_hits_;
        return f;
      } catch (const nlohmann::json::exception&) {
        f.top.clear();  // corrupt entry: fetch again and overwrite
      }
    }
  }
  auto text = post(body);
  nlohmann::json response;
  try {
    response = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ProbeError(std::string("endpoint returned invalid JSON: ") + e.what());
  }
  f.top = parse_top_logprobs(response, config_.api);
  if (!file.empty()) {
    nlohmann::json top = nlohmann::json::array();
    for (const auto& t : f.top) top.push_back({t.token, t.logprob});
    write_file_atomic(file, nlohmann::json{{"top", top}}.dump() + "\n");
  }
  return f;
}

SequenceProbe probe_sequence(Client& client, const StudentSequence& seq, const Names& names,
                             const std::string& model_tag) {
  if (seq.size() < 2) throw std::invalid_argument("sequence " + seq.user_id + " is shorter than 2 steps");
  const std::size_t n = seq.size() - 1;
  SequenceProbe out;
  out.records.resize(n);
  out.audit.resize(n);
  run_bounded(n, client.config().max_concurrency, [&](std::size_t i) {
    const std::size_t t = i + 1;
    const Step& next = seq.steps[t];
    auto hist = history_of(seq, t, names);
    auto prompt = render_prompt(hist, names.quiz(next.quiz), names.skill(next.skill), client.config().max_history);
    auto& a = out.audit[i];
    a.user_id = seq.user_id;
    a.step = static_cast<int>(t);
    a.skill = next.skill;
    auto p = probe_one(client, prompt, a);
    out.records[i] = {seq.user_id, static_cast<int>(t), next.skill, next.correct, p, model_tag};
  });
  for (const auto& a : out.audit) {
    out.unresolved += a.logits ? 0 : 1;
    out.truncated += a.truncated ? 1 : 0;
  }
  return out;
}

MasteryProbe probe_mastery(Client& client, const StudentSequence& seq, const Names& names,
                           std::span<const int> representative_quiz) {
  const auto T = static_cast<Eigen::Index>(seq.size());
  const auto K = static_cast<Eigen::Index>(representative_quiz.size());
  MasteryProbe out;
  auto& tr = out.trajectory;
  tr.user_id = seq.user_id;
  tr.steps = seq.steps;
  tr.P = Eigen::MatrixXd::Constant(T, K, std::nan(""));
  tr.unresolved = decltype(tr.unresolved)::Zero(T, K);
  out.audit.resize(static_cast<std::size_t>(T * K));
  run_bounded(out.audit.size(), client.config().max_concurrency, [&](std::size_t i) {
    const auto t = static_cast<Eigen::Index>(i) / K;
    const auto k = static_cast<int>(static_cast<Eigen::Index>(i) % K);
    auto hist = history_of(seq, static_cast<std::size_t>(t) + 1, names);
    auto prompt = render_prompt(hist, names.quiz(representative_quiz[static_cast<std::size_t>(k)]), names.skill(k),
                                client.config().max_history);
    auto& a = out.audit[i];
    a.user_id = seq.user_id;
    a.step = static_cast<int>(t);
    a.skill = k;
    auto p = probe_one(client, prompt, a);
    if (p)
      tr.P(t, k) = *p;
    else
      tr.unresolved(t, k) = 1;
  });
  out.unresolved = static_cast<std::size_t>(tr.unresolved.cast<int>().sum());
  return out;
}

std::vector<std::optional<int>> representative_quizzes(std::span<const StudentSequence> sequences, int num_skills) {
  std::vector<std::map<int, std::size_t>> counts(static_cast<std::size_t>(num_skills));
  for (const auto& s : sequences)
    for (const auto& st : s.steps) ++counts.at(static_cast<std::size_t>(st.skill))[st.quiz];
  std::vector<std::optional<int>> out(static_cast<std::size_t>(num_skills));
  for (std::size_t k = 0; k < counts.size(); ++k) {
    std::size_t best = 0;
    for (const auto& [quiz, c] : counts[k])
      if (c > best) {
        best = c;
        out[k] = quiz;
      }
  }
  return out;
}

StabilityReport compare_runs(std::span<const PredictionRecord> a, std::span<const PredictionRecord> b) {
  if (a.size() != b.size()) throw std::invalid_argument("runs have different record counts");
  StabilityReport r;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].user_id != b[i].user_id || a[i].step != b[i].step)
      throw std::invalid_argument("runs disagree on record keys at position " + std::to_string(i));
    if (a[i].resolved() != b[i].resolved()) {
      ++r.resolution_mismatch;
      continue;
    }
    if (!a[i].resolved()) continue;
    ++r.compared;
    double d = std::abs(*a[i].p_pred - *b[i].p_pred);
    if (d != 0.0) ++r.differing;
    r.max_abs_delta = std::max(r.max_abs_delta, d);
  }
  return r;
}

nlohmann::json to_json(const StabilityReport& r) {
  return {{"compared", r.compared},
          {"differing", r.differing},
          {"resolution_mismatch", r.resolution_mismatch},
          {"max_abs_delta", r.max_abs_delta}};
}

}  // namespace kt::probe
