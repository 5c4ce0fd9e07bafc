#include "kt/config.hpp"

#include <fstream>
#include <sstream>

#include "kt/util.hpp"

namespace kt {

namespace {

using nlohmann::json;

std::string join(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

void merge(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const auto path = join(prefix, key);
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    if (base[key].is_object())
      merge(base[key], value, path);
    else
      base[key] = value;
  }
}

bool same_kind(const json& def, const json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_number_integer()) return v.is_number_integer();
  if (def.is_number()) return v.is_number();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) return v.is_array();
  return true;
}

const char* kind_name(const json& def) {
  if (def.is_boolean()) return "a boolean";
  if (def.is_number_integer()) return "an integer";
  if (def.is_number()) return "a number";
  if (def.is_string()) return "a string";
  if (def.is_array()) return "an array";
  return "a value";
}

void check_types(const json& def, const json& doc, const std::string& prefix) {
  for (const auto& [key, d] : def.items()) {
    const auto path = join(prefix, key);
    const json& v = doc.at(key);
    if (d.is_object()) {
      check_types(d, v, path);
      continue;
    }
    if (path == "eval.stage_threshold") {
      if (!(v.is_number() || v == "youden"))
        throw ConfigError("config key 'eval.stage_threshold' must be a number or \"youden\"");
      continue;
    }
    if (!same_kind(d, v)) throw ConfigError("config key '" + path + "' must be " + kind_name(d));
    if (d.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
      throw ConfigError("config key '" + path + "' must be non-negative");
  }
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

std::filesystem::path resolve(const std::string& p, const std::filesystem::path& base) {
  if (p.empty()) return {};
  std::filesystem::path path(p);
  return path.is_absolute() ? path.lexically_normal() : (base / path).lexically_normal();
}

}  // namespace

json default_config() {
  const ColumnMapping cols;
  const probe::ProbeConfig pc;
  const synth::SkillParams sp;
  const auto sref = synth::GenerativeSpec::reference();
  return {
      {"paths", {{"raw", ""}, {"workspace", "workspace"}}},
      {"columns",
       {{"order_id", cols.order_id},
        {"user_id", cols.user_id},
        {"problem_id", cols.problem_id},
        {"correct", cols.correct},
        {"skill_id", cols.skill_id},
        {"skill_name", cols.skill_name},
        {"delimiter", std::string(1, cols.delimiter)}}},
      {"split", {{"train", 0.8}, {"val", 0.1}, {"test", 0.1}, {"seed", 42}}},
      {"dkt", dkt::to_json(dkt::TrainConfig{})},
      {"probe",
       {{"endpoint", pc.endpoint},
        {"path", pc.path},
        {"api", "chat"},
        {"model", "llama3.1:8b"},
        {"timeout_seconds", pc.timeout_seconds},
        {"max_retries", pc.max_retries},
        {"backoff_seconds", pc.backoff_seconds},
        {"max_concurrency", pc.max_concurrency},
        {"temperature", pc.temperature},
        {"top_logprobs", pc.top_logprobs},
        {"max_history", pc.max_history},
        {"split", "test"},
        {"max_students", 0}}},
      {"eval",
       {{"threshold", 0.5},
        {"stage_threshold", "youden"},
        {"stage_averaging", "micro"},
        {"coherence_scope", "practiced_skill"},
        {"heatmap_students", json::array()},
        {"heatmap_all_skills", false}}},
      {"synth",
       {{"num_skills", sref.num_skills()},
        {"p_init", sp.p_init},
        {"p_learn", sp.p_learn},
        {"p_guess", sp.p_guess},
        {"p_slip", sp.p_slip},
        {"n_students", sref.n_students},
        {"mean_length", sref.mean_length},
        {"min_length", sref.min_length},
        {"seed", sref.seed}}},
      {"deterministic", true},
  };
}

void apply_override(json& doc, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const auto key = assignment.substr(0, eq);
  const auto text = assignment.substr(eq + 1);
  json* node = &doc;
  for (const auto& part : split(key, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
  }
  if (node->is_object()) throw ConfigError("config key '" + key + "' is a section, not a value");
  json value = json::parse(text, nullptr, false);
  *node = value.is_discarded() ? json(text) : value;
}

RunConfig make_config(const json& user, const std::vector<std::string>& overrides,
                      const std::filesystem::path& base_dir) {
  const json defaults = default_config();
  json doc = defaults;
  merge(doc, user, "");
  for (const auto& o : overrides) apply_override(doc, o);
  check_types(defaults, doc, "");

  RunConfig c;
  c.document = doc;
  c.raw = resolve(doc["paths"]["raw"].get<std::string>(), base_dir);
  c.workspace = resolve(doc["paths"]["workspace"].get<std::string>(), base_dir);
  require(!c.workspace.empty(), "paths.workspace must not be empty");

  const auto& cols = doc["columns"];
  c.columns.order_id = cols["order_id"];
  c.columns.user_id = cols["user_id"];
  c.columns.problem_id = cols["problem_id"];
  c.columns.correct = cols["correct"];
  c.columns.skill_id = cols["skill_id"];
  c.columns.skill_name = cols["skill_name"];
  const auto delim = cols["delimiter"].get<std::string>();
  require(delim.size() == 1, "columns.delimiter must be a single character");
  c.columns.delimiter = delim[0];

  const auto& sp = doc["split"];
  c.ratios = {sp["train"].get<double>(), sp["val"].get<double>(), sp["test"].get<double>()};
  for (double r : {c.ratios.train, c.ratios.val, c.ratios.test})
    require(r >= 0.0 && r <= 1.0, "split ratios must lie in [0, 1]");
  require(std::abs(c.ratios.train + c.ratios.val + c.ratios.test - 1.0) < 1e-9, "split ratios must sum to 1");
  c.split_seed = sp["seed"].get<std::uint64_t>();

  c.dkt = dkt::train_config_from_json(doc["dkt"]);
  require(c.dkt.embedding_dim > 0 && c.dkt.hidden_dim > 0, "dkt dimensions must be positive");
  require(c.dkt.learning_rate > 0.0, "dkt.learning_rate must be positive");
  require(c.dkt.patience >= 1, "dkt.patience must be at least 1");
  require(c.dkt.batch_size >= 1, "dkt.batch_size must be at least 1");
  require(c.dkt.max_len >= 2, "dkt.max_len must be at least 2");
  require(c.dkt.clip_norm > 0.0, "dkt.clip_norm must be positive");
  require(c.dkt.max_epochs >= 1, "dkt.max_epochs must be at least 1");

  const auto& pr = doc["probe"];
  auto& pc = c.probe.client;
  pc.endpoint = pr["endpoint"];
  pc.path = pr["path"];
  const auto api = pr["api"].get<std::string>();
  require(api == "chat" || api == "completions", "probe.api must be \"chat\" or \"completions\"");
  pc.api = api == "chat" ? probe::Api::kChat : probe::Api::kCompletions;
  pc.model = pr["model"];
  pc.timeout_seconds = pr["timeout_seconds"];
  pc.max_retries = pr["max_retries"];
  pc.backoff_seconds = pr["backoff_seconds"];
  pc.max_concurrency = pr["max_concurrency"];
  pc.temperature = pr["temperature"];
  pc.top_logprobs = pr["top_logprobs"];
  pc.max_history = pr["max_history"];
  pc.validate();
  c.probe.split = pr["split"];
  require(c.probe.split == "train" || c.probe.split == "val" || c.probe.split == "test",
          "probe.split must be train, val or test");
  c.probe.max_students = pr["max_students"];

  const auto& ev = doc["eval"];
  auto& eo = c.eval.options;
  eo.confusion_threshold = ev["threshold"];
  require(eo.confusion_threshold >= 0.0 && eo.confusion_threshold <= 1.0, "eval.threshold must lie in [0, 1]");
  if (ev["stage_threshold"].is_number()) eo.stage_threshold = ev["stage_threshold"].get<double>();
  const auto avg = ev["stage_averaging"].get<std::string>();
  require(avg == "micro" || avg == "macro", "eval.stage_averaging must be \"micro\" or \"macro\"");
  eo.stage_averaging = avg == "micro" ? eval::Averaging::kMicro : eval::Averaging::kMacro;
  const auto scope = ev["coherence_scope"].get<std::string>();
  require(scope == "practiced_skill" || scope == "all_skills",
          "eval.coherence_scope must be \"practiced_skill\" or \"all_skills\"");
  eo.coherence_scope =
      scope == "practiced_skill" ? eval::CoherenceScope::kPracticedSkill : eval::CoherenceScope::kAllSkills;
  for (const auto& s : ev["heatmap_students"]) {
    require(s.is_string() || s.is_number_integer(), "eval.heatmap_students must list student ids");
    c.eval.heatmap_students.push_back(s.is_string() ? s.get<std::string>() : std::to_string(s.get<long long>()));
  }
  c.eval.heatmap_all_skills = ev["heatmap_all_skills"];

  const auto& sy = doc["synth"];
  synth::SkillParams skill{sy["p_init"].get<double>(), sy["p_learn"].get<double>(), sy["p_guess"].get<double>(),
                           sy["p_slip"].get<double>()};
  c.synth = synth::GenerativeSpec::uniform(sy["num_skills"].get<int>(), skill, sy["n_students"].get<int>(),
                                           sy["mean_length"].get<int>(), sy["seed"].get<std::uint64_t>());
  c.synth.min_length = sy["min_length"].get<int>();
  c.synth.validate();

  c.deterministic = doc["deterministic"];
  return c;
}

RunConfig load_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
  json user = json::object();
  std::filesystem::path base = std::filesystem::current_path();
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("cannot open config file " + file->string());
    try {
      user = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config file " + file->string() + " is not valid JSON: " + e.what());
    }
    base = std::filesystem::absolute(*file).parent_path();
  }
  return make_config(user, overrides, base);
}

std::string RunConfig::hash() const { return sha256_hex(document.dump()); }

}  // namespace kt
