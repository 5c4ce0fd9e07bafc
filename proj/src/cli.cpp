#include "kt/cli.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "kt/config.hpp"
#include "kt/dkt.hpp"
#include "kt/eval.hpp"
#include "kt/ingest.hpp"
#include "kt/llmprobe.hpp"
#include "kt/predictions.hpp"
#include "kt/synth.hpp"
#include "kt/util.hpp"

namespace kt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class WorkspaceLock {
 public:
  explicit WorkspaceLock(const Workspace& ws) {
    fs::create_directories(ws.root);
    fd_ = ::open(ws.lock().c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw RuntimeFailure("cannot open lock file " + ws.lock().string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw RuntimeFailure("workspace " + ws.root.string() + " is in use by another ktrace process");
    }
  }
  ~WorkspaceLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  WorkspaceLock(const WorkspaceLock&) = delete;
  WorkspaceLock& operator=(const WorkspaceLock&) = delete;

 private:
  int fd_ = -1;
};

std::string to_text(const json& j) { return j.dump(2) + "\n"; }

json read_json(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::parse_error& e) {
    throw RuntimeFailure(p.string() + " is not valid JSON: " + e.what());
  }
}

template <typename Writer>
std::string render(Writer&& w) {
  std::ostringstream os;
  w(os);
  return os.str();
}

json load_manifest(const Workspace& ws) {
  if (!fs::exists(ws.manifest()))
    throw ConfigError("workspace " + ws.root.string() + " is not prepared (no manifest.json); run prepare first");
  auto m = read_json(ws.manifest());
  if (m.value("layout_version", 0) != kLayoutVersion)
    throw ConfigError("workspace layout version " + std::to_string(m.value("layout_version", 0)) +
                      " is not supported (expected " + std::to_string(kLayoutVersion) + ")");
  return m;
}

Vocab load_vocab(const Workspace& ws, const json& manifest) {
  auto v = Vocab::from_json(read_json(ws.data("vocab.json")));
  if (v.hash() != manifest.at("vocab_hash").get<std::string>())
    throw ConfigError("data/vocab.json does not match the manifest vocabulary hash; rerun prepare");
  return v;
}

std::vector<StudentSequence> load_split(const Workspace& ws, const std::string& split) {
  std::ifstream in(ws.split_file(split));
  if (!in) throw ConfigError("missing split file " + ws.split_file(split).string());
  return read_sequences(in);
}

void print_stats_row(std::ostream& out, const std::string& label, const DatasetStats& s) {
  out << std::left << std::setw(16) << label << std::right << std::setw(10) << s.records << std::setw(10)
      << s.students << std::setw(9) << s.quizzes << std::setw(8) << s.skills << std::fixed << std::setprecision(2)
      << std::setw(12) << s.per_student << std::setw(10) << s.per_quiz << std::setw(11) << s.per_skill
      << std::setw(10) << s.correct << std::setw(11) << s.incorrect << '\n'
      << std::defaultfloat;
}

// ---------------------------------------------------------------- prepare

int cmd_prepare(const RunConfig& cfg, std::ostream& out) {
  if (cfg.raw.empty()) throw ConfigError("paths.raw is not set");
  if (!fs::is_regular_file(cfg.raw)) throw ConfigError("raw interaction log not found: " + cfg.raw.string());
  std::ifstream in(cfg.raw, std::ios::binary);
  if (!in) throw ConfigError("cannot open raw interaction log " + cfg.raw.string());

  ParseResult parsed;
  try {
    parsed = parse_interactions(in, cfg.columns);
  } catch (const ConfigError& e) {
    throw ConfigError(cfg.raw.string() + ": " + e.what());
  }
  auto raw_stats = summarize(std::span<const InteractionRecord>(parsed.records));
  auto filtered = filter_and_order(parsed.records);
  if (filtered.sequences.size() < 3)
    throw ConfigError(cfg.raw.string() + ": only " + std::to_string(filtered.sequences.size()) +
                      " students remain after filtering; at least 3 are needed for a split");
  auto vocab = build_vocab(filtered.sequences);
  auto seqs = index_sequences(filtered.sequences, vocab);
  auto split = split_students(seqs, cfg.ratios, cfg.split_seed);

  auto all_stats = summarize(seqs);
  auto tr = summarize(split.train), va = summarize(split.val), te = summarize(split.test);
  auto ids = [](const std::vector<StudentSequence>& v) {
    json a = json::array();
    for (const auto& s : v) a.push_back(s.user_id);
    return a;
  };
  json stats = {{"raw", to_json(raw_stats)},   {"preprocessed", to_json(all_stats)}, {"train", to_json(tr)},
                {"val", to_json(va)},           {"test", to_json(te)},               {"filter", to_json(filtered.report)},
                {"rejected_rows", parsed.rejects.size()}};
  json split_doc = {{"seed", cfg.split_seed},
                    {"ratios", {{"train", cfg.ratios.train}, {"val", cfg.ratios.val}, {"test", cfg.ratios.test}}},
                    {"train", ids(split.train)},
                    {"val", ids(split.val)},
                    {"test", ids(split.test)}};

  Workspace ws{cfg.workspace};
  WorkspaceLock lock(ws);
  write_file_atomic(ws.data("vocab.json"), to_text(vocab.to_json()));
  write_file_atomic(ws.data("sequences.tsv"), render([&](std::ostream& o) { write_sequences(o, seqs); }));
  write_file_atomic(ws.split_file("train"), render([&](std::ostream& o) { write_sequences(o, split.train); }));
  write_file_atomic(ws.split_file("val"), render([&](std::ostream& o) { write_sequences(o, split.val); }));
  write_file_atomic(ws.split_file("test"), render([&](std::ostream& o) { write_sequences(o, split.test); }));
  write_file_atomic(ws.data("split.json"), to_text(split_doc));
  write_file_atomic(ws.data("stats.json"), to_text(stats));
  write_file_atomic(ws.data("rejects.tsv"), render([&](std::ostream& o) { write_rejects(o, parsed.rejects); }));

  json manifest = fs::exists(ws.manifest()) ? read_json(ws.manifest()) : json::object();
  const auto vocab_hash = vocab.hash();
  if (manifest.value("vocab_hash", "") != vocab_hash) manifest.erase("train");
  manifest["layout_version"] = kLayoutVersion;
  manifest["config_hash"] = cfg.hash();
  manifest["vocab_hash"] = vocab_hash;
  manifest["seeds"] = {{"split", cfg.split_seed}, {"dkt", cfg.dkt.seed}};
  manifest["prepare"] = {{"raw_sha256", sha256_hex(read_file(cfg.raw))}};
  write_file_atomic(ws.manifest(), to_text(manifest));

  out << "Prepared " << ws.root.string() << " from " << cfg.raw.string() << "\n";
  out << std::left << std::setw(16) << "" << std::right << std::setw(10) << "records" << std::setw(10)
      << "students" << std::setw(9) << "quizzes" << std::setw(8) << "skills" << std::setw(12) << "per-student"
      << std::setw(10) << "per-quiz" << std::setw(11) << "per-skill" << std::setw(10) << "correct"
      << std::setw(11) << "incorrect" << '\n';
  print_stats_row(out, "before", raw_stats);
  print_stats_row(out, "after", all_stats);
  print_stats_row(out, "train", tr);
  print_stats_row(out, "val", va);
  print_stats_row(out, "test", te);
  const auto& r = filtered.report;
  out << "dropped: " << r.missing << " missing-field, " << r.multi_skill << " multi-skill, " << r.duplicates
      << " duplicate rows, " << r.short_students << " short students (" << r.short_records << " rows); " << parsed.rejects.size() << " malformed rows\n";
  return 0;
}

// ---------------------------------------------------------------- train

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  Workspace ws{cfg.workspace};
  WorkspaceLock lock(ws);
  auto manifest = load_manifest(ws);
  auto vocab = load_vocab(ws, manifest);
  auto train_set = load_split(ws, "train");
  auto val_set = load_split(ws, "val");
  if (train_set.empty() || val_set.empty()) throw ConfigError("train and val splits must both be non-empty");

  out << "Training DKT on " << train_set.size() << " students (" << vocab.num_skills() << " skills)\n";
  auto result = dkt::train(train_set, val_set, vocab.num_skills(), cfg.dkt, [&](const dkt::EpochLog& e) {
    out << "epoch " << std::setw(3) << e.epoch << "  train " << std::fixed << std::setprecision(5) << e.train_loss
        << "  val " << e.val_loss << std::defaultfloat << (e.improved ? "  *" : "") << '\n'
        << std::flush;
  });
  result.model.vocab_hash = vocab.hash();

  json epochs = json::array();
  json timing = json::array();
  for (const auto& e : result.log) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
                      {"improved", e.improved}});
    timing.push_back({{"epoch", e.epoch}, {"seconds", e.seconds}});
  }
  json log = {{"config", dkt::to_json(cfg.dkt)},
              {"epochs_run", result.log.size()},
              {"best_epoch", result.best_epoch},
              {"best_val_loss", result.best_val_loss},
              {"stopped_early", result.stopped_early},
              {"epochs", epochs}};
  const auto ckpt = to_text(dkt::checkpoint_to_json(result.model));
  write_file_atomic(ws.checkpoint(), ckpt);
  write_file_atomic(ws.train_log(), to_text(log));
  if (!cfg.deterministic)
    write_file_atomic(ws.timing(), to_text({{"seconds", result.seconds}, {"epochs", timing}}));
  else if (fs::exists(ws.timing()))
    fs::remove(ws.timing());

  manifest["train"] = {{"checkpoint_sha256", sha256_hex(ckpt)}, {"seed", cfg.dkt.seed},
                       {"best_epoch", result.best_epoch}};
  write_file_atomic(ws.manifest(), to_text(manifest));

  out << "epochs run: " << result.log.size() << (result.stopped_early ? " (early stop)" : "")
      << ", best epoch " << result.best_epoch << ", best val loss " << std::fixed << std::setprecision(5)
      << result.best_val_loss << ", wall time " << std::setprecision(1) << result.seconds << " s\n"
      << std::defaultfloat;
  return 0;
}

// ---------------------------------------------------------------- predict

int cmd_predict(const RunConfig& cfg, const std::string& split, const std::string& tag, std::ostream& out) {
  Workspace ws{cfg.workspace};
  WorkspaceLock lock(ws);
  auto manifest = load_manifest(ws);
  const auto vocab_hash = manifest.at("vocab_hash").get<std::string>();
  if (!fs::exists(ws.checkpoint())) throw ConfigError("no checkpoint in " + ws.root.string() + "; run train first");
  auto model = dkt::checkpoint_from_json(read_json(ws.checkpoint()), vocab_hash);
  auto seqs = load_split(ws, split);

  std::vector<PredictionRecord> records;
  std::vector<MasteryTrajectory> trajectories;
  for (const auto& s : seqs) {
    if (s.size() < 2) continue;
    auto r = dkt::predict_sequence(model, s, tag);
    records.insert(records.end(), r.begin(), r.end());
    trajectories.push_back(dkt::mastery_trajectory(model, s));
  }
  write_file_atomic(ws.predictions(tag),
                    render([&](std::ostream& o) { write_predictions(o, records, vocab_hash); }));
  write_file_atomic(ws.trajectories(tag),
                    render([&](std::ostream& o) { write_trajectories(o, trajectories, vocab_hash); }));
  out << "Wrote " << records.size() << " predictions for " << trajectories.size() << " " << split
      << " students to " << ws.predictions(tag).string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- probe

int cmd_probe(const RunConfig& cfg, const std::string& tag, bool mastery, bool double_run, std::ostream& out,
              std::ostream& err) {
  Workspace ws{cfg.workspace};
  WorkspaceLock lock(ws);
  auto manifest = load_manifest(ws);
  auto vocab = load_vocab(ws, manifest);
  const auto vocab_hash = vocab.hash();
  auto seqs = load_split(ws, cfg.probe.split);
  if (cfg.probe.max_students > 0 && seqs.size() > cfg.probe.max_students) seqs.resize(cfg.probe.max_students);

  auto pc = cfg.probe.client;
  if (const char* token = std::getenv("KT_PROBE_TOKEN")) pc.auth_token = token;
  pc.cache_dir = ws.cache_dir();
  probe::Client client(pc);
  probe::Names names{&vocab};

  std::vector<int> rep_quiz;
  if (mastery) {
    auto train_set = load_split(ws, "train");
    auto primary = probe::representative_quizzes(train_set, vocab.num_skills());
    auto all = load_split(ws, "train");
    for (const auto& split : {"val", "test"}) {
      auto more = load_split(ws, split);
      all.insert(all.end(), more.begin(), more.end());
    }
    auto fallback = probe::representative_quizzes(all, vocab.num_skills());
    for (int k = 0; k < vocab.num_skills(); ++k) {
      auto q = primary[static_cast<std::size_t>(k)] ? primary[static_cast<std::size_t>(k)]
                                                     : fallback[static_cast<std::size_t>(k)];
      if (!q) throw RuntimeFailure("skill " + vocab.skill_id(k) + " has no quiz in the prepared data");
      rep_quiz.push_back(*q);
    }
  }

  std::vector<PredictionRecord> records;
  std::vector<MasteryTrajectory> trajectories;
  std::string audit;
  std::size_t unresolved = 0, truncated = 0, cell_unresolved = 0;
  auto append_audit = [&](const std::vector<probe::AuditEntry>& entries, const char* kind) {
    for (const auto& e : entries) {
      auto j = probe::to_json(e);
      j["kind"] = kind;
      j.erase("cache");
      audit += j.dump() + "\n";
    }
  };
  try {
    for (const auto& s : seqs) {
      if (s.size() < 2) continue;
      auto run = probe::probe_sequence(client, s, names, tag);
      unresolved += run.unresolved;
      truncated += run.truncated;
      records.insert(records.end(), run.records.begin(), run.records.end());
      append_audit(run.audit, "next_step");
      if (mastery) {
        auto m = probe::probe_mastery(client, s, names, rep_quiz);
        cell_unresolved += m.unresolved;
        trajectories.push_back(std::move(m.trajectory));
        append_audit(m.audit, "mastery");
      }
    }
  } catch (const probe::ProbeError& e) {
    err << "probe stopped: " << e.what() << "\n"
        << client.network_requests() << " requests made; completed steps are cached under "
        << ws.cache_dir().string() << " and will be reused when the probe is rerun\n";
    throw;
  }

  write_file_atomic(ws.predictions(tag), render([&](std::ostream& o) { write_predictions(o, records, vocab_hash); }));
  if (mastery)
    write_file_atomic(ws.trajectories(tag),
                      render([&](std::ostream& o) { write_trajectories(o, trajectories, vocab_hash); }));
  write_file_atomic(ws.probe_dir() / (tag + ".audit.jsonl"), audit);
  json coverage = {{"model", pc.model},
                   {"split", cfg.probe.split},
                   {"students", seqs.size()},
                   {"records", records.size()},
                   {"unresolved", unresolved},
                   {"truncated_prompts", truncated}};
  if (mastery) coverage["mastery_cells_unresolved"] = cell_unresolved;
  write_file_atomic(ws.probe_dir() / (tag + ".coverage.json"), to_text(coverage));

  out << "Probed " << records.size() << " steps for " << seqs.size() << " students: " << unresolved
      << " unresolved, " << truncated << " truncated prompts; " << client.network_requests() << " requests, "
      << client.cache_hits() << " cache hits\n";

  if (double_run) {
    auto pc2 = pc;
    pc2.read_cache = false;
    probe::Client second(pc2);
    std::vector<PredictionRecord> again;
    for (const auto& s : seqs) {
      if (s.size() < 2) continue;
      auto run = probe::probe_sequence(second, s, names, tag);
      again.insert(again.end(), run.records.begin(), run.records.end());
    }
    auto st = probe::compare_runs(records, again);
    write_file_atomic(ws.probe_dir() / (tag + ".stability.json"), to_text(probe::to_json(st)));
    out << "double run: " << st.compared << " compared, " << st.differing << " differing, "
        << st.resolution_mismatch << " resolution mismatches, max |delta| " << st.max_abs_delta << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- evaluate

std::vector<std::string> discover_tags(const Workspace& ws) {
  std::vector<std::string> tags;
  auto dir = ws.root / "predictions";
  if (fs::is_directory(dir))
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".tsv") tags.push_back(e.path().stem().string());
  std::sort(tags.begin(), tags.end());
  return tags;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

int cmd_evaluate(const RunConfig& cfg, std::vector<std::string> tags, std::ostream& out, std::ostream& err) {
  Workspace ws{cfg.workspace};
  WorkspaceLock lock(ws);
  auto manifest = load_manifest(ws);
  auto vocab = load_vocab(ws, manifest);
  const auto vocab_hash = vocab.hash();
  if (tags.empty()) tags = discover_tags(ws);

  std::vector<eval::ModelReport> reports;
  std::map<std::string, std::vector<MasteryTrajectory>> trajectories;
  bool skipped = false;
  for (const auto& tag : tags) {
    if (!fs::exists(ws.predictions(tag))) {
      err << "missing prediction dump for '" << tag << "' (" << ws.predictions(tag).string() << "), skipped\n";
      skipped = true;
      continue;
    }
    std::ifstream in(ws.predictions(tag));
    auto dump = read_predictions(in);
    if (dump.vocab_hash != vocab_hash)
      throw ConfigError("prediction dump '" + tag + "' was made against a different vocabulary (" +
                        (dump.vocab_hash.empty() ? std::string("none recorded") : dump.vocab_hash.substr(0, 12)) +
                        "); regenerate it");
    std::vector<MasteryTrajectory> trs;
    if (fs::exists(ws.trajectories(tag))) {
      std::ifstream tin(ws.trajectories(tag));
      trs = read_trajectories(tin);
    }
    try {
      reports.push_back(eval::evaluate_model(tag, dump.records, trs, cfg.eval.options));
    } catch (const std::invalid_argument& e) {
      throw RuntimeFailure("cannot evaluate '" + tag + "': " + e.what());
    }
    trajectories[tag] = std::move(trs);
  }
  if (reports.empty()) {
    err << "no prediction dumps to evaluate\n";
    return 1;
  }

  json models = json::array();
  for (const auto& r : reports) {
    models.push_back(eval::to_json(r));
    write_file_atomic(ws.reports() / ("roc_" + r.model_tag + ".tsv"), eval::roc_tsv(r.roc));
  }
  write_file_atomic(ws.reports() / "metrics.json",
                    to_text({{"vocab_hash", vocab_hash}, {"config_hash", cfg.hash()}, {"models", models}}));

  std::vector<std::string> names;
  for (int k = 0; k < vocab.num_skills(); ++k)
    names.push_back(vocab.skill_name(k).empty() ? vocab.skill_id(k) : vocab.skill_name(k));
  for (const auto& user : cfg.eval.heatmap_students) {
    bool found = false;
    for (const auto& [tag, trs] : trajectories)
      for (const auto& tr : trs) {
        if (tr.user_id != user) continue;
        found = true;
        eval::HeatmapOptions ho;
        ho.title = tag + ", student " + user;
        ho.all_skills = cfg.eval.heatmap_all_skills;
        auto h = eval::heatmap_export(tr, names, ho);
        auto base = ws.reports() / "heatmaps" / (tag + "_" + user);
        write_file_atomic(base.string() + ".svg", h.svg);
        write_file_atomic(base.string() + ".tsv", h.matrix_tsv);
        out << "heatmap " << base.string() << ".svg: " << h.annotations.size() << " contradicting updates over "
            << tr.length() << " steps\n";
      }
    if (!found) err << "no trajectory for heatmap student '" << user << "'\n";
  }

  out << std::left << std::setw(14) << "model" << std::right << std::setw(8) << "AUC" << std::setw(8) << "ACC"
      << std::setw(10) << "rec(0)" << std::setw(10) << "rec(1)" << std::setw(9) << "t*" << std::setw(12)
      << "volatility" << std::setw(15) << "inconsistency" << std::setw(12) << "unresolved" << '\n';
  for (const auto& r : reports) {
    out << std::left << std::setw(14) << r.model_tag << std::right << std::setw(8) << fmt(r.roc.auc)
        << std::setw(8) << fmt(r.confusion.accuracy) << std::setw(10) << fmt(r.confusion.low.recall)
        << std::setw(10) << fmt(r.confusion.high.recall) << std::setw(9)
        << (std::isfinite(r.roc.youden_threshold) ? fmt(r.roc.youden_threshold) : std::string("inf"))
        << std::setw(12) << (r.coherence ? fmt(r.coherence->volatility()) : "-") << std::setw(15)
        << (r.coherence ? fmt(r.coherence->inconsistency()) : "-") << std::setw(12) << r.unresolved << '\n';
  }
  out << "stage errors (threshold t*, " << (cfg.eval.options.stage_averaging == eval::Averaging::kMicro ? "micro" : "macro")
      << "):\n";
  for (const auto& r : reports)
    for (auto p : {eval::Profile::kStable, eval::Profile::kSwitching}) {
      out << "  " << std::left << std::setw(14) << r.model_tag << std::setw(10) << eval::to_string(p) << std::right;
      for (auto s : {eval::Stage::kEarly, eval::Stage::kMiddle, eval::Stage::kLate}) {
        const auto& c = r.stages.at(p, s);
        out << "  " << eval::to_string(s) << ' ' << (c.n ? fmt(c.error) : std::string("-"));
      }
      out << '\n';
    }
  out << "reports written to " << ws.reports().string() << "\n";
  return skipped ? 1 : 0;
}

// ---------------------------------------------------------------- gradcheck

int cmd_gradcheck(std::uint64_t seed, std::ostream& out) {
  const int K = 5, d_in = 3, d_h = 4, T = 6, B = 2;
  Rng rng(seed);
  std::vector<StudentSequence> seqs;
  for (int b = 0; b < B; ++b) {
    StudentSequence s{std::to_string(b), {}};
    const int len = b == 0 ? T : T - 2;
    for (int t = 0; t < len; ++t)
      s.steps.push_back({static_cast<int>(rng.below(K)), t, static_cast<int>(rng.below(2))});
    seqs.push_back(std::move(s));
  }
  auto batch = dkt::build_batch(seqs, K, T);
  auto params = dkt::DktParams<double>::init(K, d_in, d_h, seed);
  for (auto* b : {&params.gru.bz, &params.gru.br, &params.gru.bh, &params.bout})
    for (Eigen::Index i = 0; i < b->size(); ++i) b->data()[i] = rng.uniform(-0.5, 0.5);
  const auto start = std::chrono::steady_clock::now();
  auto res = dkt::grad_check(params, batch, 1e-5);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool ok = res.max_relative_error < 1e-4;
  out << "gradcheck K=" << K << " d_in=" << d_in << " d_h=" << d_h << " T=" << T << " B=" << B << ": "
      << res.checked << " entries, max relative error " << std::scientific << std::setprecision(3)
      << res.max_relative_error << std::defaultfloat << " at " << dkt::DktParams<double>::kNames[res.tensor] << "("
      << res.row << "," << res.col << ") in " << std::fixed << std::setprecision(3) << secs << " s"
      << std::defaultfloat << (ok ? " [ok]" : " [FAIL]") << "\n";
  return ok ? 0 : 1;
}

// ---------------------------------------------------------------- synth

int cmd_synth(const RunConfig& cfg, std::ostream& out) {
  auto corpus = synth::generate(cfg.synth);
  Workspace ws{cfg.workspace};
  WorkspaceLock lock(ws);
  const auto dir = ws.synth_dir();
  write_file_atomic(dir / "interactions.csv", render([&](std::ostream& o) { synth::write_raw_csv(o, corpus); }));
  write_file_atomic(dir / "oracle.tsv", render([&](std::ostream& o) { synth::write_oracle(o, corpus); }));
  auto seqs = corpus.sequences();
  write_file_atomic(dir / "sequences.tsv", render([&](std::ostream& o) { write_sequences(o, seqs); }));
  const double auc = synth::oracle_auc(corpus);
  write_file_atomic(dir / "spec.json", to_text({{"spec", synth::to_json(cfg.synth)}, {"oracle_auc", auc}}));
  std::size_t steps = 0;
  for (const auto& s : seqs) steps += s.size();
  out << "Generated " << seqs.size() << " students, " << steps << " interactions in " << dir.string()
      << "\noracle AUC " << fmt(auc, 6) << "\nset paths.raw to " << (dir / "interactions.csv").string()
      << " to prepare it\n";
  return 0;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> artifact_hashes(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    auto rel = fs::relative(e.path(), root).generic_string();
    if (rel == ".lock" || rel.rfind("cache/", 0) == 0) continue;
    out.emplace_back(rel, sha256_hex(read_file(e.path())));
  }
  std::sort(out.begin(), out.end());
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knowledge tracing toolkit: DKT training, LLM probing and evaluation", "ktrace"};
  app.fallthrough();
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("-c,--config", config_path, "JSON configuration file");
  app.add_option("--set", sets, "Override a config value, e.g. --set dkt.max_epochs=20 (repeatable)");

  auto* prepare = app.add_subcommand("prepare", "Parse, filter, index and split the raw interaction log");
  auto* train = app.add_subcommand("train", "Train DKT on the prepared split");
  std::string predict_split = "test", predict_tag = "dkt";
  auto* predict = app.add_subcommand("predict", "Write DKT prediction dumps and mastery trajectories");
  predict->add_option("--split", predict_split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  predict->add_option("--tag", predict_tag, "Model tag of the dump");
  std::string probe_tag = "llm";
  bool probe_mastery = false, probe_double = false;
  auto* probe = app.add_subcommand("probe", "Probe a served language model for next-step probabilities");
  probe->add_option("--tag", probe_tag, "Model tag of the dump");
  probe->add_flag("--mastery", probe_mastery, "Also probe every skill at every step (T x K requests)");
  probe->add_flag("--double-run", probe_double, "Repeat the probe without the cache and report deltas");
  std::vector<std::string> eval_tags;
  auto* evaluate = app.add_subcommand("evaluate", "Compute metrics, ROC data, stage errors and heatmaps");
  evaluate->add_option("--tags", eval_tags, "Model tags to evaluate (default: every dump)")->delimiter(',');
  std::uint64_t gc_seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of the DKT gradients");
  gradcheck->add_option("--seed", gc_seed, "Seed of the random model and batch");
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic BKT corpus into the workspace");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run 'ktrace --help' for usage\n";
    return 2;
  }

  try {
    if (gradcheck->parsed()) return cmd_gradcheck(gc_seed, out);
    std::optional<fs::path> file;
    if (!config_path.empty()) file = config_path;
    auto cfg = load_config(file, sets);
    if (prepare->parsed()) return cmd_prepare(cfg, out);
    if (train->parsed()) return cmd_train(cfg, out);
    if (predict->parsed()) return cmd_predict(cfg, predict_split, predict_tag, out);
    if (probe->parsed()) return cmd_probe(cfg, probe_tag, probe_mastery, probe_double, out, err);
    if (evaluate->parsed()) return cmd_evaluate(cfg, eval_tags, out, err);
    if (synth_cmd->parsed()) return cmd_synth(cfg, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace kt::cli
