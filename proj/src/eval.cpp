#include "kt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "kt/util.hpp"

namespace kt::eval {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_labels(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores and labels differ in length");
  for (int y : labels)
    if (y != 0 && y != 1) throw std::invalid_argument("labels must be 0 or 1");
  for (double s : scores)
    if (std::isnan(s)) throw std::invalid_argument("NaN score");
}

std::string threshold_text(double t) {
  if (t == kInf) return "inf";
  if (t == -kInf) return "-inf";
  return format_double(t);
}

nlohmann::json threshold_json(double t) {
  if (std::isinf(t)) return threshold_text(t);
  return t;
}

int sign_of(double d) { return (d > 0.0) - (d < 0.0); }

// One consecutive-pair term: dP from `before` to `after` with the response y
// observed at the later step.
void add_pair(CoherenceCounts& c, double before, double after, int y) {
  double d = after - before;
  c.abs_change += std::abs(d);
  ++c.pairs;
  int expected = y == 1 ? 1 : -1;
  if (sign_of(d) == -expected) ++c.mismatches;
}

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Viridis sampled at five stops, linearly interpolated.
std::string color_for(double p) {
  static constexpr std::array<std::array<double, 3>, 5> stops{{
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
  if (std::isnan(p)) return "#bbbbbb";
  double x = std::clamp(p, 0.0, 1.0) * 4.0;
  auto i = std::min<std::size_t>(static_cast<std::size_t>(x), 3);
  double f = x - static_cast<double>(i);
  char buf[8];
  int rgb[3];
  for (int c = 0; c < 3; ++c)
    rgb[c] = static_cast<int>(std::lround(stops[i][c] + f * (stops[i + 1][c] - stops[i][c])));
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
  return buf;
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

double rank_auc(std::span<const double> scores, std::span<const int> labels) {
  check_labels(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t n1 = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
    // ranks i+1..j share their mean
    double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]] == 1) {
        pos_rank_sum += mid;
        ++n1;
      }
    i = j;
  }
  std::size_t n0 = n - n1;
  if (n1 == 0 || n0 == 0) throw std::invalid_argument("AUC undefined: only one class present");
  double u = pos_rank_sum - static_cast<double>(n1) * static_cast<double>(n1 + 1) / 2.0;
  return u / (static_cast<double>(n1) * static_cast<double>(n0));
}

ThresholdAnalysis roc_auc(std::span<const double> scores, std::span<const int> labels) {
  ThresholdAnalysis a;
  a.auc = rank_auc(scores, labels);
  const std::size_t n = scores.size();
  for (int y : labels) (y == 1 ? a.positives : a.negatives)++;

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });

  const double P = static_cast<double>(a.positives);
  const double N = static_cast<double>(a.negatives);
  a.roc.push_back({0.0, 0.0, kInf});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < n;) {
    double s = scores[idx[i]];
    while (i < n && scores[idx[i]] == s) {
      (labels[idx[i]] == 1 ? tp : fp)++;
      ++i;
    }
    a.roc.push_back({static_cast<double>(fp) / N, static_cast<double>(tp) / P, s});
  }
  a.roc.push_back({1.0, 1.0, -kInf});
  a.youden_threshold = youden_threshold(a);
  for (const auto& pt : a.roc)
    if (pt.threshold == a.youden_threshold) a.youden_j = pt.tpr - pt.fpr;
  return a;
}

ThresholdAnalysis roc_auc(std::span<const PredictionRecord> records) {
  std::vector<double> s;
  std::vector<int> y;
  for (const auto& r : records)
    if (r.resolved()) {
      s.push_back(*r.p_pred);
      y.push_back(r.y_true);
    }
  return roc_auc(s, y);
}

double youden_threshold(const ThresholdAnalysis& analysis) {
  if (analysis.roc.empty()) throw std::invalid_argument("empty ROC");
  // Points are ordered by decreasing threshold, so a strict comparison keeps
  // the larger threshold on ties.
  double best_j = -kInf;
  double best_t = analysis.roc.front().threshold;
  for (const auto& pt : analysis.roc) {
    double j = pt.tpr - pt.fpr;
    if (j > best_j) {
      best_j = j;
      best_t = pt.threshold;
    }
  }
  return best_t;
}

ConfusionMetrics confusion_metrics(std::span<const PredictionRecord> records, double threshold) {
  ConfusionMetrics m;
  m.threshold = threshold;
  for (const auto& r : records) {
    if (!r.resolved()) continue;
    bool pred = *r.p_pred >= threshold;
    if (r.y_true == 1)
      (pred ? m.tp : m.fn)++;
    else
      (pred ? m.fp : m.tn)++;
  }
  auto ratio = [](std::size_t num, std::size_t den, bool& flag) {
    if (den == 0) {
      flag = true;
      return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
  };
  auto fill = [&](ClassMetrics& c, std::size_t hit, std::size_t false_alarm, std::size_t miss) {
    c.precision = ratio(hit, hit + false_alarm, c.zero_division);
    c.recall = ratio(hit, hit + miss, c.zero_division);
    c.f1 = c.precision + c.recall > 0.0 ? 2.0 * c.precision * c.recall / (c.precision + c.recall) : 0.0;
    c.support = hit + miss;
  };
  fill(m.high, m.tp, m.fp, m.fn);
  fill(m.low, m.tn, m.fn, m.fp);
  std::size_t total = m.tp + m.tn + m.fp + m.fn;
  bool unused = false;
  m.accuracy = ratio(m.tp + m.tn, total, unused);
  return m;
}

const char* to_string(Profile p) { return p == Profile::kStable ? "stable" : "switching"; }

const char* to_string(Stage s) {
  switch (s) {
    case Stage::kEarly: return "early";
    case Stage::kMiddle: return "middle";
    case Stage::kLate: return "late";
  }
  return "?";
}

std::size_t count_switches(std::span<const int> y) {
  std::size_t n = 0;
  for (std::size_t t = 1; t < y.size(); ++t) n += y[t] != y[t - 1];
  return n;
}

Profile classify_profile(std::span<const int> y) {
  if (y.empty()) throw std::invalid_argument("empty response sequence");
  return count_switches(y) < 2 ? Profile::kStable : Profile::kSwitching;
}

std::array<std::size_t, 3> stage_sizes(std::size_t n) {
  if (n < 3) return {n, 0, 0};
  std::size_t early = n / 3, middle = (n + 1) / 3;
  return {early, middle, n - early - middle};
}

StageErrorTable stage_errors(std::span<const PredictionRecord> records, double threshold, Averaging averaging) {
  StageErrorTable table;
  table.threshold = threshold;
  table.averaging = averaging;

  std::map<std::string, std::vector<const PredictionRecord*>, decltype(&id_less)> by_user(&id_less);
  for (const auto& r : records) by_user[r.user_id].push_back(&r);

  std::array<std::array<double, 3>, 2> rate_sum{};
  for (auto& [user, recs] : by_user) {
    std::stable_sort(recs.begin(), recs.end(),
                     [](const PredictionRecord* a, const PredictionRecord* b) { return a->step < b->step; });
    std::vector<int> y;
    std::vector<int> wrong;
    for (const auto* r : recs) {
      y.push_back(r->y_true);
      if (r->resolved()) wrong.push_back((*r->p_pred >= threshold ? 1 : 0) != r->y_true);
    }
    auto g = static_cast<std::size_t>(classify_profile(y));
    ++table.students[g];
    auto sizes = stage_sizes(wrong.size());
    std::size_t pos = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      if (sizes[s] == 0) continue;
      std::size_t miss = 0;
      for (std::size_t k = 0; k < sizes[s]; ++k) miss += static_cast<std::size_t>(wrong[pos + k]);
      pos += sizes[s];
      auto& cell = table.cells[g][s];
      cell.n += sizes[s];
      cell.mismatches += miss;
      ++cell.students;
      rate_sum[g][s] += static_cast<double>(miss) / static_cast<double>(sizes[s]);
    }
  }
  for (std::size_t g = 0; g < 2; ++g)
    for (std::size_t s = 0; s < 3; ++s) {
      auto& cell = table.cells[g][s];
      if (cell.n == 0) continue;
      cell.error = averaging == Averaging::kMicro
                       ? static_cast<double>(cell.mismatches) / static_cast<double>(cell.n)
                       : rate_sum[g][s] / static_cast<double>(cell.students);
    }
  return table;
}

std::optional<double> volatility(std::span<const double> p) {
  if (p.size() < 2) return std::nullopt;
  CoherenceCounts c;
  for (std::size_t t = 1; t < p.size(); ++t) add_pair(c, p[t - 1], p[t], 1);
  return c.volatility();
}

std::optional<double> inconsistency(std::span<const double> p, std::span<const int> y) {
  if (p.size() != y.size()) throw std::invalid_argument("P and y differ in length");
  if (p.size() < 2) return std::nullopt;
  CoherenceCounts c;
  for (std::size_t t = 1; t < p.size(); ++t) add_pair(c, p[t - 1], p[t], y[t]);
  return c.inconsistency();
}

CoherenceCounts coherence_counts(const MasteryTrajectory& tr, CoherenceScope scope,
                                 std::vector<AnnotatedCell>* contradictions) {
  CoherenceCounts c;
  const Eigen::Index T = tr.length();
  if (static_cast<Eigen::Index>(tr.steps.size()) != T)
    throw std::invalid_argument("trajectory for " + tr.user_id + " has mismatched step metadata");

  if (scope == CoherenceScope::kAllSkills) {
    for (Eigen::Index t = 1; t < T; ++t)
      for (Eigen::Index k = 0; k < tr.num_skills(); ++k) {
        if (!tr.resolved(t - 1, k) || !tr.resolved(t, k)) {
          ++c.skipped_unresolved;
          continue;
        }
        add_pair(c, tr.P(t - 1, k), tr.P(t, k), tr.steps[static_cast<std::size_t>(t)].correct);
      }
    return c;
  }

  // last practiced step per skill, in order of the later attempt
  std::map<int, Eigen::Index> last;
  for (Eigen::Index t = 0; t < T; ++t) {
    const Step& st = tr.steps[static_cast<std::size_t>(t)];
    auto it = last.find(st.skill);
    if (it != last.end()) {
      Eigen::Index prev = it->second;
      if (!tr.resolved(prev, st.skill) || !tr.resolved(t, st.skill)) {
        ++c.skipped_unresolved;
      } else {
        std::size_t before = c.mismatches;
        add_pair(c, tr.P(prev, st.skill), tr.P(t, st.skill), st.correct);
        if (contradictions && c.mismatches != before)
          contradictions->push_back({t, st.skill, tr.P(prev, st.skill), tr.P(t, st.skill)});
      }
    }
    last[st.skill] = t;
  }
  return c;
}

CoherenceReport coherence(std::span<const MasteryTrajectory> trajectories, CoherenceScope scope) {
  CoherenceReport rep;
  rep.scope = scope;
  for (const auto& tr : trajectories) {
    StudentCoherence sc{tr.user_id, coherence_counts(tr, scope)};
    rep.pooled.add(sc.counts);
    rep.per_student.push_back(std::move(sc));
  }
  return rep;
}

Heatmap heatmap_export(const MasteryTrajectory& tr, std::span<const std::string> skill_names,
                       const HeatmapOptions& opt) {
  Heatmap out;
  const Eigen::Index T = tr.length();
  const Eigen::Index K = tr.num_skills();
  coherence_counts(tr, CoherenceScope::kPracticedSkill, &out.annotations);

  std::vector<int> rows;
  if (opt.all_skills) {
    rows.resize(static_cast<std::size_t>(K));
    std::iota(rows.begin(), rows.end(), 0);
  } else {
    std::set<int> seen;
    for (const auto& st : tr.steps)
      if (seen.insert(st.skill).second) rows.push_back(st.skill);
  }
  std::map<int, std::size_t> row_of;
  for (std::size_t i = 0; i < rows.size(); ++i) row_of[rows[i]] = i;
  auto name = [&](int k) {
    return static_cast<std::size_t>(k) < skill_names.size() ? skill_names[static_cast<std::size_t>(k)]
                                                             : "skill " + std::to_string(k);
  };

  const int cs = opt.cell_size;
  const int left = 220, top = 60, legend_w = 80;
  const int width = left + cs * static_cast<int>(T) + legend_w;
  const int height = top + cs * static_cast<int>(rows.size()) + 40;
  auto cx = [&](Eigen::Index t) { return left + cs * static_cast<int>(t); };
  auto cy = [&](std::size_t r) { return top + cs * static_cast<int>(r); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::string title = opt.title.empty() ? "student " + tr.user_id : opt.title;
  svg << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << xml_escape(title) << "</text>\n";

  for (Eigen::Index t = 0; t < T; ++t) {
    const Step& st = tr.steps[static_cast<std::size_t>(t)];
    svg << "<text x=\"" << cx(t) + cs / 2 << "\" y=\"" << top - 18 << "\" text-anchor=\"middle\" fill=\""
        << (st.correct ? "#1a7f37" : "#cf222e") << "\">" << (st.correct ? "1" : "0") << "</text>\n";
    if (t % 5 == 0)
      svg << "<text x=\"" << cx(t) + cs / 2 << "\" y=\"" << top - 5 << "\" text-anchor=\"middle\">" << t
          << "</text>\n";
  }
  for (std::size_t r = 0; r < rows.size(); ++r)
    svg << "<text x=\"" << left - 6 << "\" y=\"" << cy(r) + cs / 2 + 4 << "\" text-anchor=\"end\">"
        << xml_escape(name(rows[r])) << "</text>\n";

  for (std::size_t r = 0; r < rows.size(); ++r)
    for (Eigen::Index t = 0; t < T; ++t) {
      double p = tr.resolved(t, rows[r]) ? tr.P(t, rows[r]) : std::nan("");
      svg << "<rect x=\"" << cx(t) << "\" y=\"" << cy(r) << "\" width=\"" << cs << "\" height=\"" << cs
          << "\" fill=\"" << color_for(p) << "\"/>\n";
    }

  // reference path through the practiced cell at each step
  svg << "<polyline fill=\"none\" stroke=\"white\" stroke-width=\"2\" points=\"";
  for (Eigen::Index t = 0; t < T; ++t) {
    auto it = row_of.find(tr.steps[static_cast<std::size_t>(t)].skill);
    if (it == row_of.end()) continue;
    svg << (t ? " " : "") << cx(t) + cs / 2 << "," << cy(it->second) + cs / 2;
  }
  svg << "\"/>\n";

  for (const auto& a : out.annotations) {
    auto r = row_of.at(a.skill);
    svg << "<rect x=\"" << cx(a.step) + 1 << "\" y=\"" << cy(r) + 1 << "\" width=\"" << cs - 2 << "\" height=\""
        << cs - 2 << "\" fill=\"none\" stroke=\"#d00000\" stroke-width=\"2\"/>\n";
    svg << "<text x=\"" << cx(a.step) + cs / 2 << "\" y=\"" << cy(r) + cs + 9
        << "\" text-anchor=\"middle\" font-size=\"7\" fill=\"#d00000\">" << fixed2(a.p_after - a.p_before)
        << "</text>\n";
  }

  int lx = left + cs * static_cast<int>(T) + 20;
  for (int i = 0; i <= 10; ++i) {
    double p = 1.0 - i / 10.0;
    svg << "<rect x=\"" << lx << "\" y=\"" << top + i * 10 << "\" width=\"12\" height=\"10\" fill=\""
        << color_for(p) << "\"/>\n";
    if (i % 5 == 0)
      svg << "<text x=\"" << lx + 16 << "\" y=\"" << top + i * 10 + 8 << "\">" << fixed2(p) << "</text>\n";
  }
  svg << "<text x=\"" << left << "\" y=\"" << height - 10 << "\">contradicting updates: " << out.annotations.size()
      << "</text>\n";
  svg << "</svg>\n";
  out.svg = svg.str();

  std::ostringstream m;
  m << "t\tskill\tcorrect";
  for (int k : rows) m << '\t' << name(k);
  m << '\n';
  for (Eigen::Index t = 0; t < T; ++t) {
    const Step& st = tr.steps[static_cast<std::size_t>(t)];
    m << t << '\t' << name(st.skill) << '\t' << st.correct;
    for (int k : rows) m << '\t' << (tr.resolved(t, k) ? format_double(tr.P(t, k)) : "NA");
    m << '\n';
  }
  out.matrix_tsv = m.str();
  return out;
}

std::string roc_tsv(const ThresholdAnalysis& a) {
  std::ostringstream os;
  os << "fpr\ttpr\tthreshold\n";
  for (const auto& pt : a.roc)
    os << format_double(pt.fpr) << '\t' << format_double(pt.tpr) << '\t' << threshold_text(pt.threshold) << '\n';
  return os.str();
}

ModelReport evaluate_model(const std::string& model_tag, std::span<const PredictionRecord> records,
                           std::span<const MasteryTrajectory> trajectories, const EvalOptions& options) {
  std::set<std::tuple<std::string, int, std::string>> keys;
  for (const auto& r : records)
    if (!keys.emplace(r.user_id, r.step, r.model_tag).second)
      throw std::invalid_argument("duplicate prediction for user " + r.user_id + " step " +
                                  std::to_string(r.step));
  ModelReport rep;
  rep.model_tag = model_tag;
  rep.records = records.size();
  rep.unresolved = static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const PredictionRecord& r) { return !r.resolved(); }));
  rep.roc = roc_auc(records);
  rep.confusion = confusion_metrics(records, options.confusion_threshold);
  rep.stages = stage_errors(records, options.stage_threshold.value_or(rep.roc.youden_threshold),
                            options.stage_averaging);
  if (!trajectories.empty()) rep.coherence = coherence(trajectories, options.coherence_scope);
  return rep;
}

nlohmann::json to_json(const ModelReport& r) {
  using nlohmann::json;
  auto cls = [](const ClassMetrics& c) {
    return json{{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1},
                {"support", c.support},     {"zero_division", c.zero_division}};
  };
  json j;
  j["model_tag"] = r.model_tag;
  j["coverage"] = {{"records", r.records},
                   {"resolved", r.records - r.unresolved},
                   {"unresolved", r.unresolved}};
  j["classification"] = {
      {"auc", r.roc.auc},
      {"positives", r.roc.positives},
      {"negatives", r.roc.negatives},
      {"threshold", r.confusion.threshold},
      {"accuracy", r.confusion.accuracy},
      {"confusion", {{"tp", r.confusion.tp}, {"fp", r.confusion.fp}, {"tn", r.confusion.tn}, {"fn", r.confusion.fn}}},
      {"low_performer", cls(r.confusion.low)},
      {"high_performer", cls(r.confusion.high)},
  };
  json stages = json::object();
  for (auto p : {Profile::kStable, Profile::kSwitching}) {
    json row = json::object();
    for (auto s : {Stage::kEarly, Stage::kMiddle, Stage::kLate}) {
      const auto& c = r.stages.at(p, s);
      if (c.n == 0)
        row[to_string(s)] = nullptr;
      else
        row[to_string(s)] = {{"error", c.error}, {"n", c.n}, {"mismatches", c.mismatches}};
    }
    row["students"] = r.stages.students[static_cast<std::size_t>(p)];
    stages[to_string(p)] = row;
  }
  j["stage_errors"] = {{"optimal_threshold", threshold_json(r.roc.youden_threshold)},
                       {"threshold", threshold_json(r.stages.threshold)},
                       {"youden_j", r.roc.youden_j},
                       {"averaging", r.stages.averaging == Averaging::kMicro ? "micro" : "macro"},
                       {"profiles", stages}};
  if (r.coherence) {
    const auto& c = *r.coherence;
    j["coherence"] = {{"scope", c.scope == CoherenceScope::kPracticedSkill ? "practiced_skill" : "all_skills"},
                      {"volatility", c.volatility()},
                      {"inconsistency", c.inconsistency()},
                      {"pairs", c.pooled.pairs},
                      {"mismatches", c.pooled.mismatches},
                      {"skipped_unresolved", c.pooled.skipped_unresolved}};
  }
  return j;
}

}  // namespace kt::eval
