#include "kt/predictions.hpp"

#include <charconv>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>

#include "kt/util.hpp"

namespace kt {
namespace {

constexpr std::string_view kHashPrefix = "# vocab_hash=";

int to_int(const std::string& s, std::size_t line) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ConfigError("line " + std::to_string(line) + ": expected integer, got '" + s + "'");
  }
  return v;
}

std::optional<double> to_prob(const std::string& s, std::size_t line) {
  if (s == "NA") return std::nullopt;
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !(v >= 0.0 && v <= 1.0)) {
    throw ConfigError("line " + std::to_string(line) + ": bad probability '" + s + "'");
  }
  return v;
}

std::string prob_text(double p) { return std::isnan(p) ? "NA" : format_double(p); }

}  // namespace

void write_predictions(std::ostream& out, std::span<const PredictionRecord> records,
                       const std::string& vocab_hash) {
  if (!vocab_hash.empty()) out << kHashPrefix << vocab_hash << '\n';
  out << kDumpHeader << '\n';
  for (const auto& r : records) {
    out << r.user_id << '\t' << r.step << '\t' << r.skill << '\t' << r.y_true << '\t'
        << (r.p_pred ? format_double(*r.p_pred) : std::string("NA")) << '\t' << r.model_tag
        << '\n';
  }
}

PredictionDump read_predictions(std::istream& in) {
  PredictionDump dump;
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.rfind(kHashPrefix, 0) == 0) {
      dump.vocab_hash = line.substr(kHashPrefix.size());
      continue;
    }
    if (line[0] == '#') continue;
    if (!header_seen) {
      if (line != kDumpHeader) throw ConfigError("prediction dump: unexpected header '" + line + "'");
      header_seen = true;
      continue;
    }
    auto f = split(line, '\t');
    if (f.size() != 6) throw ConfigError("prediction dump line " + std::to_string(lineno) + ": expected 6 fields");
    PredictionRecord r;
    r.user_id = f[0];
    r.step = to_int(f[1], lineno);
    r.skill = to_int(f[2], lineno);
    r.y_true = to_int(f[3], lineno);
    if (r.y_true != 0 && r.y_true != 1) throw ConfigError("prediction dump line " + std::to_string(lineno) + ": y_true must be 0/1");
    r.p_pred = to_prob(f[4], lineno);
    r.model_tag = f[5];
    dump.records.push_back(std::move(r));
  }
  if (!header_seen) throw ConfigError("prediction dump: missing header");
  return dump;
}

void write_trajectories(std::ostream& out, std::span<const MasteryTrajectory> trajectories,
                        const std::string& vocab_hash) {
  if (!vocab_hash.empty()) out << kHashPrefix << vocab_hash << '\n';
  const Eigen::Index K = trajectories.empty() ? 0 : trajectories.front().num_skills();
  out << "user_id\tt\tskill\tquiz\ty";
  for (Eigen::Index k = 0; k < K; ++k) out << "\tp" << k;
  out << '\n';
  for (const auto& tr : trajectories) {
    if (tr.num_skills() != K) throw RuntimeFailure("write_trajectories: inconsistent skill count");
    for (Eigen::Index t = 0; t < tr.length(); ++t) {
      const auto& s = tr.steps[static_cast<std::size_t>(t)];
      out << tr.user_id << '\t' << t << '\t' << s.skill << '\t' << s.quiz << '\t' << s.correct;
      for (Eigen::Index k = 0; k < K; ++k) {
        out << '\t' << (tr.resolved(t, k) ? prob_text(tr.P(t, k)) : std::string("NA"));
      }
      out << '\n';
    }
  }
}

std::vector<MasteryTrajectory> read_trajectories(std::istream& in) {
  std::vector<MasteryTrajectory> out;
  std::string line;
  std::size_t lineno = 0;
  Eigen::Index K = -1;
  std::vector<std::vector<double>> rows;
  auto flush = [&]() {
    if (out.empty() || rows.empty()) return;
    auto& tr = out.back();
    const auto T = static_cast<Eigen::Index>(rows.size());
    tr.P.resize(T, K);
    tr.unresolved = decltype(tr.unresolved)::Zero(T, K);
    for (Eigen::Index t = 0; t < T; ++t) {
      for (Eigen::Index k = 0; k < K; ++k) {
        const double v = rows[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)];
        tr.P(t, k) = v;
        if (std::isnan(v)) tr.unresolved(t, k) = 1;
      }
    }
    rows.clear();
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto f = split(line, '\t');
    if (K < 0) {
      if (f.size() < 5 || f[0] != "user_id") throw ConfigError("trajectory file: bad header");
      K = static_cast<Eigen::Index>(f.size()) - 5;
      continue;
    }
    if (static_cast<Eigen::Index>(f.size()) != K + 5) {
      throw ConfigError("trajectory file line " + std::to_string(lineno) + ": wrong field count");
    }
    const int t = to_int(f[1], lineno);
    if (out.empty() || out.back().user_id != f[0] || t == 0) {
      flush();
      out.push_back(MasteryTrajectory{f[0], {}, {}, {}});
    }
    if (t != static_cast<int>(out.back().steps.size())) {
      throw ConfigError("trajectory file line " + std::to_string(lineno) + ": steps out of order");
    }
    out.back().steps.push_back({to_int(f[2], lineno), to_int(f[3], lineno), to_int(f[4], lineno)});
    std::vector<double> row;
    row.reserve(static_cast<std::size_t>(K));
    for (Eigen::Index k = 0; k < K; ++k) {
      auto p = to_prob(f[static_cast<std::size_t>(k) + 5], lineno);
      row.push_back(p ? *p : std::numeric_limits<double>::quiet_NaN());
    }
    rows.push_back(std::move(row));
  }
  flush();
  return out;
}

}  // namespace kt
