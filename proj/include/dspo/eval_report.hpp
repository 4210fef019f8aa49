#pragma once

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "dspo/iqa.hpp"

namespace dspo {

enum class Judgement { a, b, tie };

inline std::string to_string(Judgement j) { return j == Judgement::a ? "A" : j == Judgement::b ? "B" : "tie"; }

/// Pairwise judge: the higher normalize_aggregate score over {a, b} wins.
inline Judgement automatic_judge(const RasterImage& a, const RasterImage& b, const RasterImage& gt,
                                 const MetricSuite& suite) {
  if (!a.tensor().same_shape(b.tensor()) || !a.tensor().same_shape(gt.tensor()))
    throw InvalidArgument("automatic_judge: shape mismatch");
  const auto s = normalize_aggregate({suite.evaluate(a, gt), suite.evaluate(b, gt)});
  if (s[0] > s[1]) return Judgement::a;
  if (s[1] > s[0]) return Judgement::b;
  return Judgement::tie;
}

struct Interval {
  double lo = 0.0, hi = 1.0;
};

inline constexpr double kZ95 = 1.959963984540054;

/// Wilson score interval for `wins` successes out of `n` trials.
inline Interval wilson_interval(long wins, long n, double z = kZ95) {
  if (n <= 0) throw InvalidArgument("wilson_interval needs n > 0");
  if (wins < 0 || wins > n) throw InvalidArgument("wins outside [0, n]");
  const double p = static_cast<double>(wins) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double centre = (p + z2 / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

struct WinRateResult {
  long wins = 0, losses = 0, ties = 0;
  double rate = 0.0;
  Interval ci95;
  std::vector<double> per_round;  // NaN for a round that was all ties

  long trials() const { return wins + losses + ties; }
};

inline void to_json(nlohmann::json& j, const WinRateResult& r) {
  auto rounds = nlohmann::json::array();
  for (double v : r.per_round) rounds.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json());
  j = {{"wins", r.wins},       {"losses", r.losses},           {"ties", r.ties},
       {"rate", std::isfinite(r.rate) ? nlohmann::json(r.rate) : nlohmann::json()},       {"ci95", {r.ci95.lo, r.ci95.hi}}, {"per_round", rounds}};
}

/// Pools judgements from every round; ties are reported but excluded from the rate.
/// When everything ties the rate is NaN and the interval is [0,1].
inline WinRateResult tally_win_rate(const std::vector<std::vector<Judgement>>& rounds) {
  WinRateResult r;
  for (const auto& round : rounds) {
    long w = 0, l = 0;
    for (Judgement j : round) {
      if (j == Judgement::a) ++w;
      else if (j == Judgement::b) ++l;
      else ++r.ties;
    }
    r.wins += w;
    r.losses += l;
    r.per_round.push_back(w + l ? static_cast<double>(w) / (w + l) : std::nan(""));
  }
  if (r.wins + r.losses == 0) {
    log::warn("every comparison tied; win rate undefined");
    r.rate = std::nan("");
    r.ci95 = {0.0, 1.0};
    return r;
  }
  r.rate = static_cast<double>(r.wins) / (r.wins + r.losses);
  r.ci95 = wilson_interval(r.wins, r.wins + r.losses);
  return r;
}

using PairJudge = std::function<Judgement(const RasterImage& a, const RasterImage& b, const RasterImage& gt, int round)>;

/// Win rate of A over B. outputs_*[r][i] is the output for item i in round r.
inline WinRateResult win_rate(const std::vector<std::vector<RasterImage>>& outputs_a,
                              const std::vector<std::vector<RasterImage>>& outputs_b,
                              const std::vector<RasterImage>& gts, const PairJudge& judge) {
  if (outputs_a.size() != outputs_b.size() || outputs_a.empty()) throw InvalidArgument("win_rate: round mismatch");
  std::vector<std::vector<Judgement>> rounds;
  for (std::size_t r = 0; r < outputs_a.size(); ++r) {
    if (outputs_a[r].size() != gts.size() || outputs_b[r].size() != gts.size())
      throw InvalidArgument("win_rate: outputs and ground truths are not aligned");
    std::vector<Judgement> js;
    for (std::size_t i = 0; i < gts.size(); ++i) js.push_back(judge(outputs_a[r][i], outputs_b[r][i], gts[i], int(r)));
    rounds.push_back(std::move(js));
  }
  return tally_win_rate(rounds);
}

/// Same outputs judged in `rounds` independent judge rounds.
inline WinRateResult win_rate(const std::vector<RasterImage>& outputs_a, const std::vector<RasterImage>& outputs_b,
                              const std::vector<RasterImage>& gts, const PairJudge& judge, int rounds = 3) {
  if (rounds < 1) throw InvalidArgument("rounds must be >= 1");
  return win_rate(std::vector(rounds, outputs_a), std::vector(rounds, outputs_b), gts, judge);
}

/// Recorded pairwise choices, one JSON object per line:
/// {"item": i, "round": r, "choice": "A"|"B"|"tie"}.
inline std::vector<std::vector<Judgement>> read_human_judgements(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::map<int, std::map<int, Judgement>> by_round;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const std::string c = j.at("choice");
      const Judgement v = c == "A" ? Judgement::a : c == "B" ? Judgement::b : c == "tie" ? Judgement::tie
                          : throw InvalidArgument("choice must be A|B|tie");
      by_round[j.at("round").get<int>()][j.at("item").get<int>()] = v;
    } catch (const std::exception& e) {
      throw IoError(path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  std::vector<std::vector<Judgement>> out;
  for (auto& [_, items] : by_round) {
    std::vector<Judgement> r;
    for (auto& [__, j] : items) r.push_back(j);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports.

struct MethodMetrics {
  std::string method;
  MetricVector metrics;
  friend bool operator==(const MethodMetrics&, const MethodMetrics&) = default;
};

/// Element-wise mean of metric vectors.
inline MetricVector mean_metrics(const std::vector<MetricVector>& rows) {
  if (rows.empty()) throw InvalidArgument("mean_metrics: no rows");
  MetricVector m;
  for (const auto& r : rows)
    for (int k = 0; k < kMetricCount; ++k) m[k] += r[k] / rows.size();
  return m;
}

inline std::string metrics_csv(const std::vector<MethodMetrics>& table) {
  std::ostringstream os;
  os << "method";
  for (auto n : kMetricNames) os << ',' << n;
  os << '\n';
  os.precision(17);
  for (const auto& row : table) {
    if (row.method.find_first_of(",\"\n") != std::string::npos)
      throw InvalidArgument("method name '" + row.method + "' cannot be written to CSV");
    os << row.method;
    for (int k = 0; k < kMetricCount; ++k) os << ',' << row.metrics[k];
    os << '\n';
  }
  return os.str();
}

inline std::vector<MethodMetrics> parse_metrics_csv(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string line;
  if (!std::getline(is, line)) throw InvalidArgument("empty metrics CSV");
  std::string expected = "method";
  for (auto n : kMetricNames) expected += "," + std::string(n);
  if (line != expected) throw InvalidArgument("unexpected metrics CSV header: " + line);
  std::vector<MethodMetrics> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    MethodMetrics row;
    std::getline(ls, row.method, ',');
    for (int k = 0; k < kMetricCount; ++k) {
      if (!std::getline(ls, cell, ',')) throw InvalidArgument("short metrics CSV row: " + line);
      row.metrics[k] = std::stod(cell);
    }
    out.push_back(row);
  }
  return out;
}

inline nlohmann::json normalized_report(const std::vector<MethodMetrics>& table) {
  std::vector<MetricVector> raw;
  for (const auto& r : table) raw.push_back(r.metrics);
  const auto norm = normalize_positive_trend(raw);
  nlohmann::json methods = nlohmann::json::object();
  for (std::size_t i = 0; i < table.size(); ++i) {
    nlohmann::json m = nlohmann::json::object();
    for (int k = 0; k < kMetricCount; ++k) m[std::string(kMetricNames[k])] = norm[i][k];
    methods[table[i].method] = m;
  }
  return {{"metrics", kMetricNames}, {"normalization", "min-max per metric, higher is better"}, {"methods", methods}};
}

/// Writes metrics.csv (raw) and metrics_normalized.json into `dir`.
inline void export_report(const std::vector<MethodMetrics>& table, const fs::path& dir) {
  if (table.empty()) throw InvalidArgument("export_report needs at least one method");
  fs::create_directories(dir);
  write_file_atomic(dir / "metrics.csv", metrics_csv(table));
  write_file_atomic(dir / "metrics_normalized.json", normalized_report(table).dump(2));
}

}  // namespace dspo
