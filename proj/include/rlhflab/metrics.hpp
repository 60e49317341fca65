#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rlhflab/env.hpp"
#include "rlhflab/io.hpp"
#include "rlhflab/numeric.hpp"
#include "rlhflab/policy.hpp"

namespace rlhflab {

// ---------------------------------------------------------------------------
// pairwise ranking metrics
// ---------------------------------------------------------------------------

// PairScorer: callable (const ComparisonRecord&) -> std::pair<double, double>
// giving the scores of (chosen, rejected).

template <typename PairScorer>
double pairwise_accuracy(PairScorer&& scorer,
                         const std::vector<ComparisonRecord>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("pairwise_accuracy: no pairs");
  double correct = 0.0;
  for (const ComparisonRecord& rec : pairs) {
    const auto [s_c, s_r] = scorer(rec);
    if (s_c > s_r) {
      correct += 1.0;
    } else if (s_c == s_r) {
      correct += 0.5;  // exact ties split
    }
  }
  return correct / static_cast<double>(pairs.size());
}

struct CalibrationBin {
  double confidence_mean = 0.0;
  double empirical_accuracy = 0.0;
  long count = 0;
};

struct CalibrationReport {
  std::vector<CalibrationBin> bins;
  double ece = 0.0;  // percentage points
  double accuracy = 0.0;
};

// Each pair is oriented so its predicted preference probability is
// p = sigma(|score difference|) in [0.5, 1]; the outcome is whether the
// higher-scored response is the chosen one (exact ties count half). ECE is
// the count-weighted mean |accuracy - confidence| over equal-width bins,
// reported in percentage points.
template <typename PairScorer>
CalibrationReport expected_calibration_error(
    PairScorer&& scorer, const std::vector<ComparisonRecord>& pairs, int n_bins) {
  if (pairs.empty()) throw std::invalid_argument("calibration: no pairs");
  if (n_bins < 1) throw std::invalid_argument("calibration: need n_bins >= 1");

  std::vector<double> conf_sum(n_bins, 0.0), outcome_sum(n_bins, 0.0);
  std::vector<long> counts(n_bins, 0);
  double correct = 0.0;
  const double width = 0.5 / n_bins;
  for (const ComparisonRecord& rec : pairs) {
    const auto [s_c, s_r] = scorer(rec);
    const double p = sigmoid(std::abs(s_c - s_r));
    const double outcome = s_c > s_r ? 1.0 : (s_c == s_r ? 0.5 : 0.0);
    correct += outcome;
    int bin = static_cast<int>((p - 0.5) / width);
    bin = std::clamp(bin, 0, n_bins - 1);
    conf_sum[bin] += p;
    outcome_sum[bin] += outcome;
    counts[bin] += 1;
  }

  CalibrationReport report;
  report.accuracy = correct / static_cast<double>(pairs.size());
  for (int b = 0; b < n_bins; ++b) {
    CalibrationBin bin;
    bin.count = counts[b];
    if (counts[b] > 0) {
      bin.confidence_mean = conf_sum[b] / counts[b];
      bin.empirical_accuracy = outcome_sum[b] / counts[b];
      report.ece += (static_cast<double>(counts[b]) / pairs.size()) *
                    std::abs(bin.empirical_accuracy - bin.confidence_mean);
    }
    report.bins.push_back(bin);
  }
  report.ece *= 100.0;
  return report;
}

struct CalibrationCurvePoint {
  double delta_mean = 0.0;
  double empirical_accuracy = 0.0;
  double ideal = 0.0;  // sigma(delta_mean)
  long count = 0;
};

// Ranking accuracy as a function of the absolute score difference, with the
// Bradley-Terry ideal sigma(delta) evaluated at each bin's mean difference.
// Bins with no pairs are omitted.
template <typename PairScorer>
std::vector<CalibrationCurvePoint> calibration_curve(
    PairScorer&& scorer, const std::vector<ComparisonRecord>& pairs, int n_bins) {
  if (pairs.empty()) throw std::invalid_argument("calibration_curve: no pairs");
  if (n_bins < 1) throw std::invalid_argument("calibration_curve: need n_bins >= 1");

  std::vector<double> deltas(pairs.size());
  std::vector<double> outcomes(pairs.size());
  double max_delta = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto [s_c, s_r] = scorer(pairs[i]);
    deltas[i] = std::abs(s_c - s_r);
    outcomes[i] = s_c > s_r ? 1.0 : (s_c == s_r ? 0.5 : 0.0);
    max_delta = std::max(max_delta, deltas[i]);
  }
  const double width = max_delta > 0.0 ? max_delta / n_bins : 1.0;

  std::vector<double> delta_sum(n_bins, 0.0), outcome_sum(n_bins, 0.0);
  std::vector<long> counts(n_bins, 0);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    int bin = static_cast<int>(deltas[i] / width);
    bin = std::clamp(bin, 0, n_bins - 1);
    delta_sum[bin] += deltas[i];
    outcome_sum[bin] += outcomes[i];
    counts[bin] += 1;
  }

  std::vector<CalibrationCurvePoint> curve;
  for (int b = 0; b < n_bins; ++b) {
    if (counts[b] == 0) continue;
    CalibrationCurvePoint pt;
    pt.count = counts[b];
    pt.delta_mean = delta_sum[b] / counts[b];
    pt.empirical_accuracy = outcome_sum[b] / counts[b];
    pt.ideal = sigmoid(pt.delta_mean);
    curve.push_back(pt);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// per-category score moments
// ---------------------------------------------------------------------------

struct CategoryMomentsRow {
  int category = 0;
  double mean = 0.0;
  double stddev = 0.0;
};

struct CategoryMomentsReport {
  std::vector<CategoryMomentsRow> rows;  // ordered by category id
  double mean_spread = 0.0;              // max mean - min mean
  double max_abs_mean_dev = 0.0;         // max |mean_c - median of means|
  double std_ratio = 1.0;                // max std / min std
};

// CandidateScorer: callable (const Episode&, int candidate) -> double.
// Moments are over every (prompt, sampled candidate) pair of each category.
template <typename CandidateScorer>
CategoryMomentsReport category_moments(CandidateScorer&& scorer,
                                       const std::vector<Episode>& episodes) {
  if (episodes.empty()) throw std::invalid_argument("category_moments: no episodes");
  std::map<int, std::vector<double>> by_category;
  for (const Episode& ep : episodes) {
    for (int i = 0; i < static_cast<int>(ep.candidates.size()); ++i) {
      by_category[ep.prompt.category_id].push_back(scorer(ep, i));
    }
  }

  CategoryMomentsReport report;
  std::vector<double> means;
  std::vector<double> stds;
  for (const auto& [cat, scores] : by_category) {
    if (scores.size() < 2) {
      throw std::invalid_argument("category_moments: category " +
                                  std::to_string(cat) + " has fewer than 2 scores");
    }
    CategoryMomentsRow row;
    row.category = cat;
    row.mean = mean(scores);
    row.stddev = sample_std(scores);
    means.push_back(row.mean);
    stds.push_back(row.stddev);
    report.rows.push_back(row);
  }

  std::vector<double> sorted_means = means;
  std::sort(sorted_means.begin(), sorted_means.end());
  const std::size_t n = sorted_means.size();
  const double median = n % 2 == 1
                            ? sorted_means[n / 2]
                            : 0.5 * (sorted_means[n / 2 - 1] + sorted_means[n / 2]);
  report.mean_spread = sorted_means.back() - sorted_means.front();
  for (double m : means) {
    report.max_abs_mean_dev = std::max(report.max_abs_mean_dev, std::abs(m - median));
  }
  const double min_std = *std::min_element(stds.begin(), stds.end());
  const double max_std = *std::max_element(stds.begin(), stds.end());
  report.std_ratio = min_std > 0.0 ? max_std / min_std
                                   : (max_std > 0.0
                                          ? std::numeric_limits<double>::infinity()
                                          : 1.0);
  return report;
}

// ---------------------------------------------------------------------------
// oracle-judged win/lose/tie
// ---------------------------------------------------------------------------

struct WinLossReport {
  double win = 0.0;  // percentages summing to 100
  double lose = 0.0;
  double tie = 0.0;
  long n = 0;
  double tie_epsilon = 0.0;
};

namespace detail {

inline WinLossReport tally_winloss(const std::vector<double>& deltas,
                                   double tie_epsilon) {
  WinLossReport report;
  report.n = static_cast<long>(deltas.size());
  report.tie_epsilon = tie_epsilon;
  long wins = 0, losses = 0;
  for (double d : deltas) {
    if (d > tie_epsilon) {
      wins += 1;
    } else if (d < -tie_epsilon) {
      losses += 1;
    }
  }
  report.win = 100.0 * wins / report.n;
  report.lose = 100.0 * losses / report.n;
  report.tie = 100.0 - report.win - report.lose;
  return report;
}

}  // namespace detail

// Both policies play their argmax candidate on every episode; the judged
// quantity is the true-utility difference with a tie band.
inline WinLossReport win_rate_vs_reference(const SoftmaxPolicy& policy,
                                           const SoftmaxPolicy& reference,
                                           const std::vector<Episode>& episodes,
                                           double tie_epsilon) {
  if (episodes.empty()) throw std::invalid_argument("win_rate: no episodes");
  std::vector<double> deltas;
  deltas.reserve(episodes.size());
  for (const Episode& ep : episodes) {
    const double u_policy = ep.true_utilities[argmax_action(policy, ep)];
    const double u_ref = ep.true_utilities[argmax_action(reference, ep)];
    deltas.push_back(u_policy - u_ref);
  }
  return detail::tally_winloss(deltas, tie_epsilon);
}

// On the forget set the reference response is the stored expert response.
inline WinLossReport win_rate_vs_expert(const SoftmaxPolicy& policy,
                                        const std::vector<ForgetPair>& pairs,
                                        double tie_epsilon) {
  if (pairs.empty()) throw std::invalid_argument("win_rate: no forget pairs");
  std::vector<double> deltas;
  deltas.reserve(pairs.size());
  for (const ForgetPair& fp : pairs) {
    const Episode& ep = fp.episode;
    const double u_policy = ep.true_utilities[argmax_action(policy, ep)];
    deltas.push_back(u_policy - ep.true_utilities[fp.expert_index]);
  }
  return detail::tally_winloss(deltas, tie_epsilon);
}

// ---------------------------------------------------------------------------
// report files
// ---------------------------------------------------------------------------

inline void write_calibration_csv(const CalibrationReport& report,
                                  const std::filesystem::path& path) {
  CsvWriter csv("bin,conf,acc,count");
  for (std::size_t b = 0; b < report.bins.size(); ++b) {
    const CalibrationBin& bin = report.bins[b];
    csv.row({std::to_string(b), fmt_g6(bin.confidence_mean),
             fmt_g6(bin.empirical_accuracy), std::to_string(bin.count)});
  }
  csv.save(path);
}

inline void write_moments_csv(const std::map<std::string, CategoryMomentsReport>& by_kind,
                              const std::filesystem::path& path) {
  CsvWriter csv("category,kind,mean,std");
  for (const auto& [kind, report] : by_kind) {
    for (const CategoryMomentsRow& row : report.rows) {
      csv.row({std::to_string(row.category), kind, fmt_g6(row.mean),
               fmt_g6(row.stddev)});
    }
  }
  csv.save(path);
}

struct WinLossNamedRow {
  std::string set_name;
  WinLossReport report;
};

inline void write_winloss_csv(const std::vector<WinLossNamedRow>& rows,
                              const std::filesystem::path& path) {
  CsvWriter csv("set,win,lose,tie,n");
  for (const WinLossNamedRow& r : rows) {
    csv.row({r.set_name, fmt_g6(r.report.win), fmt_g6(r.report.lose),
             fmt_g6(r.report.tie), std::to_string(r.report.n)});
  }
  csv.save(path);
}

inline void write_curve_csv(const std::vector<std::pair<int, double>>& points,
                            const std::filesystem::path& path) {
  CsvWriter csv("step,value");
  for (const auto& [step, value] : points) {
    csv.row({std::to_string(step), fmt_g6(value)});
  }
  csv.save(path);
}

inline std::vector<std::pair<int, double>> read_curve_csv(
    const std::filesystem::path& path) {
  const std::vector<std::string> lines = read_lines(path);
  if (lines.empty() || lines.front() != "step,value") {
    throw std::runtime_error("curve file missing step,value header: " + path.string());
  }
  std::vector<std::pair<int, double>> points;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::vector<std::string> cells = split_csv_line(lines[i]);
    if (cells.size() != 2) {
      throw std::runtime_error("malformed curve row in " + path.string());
    }
    points.emplace_back(std::stoi(cells[0]), std::stod(cells[1]));
  }
  return points;
}

// ---------------------------------------------------------------------------
// training report bundle
// ---------------------------------------------------------------------------

struct EvalSnapshot {
  int step = 0;
  std::map<std::string, double> values;
};

// Emits the per-run plot-data bundle: a delta-reward curve (mean scorer
// reward per step minus the frozen pre-training baseline) and one curve per
// snapshot column. Snapshots must all carry the same columns.
inline void training_report(const std::vector<PpoStepStats>& stats,
                            const std::vector<EvalSnapshot>& snapshots,
                            double baseline_score,
                            const std::filesystem::path& curves_dir) {
  if (stats.empty()) throw std::invalid_argument("training_report: no stats");
  std::vector<std::pair<int, double>> delta;
  delta.reserve(stats.size());
  for (const PpoStepStats& s : stats) {
    delta.emplace_back(s.step, s.mean_score - baseline_score);
  }
  write_curve_csv(delta, curves_dir / "delta_reward.csv");

  if (snapshots.empty()) return;
  for (const auto& [column, _] : snapshots.front().values) {
    std::vector<std::pair<int, double>> curve;
    for (const EvalSnapshot& snap : snapshots) {
      const auto it = snap.values.find(column);
      if (it == snap.values.end()) {
        throw std::runtime_error("training_report: snapshot at step " +
                                 std::to_string(snap.step) + " missing column " +
                                 column);
      }
      curve.emplace_back(snap.step, it->second);
    }
    write_curve_csv(curve, curves_dir / (column + ".csv"));
  }
}

}  // namespace rlhflab
