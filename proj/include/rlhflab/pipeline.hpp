#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rlhflab/config.hpp"
#include "rlhflab/env.hpp"
#include "rlhflab/io.hpp"
#include "rlhflab/metrics.hpp"
#include "rlhflab/policy.hpp"
#include "rlhflab/rehearsal.hpp"
#include "rlhflab/scoremodel.hpp"

namespace rlhflab {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// run directory layout
// ---------------------------------------------------------------------------

namespace artifact {
inline constexpr char kEnv[] = "env.json";
inline constexpr char kComparisonsTrain[] = "data/comparisons_train.jsonl";
inline constexpr char kComparisonsTest[] = "data/comparisons_test.jsonl";
inline constexpr char kEpisodesPpoTrain[] = "data/episodes_ppo_train.jsonl";
inline constexpr char kEpisodesPpoTest[] = "data/episodes_ppo_test.jsonl";
inline constexpr char kForget[] = "data/forget.jsonl";
inline constexpr char kEpisodesForget[] = "data/episodes_forget.jsonl";
inline constexpr char kRehearsal[] = "rehearsal.jsonl";
}  // namespace artifact

inline std::string run_id_for(const RunConfig& cfg) {
  return "run-" + cfg.hash().substr(0, 8) + "-s" +
         std::to_string(cfg.environment.seed);
}

inline fs::path checkpoint_path(const fs::path& dir, const std::string& name) {
  return dir / "checkpoints" / (name + ".json");
}

inline void require_artifact(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path)) {
    throw std::invalid_argument("missing prerequisite artifact: " + path.string() +
                                " (run " + producer + " first)");
  }
}

// ---------------------------------------------------------------------------
// stage drivers (in-memory; the file-based verbs wrap these)
// ---------------------------------------------------------------------------

struct StageData {
  EnvParams env;
  Datasets data;
};

inline StageData build_stage_data(const RunConfig& cfg) {
  StageData s;
  s.env = cfg.make_env_params();
  s.data = build_datasets(s.env, cfg.dataset_counts());
  return s;
}

inline ScoreCheckpoint train_scorer_stage(const RunConfig& cfg, ScoreMode mode,
                                          const std::vector<ComparisonRecord>& train,
                                          std::vector<TrainLogRow>* log = nullptr) {
  const ScoreTrainSettings settings = cfg.score_train_settings(mode);
  RandomStream rng =
      RandomStream(cfg.environment.seed).split(stream_label::kScoreTrain);
  return train_score_model(train, settings, rng, log);
}

inline std::vector<TeacherPair> expert_pairs(const std::vector<Episode>& episodes) {
  std::vector<TeacherPair> pairs;
  pairs.reserve(episodes.size());
  for (const Episode& ep : episodes) {
    pairs.push_back({ep, argmax_index(ep.true_utilities)});
  }
  return pairs;
}

inline SoftmaxPolicy train_sft_stage(const RunConfig& cfg,
                                     const std::vector<Episode>& ppo_train) {
  SoftmaxPolicy policy = SoftmaxPolicy::zeros(cfg.environment.d);
  const std::vector<TeacherPair> pairs = expert_pairs(ppo_train);
  RandomStream rng = RandomStream(cfg.environment.seed).split(stream_label::kSftTrain);
  for (int pass = 0; pass < cfg.ppo.sft_passes; ++pass) {
    sft_update(policy, pairs, cfg.ppo.sft_lr, cfg.ppo.sft_batch, rng);
  }
  return policy;
}

inline ResponseScorer make_response_scorer(const ScoreCheckpoint& ckpt,
                                           ScoreSignal signal) {
  const ScoreMode wanted =
      signal == ScoreSignal::kAdvantage ? ScoreMode::kAdvantage : ScoreMode::kReward;
  if (ckpt.mode != wanted) {
    throw std::invalid_argument("scorer checkpoint mode '" + to_string(ckpt.mode) +
                                "' does not match ppo score mode '" +
                                to_string(signal) + "'");
  }
  return [ckpt](const Episode& ep, int candidate) {
    return score_response(ckpt, ep.prompt, ep.candidates[candidate]);
  };
}

// mean checkpoint score of the argmax action over an episode set
inline double test_mean_score(const ScoreCheckpoint& ckpt, const SoftmaxPolicy& policy,
                              const std::vector<Episode>& episodes) {
  double total = 0.0;
  for (const Episode& ep : episodes) {
    total += score_response(ckpt, ep.prompt, ep.candidates[argmax_action(policy, ep)]);
  }
  return total / static_cast<double>(episodes.size());
}

struct PpoRunResult {
  std::string name;
  std::vector<PpoStepStats> stats;
  std::vector<EvalSnapshot> snapshots;
  SoftmaxPolicy policy;
  double sft_test_score = 0.0;  // scorer baseline; snapshot 0 equals this

  double snapshot_value(std::size_t index, const std::string& column) const {
    return snapshots.at(index).values.at(column);
  }
  double final_value(const std::string& column) const {
    return snapshots.back().values.at(column);
  }
  double peak_value(const std::string& column) const {
    double best = -std::numeric_limits<double>::infinity();
    for (const EvalSnapshot& s : snapshots) best = std::max(best, s.values.at(column));
    return best;
  }
};

// PPO (optionally with rehearsal) against a frozen SFT reference, with
// oracle-judged win/lose/tie snapshots on the main and forget sets every
// snapshot_interval steps. RM-, MA- and AM-scored runs consume identical
// random streams, so trajectories differ only through the score signal.
inline PpoRunResult run_ppo_stage(const RunConfig& cfg, ScoreSignal signal,
                                  const ScoreCheckpoint& scorer,
                                  const SoftmaxPolicy& sft, const StageData& stage,
                                  const std::vector<TeacherPair>* rehearsal_set,
                                  const std::string& name) {
  PpoSettings settings = cfg.ppo_settings();
  settings.score_mode = signal;
  settings.rehearsal = rehearsal_set != nullptr;

  RandomStream ppo_root = RandomStream(cfg.environment.seed).split(stream_label::kPpo);
  RandomStream batch_rng = ppo_root.split(1);
  PpoTrainer trainer(sft, settings, make_response_scorer(scorer, signal),
                     ppo_root.split(2));

  PpoRunResult result;
  result.name = name;
  result.sft_test_score = test_mean_score(scorer, sft, stage.data.ppo_test);

  const auto snapshot = [&](int step) {
    const WinLossReport main =
        win_rate_vs_reference(trainer.policy(), sft, stage.data.ppo_test,
                              cfg.eval.tie_epsilon);
    const WinLossReport forget =
        win_rate_vs_expert(trainer.policy(), stage.data.forget, cfg.eval.tie_epsilon);
    EvalSnapshot snap;
    snap.step = step;
    snap.values["win"] = main.win;
    snap.values["lose"] = main.lose;
    snap.values["tie"] = main.tie;
    snap.values["win_minus_lose"] = main.win - main.lose;
    snap.values["forget_win"] = forget.win;
    snap.values["forget_lose"] = forget.lose;
    snap.values["forget_tie"] = forget.tie;
    snap.values["forget_win_minus_lose"] = forget.win - forget.lose;
    snap.values["test_mean_score"] =
        test_mean_score(scorer, trainer.policy(), stage.data.ppo_test);
    result.snapshots.push_back(std::move(snap));
  };

  snapshot(0);
  const std::vector<Episode>& train_eps = stage.data.ppo_train;
  for (int step = 1; step <= settings.steps; ++step) {
    std::vector<const Episode*> batch(settings.batch_prompts);
    for (int i = 0; i < settings.batch_prompts; ++i) {
      batch[i] = &train_eps[batch_rng.below(train_eps.size())];
    }
    PpoStepStats stats = rehearsal_set
                             ? trainer.step_with_rehearsal(batch, *rehearsal_set)
                             : trainer.step(batch);
    result.stats.push_back(stats);
    if (step % cfg.eval.snapshot_interval == 0 || step == settings.steps) {
      snapshot(step);
    }
  }
  result.policy = trainer.policy();
  return result;
}

inline RehearsalSet build_rehearsal_stage(const RunConfig& cfg,
                                          const StageData& stage,
                                          const SoftmaxPolicy& sft,
                                          const ScoreCheckpoint& am_ckpt,
                                          int clusters) {
  RandomStream rng = RandomStream(cfg.environment.seed).split(stream_label::kRehearsal);
  return build_rehearsal_set(stage.data.ppo_train, sft, am_ckpt, clusters,
                             cfg.ppo.top_k, rng);
}

// ---------------------------------------------------------------------------
// snapshot/stat persistence
// ---------------------------------------------------------------------------

inline void save_snapshots_csv(const std::vector<EvalSnapshot>& snapshots,
                               const fs::path& path) {
  if (snapshots.empty()) throw std::invalid_argument("no snapshots to save");
  std::string header = "step";
  for (const auto& [column, _] : snapshots.front().values) header += "," + column;
  CsvWriter csv(header);
  for (const EvalSnapshot& snap : snapshots) {
    std::vector<std::string> cells{std::to_string(snap.step)};
    for (const auto& [column, value] : snap.values) cells.push_back(fmt_g6(value));
    csv.row(cells);
  }
  csv.save(path);
}

inline std::vector<EvalSnapshot> load_snapshots_csv(const fs::path& path) {
  const std::vector<std::string> lines = read_lines(path);
  if (lines.empty()) throw std::runtime_error("empty snapshot file: " + path.string());
  const std::vector<std::string> header = split_csv_line(lines.front());
  if (header.empty() || header.front() != "step") {
    throw std::runtime_error("snapshot file missing step column: " + path.string());
  }
  std::vector<EvalSnapshot> snaps;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::vector<std::string> cells = split_csv_line(lines[i]);
    if (cells.size() != header.size()) {
      throw std::runtime_error("malformed snapshot row in " + path.string());
    }
    EvalSnapshot snap;
    snap.step = std::stoi(cells[0]);
    for (std::size_t c = 1; c < cells.size(); ++c) {
      snap.values[header[c]] = std::stod(cells[c]);
    }
    snaps.push_back(std::move(snap));
  }
  return snaps;
}

inline std::vector<PpoStepStats> load_ppo_stats_csv(const fs::path& path) {
  const std::vector<std::string> lines = read_lines(path);
  if (lines.empty() ||
      lines.front() != "step,mean_score,mean_kl,mean_oracle_utility,rehearsal_nll") {
    throw std::runtime_error("unexpected ppo stats header in " + path.string());
  }
  std::vector<PpoStepStats> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::vector<std::string> cells = split_csv_line(lines[i]);
    if (cells.size() != 5) {
      throw std::runtime_error("malformed ppo stats row in " + path.string());
    }
    PpoStepStats s;
    s.step = std::stoi(cells[0]);
    s.mean_score = std::stod(cells[1]);
    s.mean_kl = std::stod(cells[2]);
    s.mean_oracle_utility = std::stod(cells[3]);
    s.rehearsal_nll = std::stod(cells[4]);
    rows.push_back(s);
  }
  return rows;
}

inline std::vector<fs::path> save_ppo_run(const PpoRunResult& run,
                                          const RunConfig& cfg, const fs::path& dir) {
  std::vector<fs::path> written;
  const fs::path stats_path = dir / "logs" / ("ppo_" + run.name + "_stats.csv");
  save_ppo_stats(run.stats, stats_path);
  written.push_back(stats_path);

  const fs::path snaps_path = dir / "logs" / ("ppo_" + run.name + "_snapshots.csv");
  save_snapshots_csv(run.snapshots, snaps_path);
  written.push_back(snaps_path);

  const fs::path ckpt = checkpoint_path(dir, "ppo_" + run.name);
  fs::create_directories(ckpt.parent_path());
  save_policy(run.policy, cfg.environment.seed, static_cast<int>(run.stats.size()),
              "sft", ckpt);
  written.push_back(ckpt);

  const fs::path curves = dir / "curves" / ("ppo_" + run.name);
  fs::create_directories(curves);
  training_report(run.stats, run.snapshots, run.sft_test_score, curves);
  for (const auto& entry : fs::directory_iterator(curves)) {
    written.push_back(entry.path());
  }
  return written;
}

// ---------------------------------------------------------------------------
// experiment suites
// ---------------------------------------------------------------------------

struct ScoreEvalSummary {
  double accuracy = 0.0;
  double ece = 0.0;
};

struct CalibrationExperimentResult {
  ScoreEvalSummary rm;
  ScoreEvalSummary am;
};

struct DisparityExperimentResult {
  CategoryMomentsReport rm;
  CategoryMomentsReport am;
};

struct PpoCurveSummary {
  std::string name;
  double initial_test_score = 0.0;
  double final_test_score = 0.0;
  double peak_wml = 0.0;   // main-set win minus lose, best snapshot
  double final_wml = 0.0;  // main-set win minus lose at the last step
  double final_forget_wml = 0.0;
  WinLossReport final_main;
  WinLossReport final_forget;
};

inline PpoCurveSummary summarize_ppo_run(const PpoRunResult& run,
                                         const RunConfig& cfg,
                                         const StageData& stage,
                                         const SoftmaxPolicy& sft) {
  PpoCurveSummary s;
  s.name = run.name;
  s.initial_test_score = run.snapshot_value(0, "test_mean_score");
  s.final_test_score = run.final_value("test_mean_score");
  s.peak_wml = run.peak_value("win_minus_lose");
  s.final_wml = run.final_value("win_minus_lose");
  s.final_forget_wml = run.final_value("forget_win_minus_lose");
  s.final_main = win_rate_vs_reference(run.policy, sft, stage.data.ppo_test,
                                       cfg.eval.tie_epsilon);
  s.final_forget =
      win_rate_vs_expert(run.policy, stage.data.forget, cfg.eval.tie_epsilon);
  return s;
}

struct HackingExperimentResult {
  PpoCurveSummary rm;
  PpoCurveSummary rm_ma;
  PpoCurveSummary am;
};

struct ForgettingExperimentResult {
  PpoCurveSummary rm;
  PpoCurveSummary am;
  PpoCurveSummary am_sr;
};

struct ClusterSweepExperimentResult {
  std::map<int, double> final_score_by_c;
  double sft_test_score = 0.0;
  double am_ppo_final_score = 0.0;
};

namespace detail {

inline std::pair<double, double> pair_scores_of(const ScoreCheckpoint& ckpt,
                                                const ComparisonRecord& rec) {
  return score_pair(ckpt, rec);
}

inline void write_eval_summary(const fs::path& path,
                               const std::vector<std::pair<std::string, ScoreEvalSummary>>& rows) {
  CsvWriter csv("model,accuracy,ece");
  for (const auto& [model, summary] : rows) {
    csv.row({model, fmt_g6(summary.accuracy), fmt_g6(summary.ece)});
  }
  csv.save(path);
}

inline void write_calibration_curve_csv(
    const std::vector<CalibrationCurvePoint>& curve, const fs::path& path) {
  CsvWriter csv("delta,acc,ideal,count");
  for (const CalibrationCurvePoint& pt : curve) {
    csv.row({fmt_g6(pt.delta_mean), fmt_g6(pt.empirical_accuracy), fmt_g6(pt.ideal),
             std::to_string(pt.count)});
  }
  csv.save(path);
}

inline void write_disparity_summary(
    const fs::path& path,
    const std::vector<std::pair<std::string, const CategoryMomentsReport*>>& rows) {
  CsvWriter csv("model,mean_spread,max_abs_mean_dev,std_ratio");
  for (const auto& [model, report] : rows) {
    csv.row({model, fmt_g6(report->mean_spread), fmt_g6(report->max_abs_mean_dev),
             fmt_g6(report->std_ratio)});
  }
  csv.save(path);
}

inline void write_ppo_summary(const fs::path& path,
                              const std::vector<const PpoCurveSummary*>& rows) {
  CsvWriter csv(
      "model,initial_test_score,final_test_score,peak_wml,final_wml,"
      "final_forget_wml");
  for (const PpoCurveSummary* s : rows) {
    csv.row({s->name, fmt_g6(s->initial_test_score), fmt_g6(s->final_test_score),
             fmt_g6(s->peak_wml), fmt_g6(s->final_wml), fmt_g6(s->final_forget_wml)});
  }
  csv.save(path);
}

inline void write_winloss_rows(const fs::path& path,
                               const std::vector<const PpoCurveSummary*>& rows) {
  std::vector<WinLossNamedRow> named;
  for (const PpoCurveSummary* s : rows) {
    named.push_back({"main/" + s->name, s->final_main});
    named.push_back({"forget/" + s->name, s->final_forget});
  }
  write_winloss_csv(named, path);
}

}  // namespace detail

inline CalibrationExperimentResult run_calibration_experiment(const RunConfig& cfg,
                                                              const fs::path& dir) {
  fs::create_directories(dir / "metrics");
  const StageData stage = build_stage_data(cfg);
  save_env(stage.env, dir / artifact::kEnv);

  CalibrationExperimentResult result;
  for (const ScoreMode mode : {ScoreMode::kReward, ScoreMode::kAdvantage}) {
    const ScoreCheckpoint ckpt = train_scorer_stage(cfg, mode, stage.data.rm_train);
    const auto scorer = [&](const ComparisonRecord& rec) {
      return detail::pair_scores_of(ckpt, rec);
    };
    const CalibrationReport report =
        expected_calibration_error(scorer, stage.data.rm_test, cfg.eval.bins);
    const auto curve = calibration_curve(scorer, stage.data.rm_test, cfg.eval.bins);
    const std::string tag = to_string(mode);
    write_calibration_csv(report, dir / "metrics" / ("calibration_" + tag + ".csv"));
    detail::write_calibration_curve_csv(
        curve, dir / "metrics" / ("calibration_curve_" + tag + ".csv"));
    ScoreEvalSummary summary{report.accuracy, report.ece};
    (mode == ScoreMode::kReward ? result.rm : result.am) = summary;
  }
  detail::write_eval_summary(dir / "metrics" / "eval_summary.csv",
                             {{"rm", result.rm}, {"am", result.am}});
  return result;
}

inline DisparityExperimentResult run_disparity_experiment(const RunConfig& cfg,
                                                          const fs::path& dir) {
  fs::create_directories(dir / "metrics");
  const StageData stage = build_stage_data(cfg);
  save_env(stage.env, dir / artifact::kEnv);

  const ScoreCheckpoint rm = train_scorer_stage(cfg, ScoreMode::kReward, stage.data.rm_train);
  const ScoreCheckpoint am =
      train_scorer_stage(cfg, ScoreMode::kAdvantage, stage.data.rm_train);

  DisparityExperimentResult result;
  result.rm = category_moments(
      [&](const Episode& ep, int i) {
        return score_response(rm, ep.prompt, ep.candidates[i]);
      },
      stage.data.ppo_test);
  result.am = category_moments(
      [&](const Episode& ep, int i) {
        return score_response(am, ep.prompt, ep.candidates[i]);
      },
      stage.data.ppo_test);

  std::map<std::string, CategoryMomentsReport> by_kind{{"r", result.rm},
                                                       {"a", result.am}};
  write_moments_csv(by_kind, dir / "metrics" / "moments.csv");
  detail::write_disparity_summary(dir / "metrics" / "disparity_summary.csv",
                                  {{"rm", &result.rm}, {"am", &result.am}});
  return result;
}

inline HackingExperimentResult run_hacking_experiment(const RunConfig& cfg,
                                                      const fs::path& dir) {
  fs::create_directories(dir / "metrics");
  const StageData stage = build_stage_data(cfg);
  save_env(stage.env, dir / artifact::kEnv);

  const ScoreCheckpoint rm = train_scorer_stage(cfg, ScoreMode::kReward, stage.data.rm_train);
  const ScoreCheckpoint am =
      train_scorer_stage(cfg, ScoreMode::kAdvantage, stage.data.rm_train);
  const SoftmaxPolicy sft = train_sft_stage(cfg, stage.data.ppo_train);
  save_policy(sft, cfg.environment.seed, cfg.ppo.sft_passes, "zeros",
              checkpoint_path(dir, "sft"));

  HackingExperimentResult result;
  const PpoRunResult rm_run =
      run_ppo_stage(cfg, ScoreSignal::kReward, rm, sft, stage, nullptr, "rm");
  save_ppo_run(rm_run, cfg, dir);
  result.rm = summarize_ppo_run(rm_run, cfg, stage, sft);

  const PpoRunResult ma_run = run_ppo_stage(cfg, ScoreSignal::kRewardMovingAverage,
                                            rm, sft, stage, nullptr, "rm_ma");
  save_ppo_run(ma_run, cfg, dir);
  result.rm_ma = summarize_ppo_run(ma_run, cfg, stage, sft);

  const PpoRunResult am_run =
      run_ppo_stage(cfg, ScoreSignal::kAdvantage, am, sft, stage, nullptr, "am");
  save_ppo_run(am_run, cfg, dir);
  result.am = summarize_ppo_run(am_run, cfg, stage, sft);

  detail::write_ppo_summary(dir / "metrics" / "hacking_summary.csv",
                            {&result.rm, &result.rm_ma, &result.am});
  detail::write_winloss_rows(dir / "metrics" / "winloss.csv",
                             {&result.rm, &result.rm_ma, &result.am});
  return result;
}

inline ForgettingExperimentResult run_forgetting_experiment(const RunConfig& cfg,
                                                            const fs::path& dir) {
  fs::create_directories(dir / "metrics");
  const StageData stage = build_stage_data(cfg);
  save_env(stage.env, dir / artifact::kEnv);

  const ScoreCheckpoint rm = train_scorer_stage(cfg, ScoreMode::kReward, stage.data.rm_train);
  const ScoreCheckpoint am =
      train_scorer_stage(cfg, ScoreMode::kAdvantage, stage.data.rm_train);
  const SoftmaxPolicy sft = train_sft_stage(cfg, stage.data.ppo_train);

  const RehearsalSet rehearsal =
      build_rehearsal_stage(cfg, stage, sft, am, cfg.ppo.clusters);
  write_rehearsal_jsonl(rehearsal, dir / artifact::kRehearsal);
  const std::vector<TeacherPair> rehearsal_pairs =
      rehearsal_teacher_pairs(rehearsal, stage.data.ppo_train);

  ForgettingExperimentResult result;
  const PpoRunResult rm_run =
      run_ppo_stage(cfg, ScoreSignal::kReward, rm, sft, stage, nullptr, "rm");
  save_ppo_run(rm_run, cfg, dir);
  result.rm = summarize_ppo_run(rm_run, cfg, stage, sft);

  const PpoRunResult am_run =
      run_ppo_stage(cfg, ScoreSignal::kAdvantage, am, sft, stage, nullptr, "am");
  save_ppo_run(am_run, cfg, dir);
  result.am = summarize_ppo_run(am_run, cfg, stage, sft);

  const PpoRunResult sr_run = run_ppo_stage(cfg, ScoreSignal::kAdvantage, am, sft,
                                            stage, &rehearsal_pairs, "am_sr");
  save_ppo_run(sr_run, cfg, dir);
  result.am_sr = summarize_ppo_run(sr_run, cfg, stage, sft);

  detail::write_ppo_summary(dir / "metrics" / "forgetting_summary.csv",
                            {&result.rm, &result.am, &result.am_sr});
  detail::write_winloss_rows(dir / "metrics" / "winloss.csv",
                             {&result.rm, &result.am, &result.am_sr});
  return result;
}

inline ClusterSweepExperimentResult run_cluster_sweep_experiment(
    const RunConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir / "metrics");
  const StageData stage = build_stage_data(cfg);
  save_env(stage.env, dir / artifact::kEnv);

  const ScoreCheckpoint am =
      train_scorer_stage(cfg, ScoreMode::kAdvantage, stage.data.rm_train);
  const SoftmaxPolicy sft = train_sft_stage(cfg, stage.data.ppo_train);

  ClusterSweepExperimentResult result;
  result.sft_test_score = test_mean_score(am, sft, stage.data.ppo_test);

  const PpoRunResult am_run =
      run_ppo_stage(cfg, ScoreSignal::kAdvantage, am, sft, stage, nullptr, "am");
  save_ppo_run(am_run, cfg, dir);
  result.am_ppo_final_score = am_run.final_value("test_mean_score");

  CsvWriter sweep("c,final_test_score");
  for (const int c : {4, 8, 16, 32}) {
    const RehearsalSet rehearsal = build_rehearsal_stage(cfg, stage, sft, am, c);
    const std::vector<TeacherPair> pairs =
        rehearsal_teacher_pairs(rehearsal, stage.data.ppo_train);
    const PpoRunResult run = run_ppo_stage(cfg, ScoreSignal::kAdvantage, am, sft,
                                           stage, &pairs, "am_sr_c" + std::to_string(c));
    save_ppo_run(run, cfg, dir);
    result.final_score_by_c[c] = run.final_value("test_mean_score");
    sweep.row({std::to_string(c), fmt_g6(result.final_score_by_c[c])});
  }
  sweep.save(dir / "metrics" / "cluster_sweep.csv");

  CsvWriter refs("model,test_score");
  refs.row({"sft", fmt_g6(result.sft_test_score)});
  refs.row({"am_ppo", fmt_g6(result.am_ppo_final_score)});
  refs.save(dir / "metrics" / "cluster_sweep_refs.csv");
  return result;
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

struct Manifest {
  std::string run_id;
  std::string verb;
  std::string config_hash;
  std::map<std::string, std::string> inputs;   // path -> digest
  std::map<std::string, std::string> outputs;  // path -> digest
  double wall_clock_ms = 0.0;
  std::string artifact_version = "1";
};

inline void write_manifest(const Manifest& m, const fs::path& path) {
  nlohmann::json j{{"run_id", m.run_id},
                   {"verb", m.verb},
                   {"config_hash", m.config_hash},
                   {"inputs", m.inputs},
                   {"outputs", m.outputs},
                   {"wall_clock_ms", m.wall_clock_ms},
                   {"artifact_version", m.artifact_version}};
  write_text_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// verbs
// ---------------------------------------------------------------------------

namespace detail {

inline void digest_into(std::map<std::string, std::string>& table,
                        const fs::path& base, const std::vector<fs::path>& paths) {
  for (const fs::path& p : paths) {
    if (fs::is_regular_file(p)) {
      table[fs::relative(p, base).generic_string()] = file_digest(p);
    }
  }
}

inline std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) out.push_back(entry.path());
  }
  return out;
}

}  // namespace detail

inline std::vector<ForgetPair> load_forget_pairs(const fs::path& episodes_path) {
  std::vector<ForgetPair> pairs;
  for (Episode& ep : read_episodes_jsonl(episodes_path)) {
    ForgetPair fp;
    fp.expert_index = argmax_index(ep.true_utilities);
    fp.episode = std::move(ep);
    pairs.push_back(std::move(fp));
  }
  return pairs;
}

// Executes one CLI verb against the run directory <out>/<run-id>. Inputs are
// never mutated; reruns with an identical config hash and seed overwrite
// their outputs with byte-identical content.
inline int run_command(const std::string& verb, const RunConfig& cfg,
                       const fs::path& out_root,
                       const std::string& experiment_name = "") {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = out_root / run_id_for(cfg);
  fs::create_directories(dir);

  Manifest manifest;
  manifest.run_id = run_id_for(cfg);
  manifest.verb = verb + (experiment_name.empty() ? "" : "-" + experiment_name);
  manifest.config_hash = cfg.hash();

  std::vector<fs::path> outputs;

  if (verb == "gen-data") {
    const StageData stage = build_stage_data(cfg);
    save_env(stage.env, dir / artifact::kEnv);
    write_comparisons_jsonl(stage.data.rm_train, dir / artifact::kComparisonsTrain);
    write_comparisons_jsonl(stage.data.rm_test, dir / artifact::kComparisonsTest);
    write_episodes_jsonl(stage.data.ppo_train, dir / artifact::kEpisodesPpoTrain);
    write_episodes_jsonl(stage.data.ppo_test, dir / artifact::kEpisodesPpoTest);
    write_forget_jsonl(stage.data.forget, dir / artifact::kForget);
    std::vector<Episode> forget_eps;
    for (const ForgetPair& fp : stage.data.forget) forget_eps.push_back(fp.episode);
    write_episodes_jsonl(forget_eps, dir / artifact::kEpisodesForget);
    for (const char* rel :
         {artifact::kEnv, artifact::kComparisonsTrain, artifact::kComparisonsTest,
          artifact::kEpisodesPpoTrain, artifact::kEpisodesPpoTest, artifact::kForget,
          artifact::kEpisodesForget}) {
      outputs.push_back(dir / rel);
    }
  } else if (verb == "train-rm" || verb == "train-am") {
    const ScoreMode mode =
        verb == "train-rm" ? ScoreMode::kReward : ScoreMode::kAdvantage;
    require_artifact(dir / artifact::kComparisonsTrain, "gen-data");
    manifest.inputs["data/comparisons_train.jsonl"] =
        file_digest(dir / artifact::kComparisonsTrain);
    const std::vector<ComparisonRecord> train =
        read_comparisons_jsonl(dir / artifact::kComparisonsTrain);
    std::vector<TrainLogRow> log;
    const ScoreCheckpoint ckpt = train_scorer_stage(cfg, mode, train, &log);
    const fs::path ckpt_path = checkpoint_path(dir, to_string(mode));
    fs::create_directories(ckpt_path.parent_path());
    save_score_checkpoint(ckpt, ckpt_path);
    const fs::path log_path = dir / "logs" / ("score_" + to_string(mode) + ".csv");
    save_train_log(log, log_path);
    outputs = {ckpt_path, log_path};
  } else if (verb == "eval-score") {
    const ScoreSignal signal = score_signal_from_string(cfg.ppo.score_mode);
    const std::string base =
        signal == ScoreSignal::kAdvantage ? "am" : "rm";
    const fs::path ckpt_path = checkpoint_path(dir, base);
    require_artifact(ckpt_path, "train-" + base);
    require_artifact(dir / artifact::kComparisonsTest, "gen-data");
    require_artifact(dir / artifact::kEpisodesPpoTest, "gen-data");
    manifest.inputs[fs::relative(ckpt_path, dir).generic_string()] =
        file_digest(ckpt_path);

    const ScoreCheckpoint ckpt = load_score_checkpoint(ckpt_path);
    const std::vector<ComparisonRecord> test =
        read_comparisons_jsonl(dir / artifact::kComparisonsTest);
    const std::vector<Episode> episodes =
        read_episodes_jsonl(dir / artifact::kEpisodesPpoTest);

    const auto scorer = [&](const ComparisonRecord& rec) {
      return score_pair(ckpt, rec);
    };
    const CalibrationReport report =
        expected_calibration_error(scorer, test, cfg.eval.bins);
    const auto curve = calibration_curve(scorer, test, cfg.eval.bins);
    const CategoryMomentsReport moments = category_moments(
        [&](const Episode& ep, int i) {
          return score_response(ckpt, ep.prompt, ep.candidates[i]);
        },
        episodes);

    fs::create_directories(dir / "metrics");
    write_calibration_csv(report, dir / "metrics" / "calibration.csv");
    detail::write_calibration_curve_csv(curve,
                                        dir / "metrics" / "calibration_curve.csv");
    std::map<std::string, CategoryMomentsReport> by_kind{
        {ckpt.mode == ScoreMode::kReward ? "r" : "a", moments}};
    write_moments_csv(by_kind, dir / "metrics" / "moments.csv");
    detail::write_eval_summary(dir / "metrics" / "eval_summary.csv",
                               {{base, {report.accuracy, report.ece}}});
    outputs = {dir / "metrics" / "calibration.csv",
               dir / "metrics" / "calibration_curve.csv",
               dir / "metrics" / "moments.csv",
               dir / "metrics" / "eval_summary.csv"};
  } else if (verb == "train-sft") {
    require_artifact(dir / artifact::kEpisodesPpoTrain, "gen-data");
    const std::vector<Episode> train =
        read_episodes_jsonl(dir / artifact::kEpisodesPpoTrain);
    const SoftmaxPolicy sft = train_sft_stage(cfg, train);
    const fs::path ckpt = checkpoint_path(dir, "sft");
    fs::create_directories(ckpt.parent_path());
    save_policy(sft, cfg.environment.seed, cfg.ppo.sft_passes, "zeros", ckpt);
    outputs = {ckpt};
  } else if (verb == "train-ppo") {
    const ScoreSignal signal = score_signal_from_string(cfg.ppo.score_mode);
    const std::string base = signal == ScoreSignal::kAdvantage ? "am" : "rm";
    require_artifact(checkpoint_path(dir, "sft"), "train-sft");
    require_artifact(checkpoint_path(dir, base), "train-" + base);
    require_artifact(dir / artifact::kEpisodesPpoTrain, "gen-data");
    require_artifact(dir / artifact::kEpisodesPpoTest, "gen-data");
    require_artifact(dir / artifact::kEpisodesForget, "gen-data");

    StageData stage;
    stage.env = load_env(dir / artifact::kEnv);
    stage.data.ppo_train = read_episodes_jsonl(dir / artifact::kEpisodesPpoTrain);
    stage.data.ppo_test = read_episodes_jsonl(dir / artifact::kEpisodesPpoTest);
    stage.data.forget = load_forget_pairs(dir / artifact::kEpisodesForget);

    const ScoreCheckpoint scorer = load_score_checkpoint(checkpoint_path(dir, base));
    const SoftmaxPolicy sft = load_policy(checkpoint_path(dir, "sft"));

    std::vector<TeacherPair> rehearsal_pairs;
    const bool rehearse = cfg.ppo.rehearsal;
    if (rehearse) {
      require_artifact(dir / artifact::kRehearsal, "select-rehearsal");
      const RehearsalSet set = read_rehearsal_jsonl(dir / artifact::kRehearsal);
      rehearsal_pairs = rehearsal_teacher_pairs(set, stage.data.ppo_train);
    }
    const std::string name = to_string(signal) + (rehearse ? "_sr" : "");
    const PpoRunResult run =
        run_ppo_stage(cfg, signal, scorer, sft, stage,
                      rehearse ? &rehearsal_pairs : nullptr, name);
    outputs = save_ppo_run(run, cfg, dir);

    fs::create_directories(dir / "metrics");
    const PpoCurveSummary summary = summarize_ppo_run(run, cfg, stage, sft);
    detail::write_winloss_rows(dir / "metrics" / "winloss.csv", {&summary});
    outputs.push_back(dir / "metrics" / "winloss.csv");
  } else if (verb == "select-rehearsal") {
    RehearsalSet set;
    if (!cfg.ppo.external_records.empty()) {
      const std::vector<RehearsalRecord> records =
          ingest_external_records(cfg.ppo.external_records);
      if (records.empty()) {
        throw std::invalid_argument("select-rehearsal: external record file is empty");
      }
      std::vector<std::vector<double>> embeddings;
      for (const RehearsalRecord& r : records) embeddings.push_back(r.embedding);
      RandomStream rng =
          RandomStream(cfg.environment.seed).split(stream_label::kRehearsal);
      const Clustering clustering =
          kmeans_cluster(embeddings, cfg.ppo.clusters, rng);
      RehearsalSelection sel =
          select_top_k_indices(records, clustering, cfg.ppo.top_k);
      std::vector<std::size_t> order(sel.indices.size());
      std::iota(order.begin(), order.end(), 0);
      rng.shuffle(order);
      for (std::size_t i : order) {
        set.records.push_back(records[sel.indices[i]]);
        set.clusters.push_back(sel.clusters[i]);
      }
    } else {
      require_artifact(checkpoint_path(dir, "am"), "train-am");
      require_artifact(checkpoint_path(dir, "sft"), "train-sft");
      require_artifact(dir / artifact::kEpisodesPpoTrain, "gen-data");
      const ScoreCheckpoint am = load_score_checkpoint(checkpoint_path(dir, "am"));
      const SoftmaxPolicy sft = load_policy(checkpoint_path(dir, "sft"));
      const std::vector<Episode> train =
          read_episodes_jsonl(dir / artifact::kEpisodesPpoTrain);
      StageData stage;
      stage.data.ppo_train = train;
      set = build_rehearsal_stage(cfg, stage, sft, am, cfg.ppo.clusters);
    }
    write_rehearsal_jsonl(set, dir / artifact::kRehearsal);
    outputs = {dir / artifact::kRehearsal};
  } else if (verb == "report") {
    bool found = false;
    for (const auto& entry : detail::files_under(dir / "logs")) {
      const std::string stem = entry.filename().string();
      const std::string prefix = "ppo_";
      const std::string suffix = "_stats.csv";
      if (stem.rfind(prefix, 0) != 0 ||
          stem.size() <= prefix.size() + suffix.size() ||
          stem.substr(stem.size() - suffix.size()) != suffix) {
        continue;
      }
      const std::string name =
          stem.substr(prefix.size(), stem.size() - prefix.size() - suffix.size());
      const fs::path snaps = dir / "logs" / ("ppo_" + name + "_snapshots.csv");
      require_artifact(snaps, "train-ppo");
      const std::vector<PpoStepStats> stats = load_ppo_stats_csv(entry);
      const std::vector<EvalSnapshot> snapshots = load_snapshots_csv(snaps);
      const fs::path curves = dir / "curves" / ("ppo_" + name);
      fs::create_directories(curves);
      const double baseline = snapshots.front().values.count("test_mean_score")
                                  ? snapshots.front().values.at("test_mean_score")
                                  : 0.0;
      training_report(stats, snapshots, baseline, curves);
      for (const fs::path& p : detail::files_under(curves)) outputs.push_back(p);
      found = true;
    }
    if (!found) {
      throw std::invalid_argument("report: no PPO stats logs found under " +
                                  (dir / "logs").string() + " (run train-ppo first)");
    }
  } else if (verb == "experiment") {
    const fs::path exp_dir = dir / "experiments" / experiment_name;
    fs::create_directories(exp_dir);
    if (experiment_name == "am-vs-rm-calibration") {
      run_calibration_experiment(cfg, exp_dir);
    } else if (experiment_name == "disparity") {
      run_disparity_experiment(cfg, exp_dir);
    } else if (experiment_name == "hacking") {
      run_hacking_experiment(cfg, exp_dir);
    } else if (experiment_name == "forgetting") {
      run_forgetting_experiment(cfg, exp_dir);
    } else if (experiment_name == "cluster-sweep") {
      run_cluster_sweep_experiment(cfg, exp_dir);
    } else {
      throw std::invalid_argument(
          "unknown experiment '" + experiment_name +
          "' (expected am-vs-rm-calibration, disparity, hacking, forgetting or "
          "cluster-sweep)");
    }
    outputs = detail::files_under(exp_dir);
  } else {
    throw std::invalid_argument("unknown verb: " + verb);
  }

  detail::digest_into(manifest.outputs, dir, outputs);
  manifest.wall_clock_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
          .count();
  const std::string manifest_name = "manifest_" + manifest.verb + ".json";
  write_manifest(manifest, dir / "manifests" / manifest_name);
  return 0;
}

}  // namespace rlhflab
