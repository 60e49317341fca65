#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rlhflab/adam.hpp"
#include "rlhflab/env.hpp"
#include "rlhflab/io.hpp"
#include "rlhflab/numeric.hpp"
#include "rlhflab/score_net.hpp"

namespace rlhflab {

enum class ScoreMode { kReward, kAdvantage };

inline std::string to_string(ScoreMode m) {
  return m == ScoreMode::kReward ? "rm" : "am";
}

inline ScoreMode score_mode_from_string(const std::string& s) {
  if (s == "rm") return ScoreMode::kReward;
  if (s == "am") return ScoreMode::kAdvantage;
  throw std::invalid_argument("unknown score mode: " + s);
}

struct AdvantageConfig {
  double margin = 2.5;   // m
  int n_harmonize = 8;   // N, weight between current and alternate policies
  int k_alternates = 2;  // K, alternate source policies present in the data
  double weight_min = 0.1;
  double weight_max = 10.0;

  void validate() const {
    if (!(margin > 0.0)) throw std::invalid_argument("advantage: margin must be > 0");
    if (n_harmonize < 1) throw std::invalid_argument("advantage: N must be >= 1");
    if (k_alternates < 0 || k_alternates >= n_harmonize) {
      throw std::invalid_argument("advantage: need 0 <= K < N");
    }
    if (!(weight_min > 0.0 && weight_min <= 1.0 && weight_max >= 1.0)) {
      throw std::invalid_argument("advantage: need 0 < w_min <= 1 <= w_max");
    }
  }
};

// Advantage as an affine form a = r_coeff * r + e_coeff * e. For a response
// generated by the current policy (or with K = 0) the alternate-policy sum is
// empty; otherwise the record contributes one importance-weighted term with
// w = clamp(exp(current_logprob - source_logprob), w_min, w_max).
struct AdvantageTerms {
  double r_coeff = 1.0;
  double e_coeff = -1.0;
};

inline AdvantageTerms advantage_terms(double current_logprob, double source_logprob,
                                      bool source_is_current,
                                      const AdvantageConfig& cfg) {
  cfg.validate();
  if (!std::isfinite(current_logprob) || !std::isfinite(source_logprob)) {
    throw std::invalid_argument("advantage: non-finite log-probability");
  }
  const double n = static_cast<double>(cfg.n_harmonize);
  const double k = static_cast<double>(cfg.k_alternates);
  AdvantageTerms t;
  t.e_coeff = -(n - k) / n;  // K = 0 gives the plain a = r - e
  if (!source_is_current && cfg.k_alternates > 0) {
    const double w = std::clamp(std::exp(current_logprob - source_logprob),
                                cfg.weight_min, cfg.weight_max);
    t.r_coeff = 1.0 - w / n;
  }
  return t;
}

inline double advantage_score(const ScoreNet& net, const Prompt& x,
                              const Response& y, double current_logprob,
                              double source_logprob, bool source_is_current,
                              const AdvantageConfig& cfg) {
  const AdvantageTerms t =
      advantage_terms(current_logprob, source_logprob, source_is_current, cfg);
  const ScorePair s = score(net, x, y);
  return t.r_coeff * s.reward + t.e_coeff * s.expected;
}

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

// L = -mean log sigma(r_chosen - r_rejected); gradient reaches only the
// reward head, the expected head stays untouched.
inline LossGrad rm_loss_and_grad(const ScoreNet& net,
                                 const std::vector<ComparisonRecord>& batch) {
  if (batch.empty()) throw std::invalid_argument("rm_loss: empty batch");
  LossGrad out;
  out.grad.assign(net.params.size(), 0.0);
  const detail::MlpHead head = net.reward_head();
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const ComparisonRecord& rec : batch) {
    detail::MlpHead::Cache cache_c, cache_r;
    const double r_c =
        head.forward(reward_input(net.layout, rec.prompt, rec.chosen), &cache_c);
    const double r_r =
        head.forward(reward_input(net.layout, rec.prompt, rec.rejected), &cache_r);
    const double delta = r_c - r_r;
    out.loss -= log_sigmoid(delta) * inv_n;
    const double d_delta = -sigmoid(-delta) * inv_n;  // dL/d(r_c - r_r)
    head.backward(cache_c, d_delta, out.grad.data());
    head.backward(cache_r, -d_delta, out.grad.data());
  }
  return out;
}

// Ranking plus bounding loss on advantage scores:
// L = -mean[ log sigma(a_c - a_r) + log sigma(m - a_c) + log sigma(m + a_r) ].
// The expected head sits inside every advantage term, so both heads train.
inline LossGrad am_loss_and_grad(const ScoreNet& net,
                                 const std::vector<ComparisonRecord>& batch,
                                 const AdvantageConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("am_loss: empty batch");
  cfg.validate();
  LossGrad out;
  out.grad.assign(net.params.size(), 0.0);
  const detail::MlpHead r_head = net.reward_head();
  const detail::MlpHead e_head = net.expected_head();
  double* e_grad = out.grad.data() + net.layout.expected_offset();
  const double m = cfg.margin;
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  for (const ComparisonRecord& rec : batch) {
    const AdvantageTerms tc = advantage_terms(
        rec.chosen_logprob_cur, rec.chosen_logprob, rec.source_is_current(), cfg);
    const AdvantageTerms tr = advantage_terms(rec.rejected_logprob_cur,
                                              rec.rejected_logprob,
                                              rec.source_is_current(), cfg);

    detail::MlpHead::Cache cache_c, cache_r, cache_e;
    const double r_c =
        r_head.forward(reward_input(net.layout, rec.prompt, rec.chosen), &cache_c);
    const double r_r = r_head.forward(
        reward_input(net.layout, rec.prompt, rec.rejected), &cache_r);
    const double e = e_head.forward(rec.prompt.features, &cache_e);

    const double a_c = tc.r_coeff * r_c + tc.e_coeff * e;
    const double a_r = tr.r_coeff * r_r + tr.e_coeff * e;
    const double delta = a_c - a_r;

    out.loss -=
        (log_sigmoid(delta) + log_sigmoid(m - a_c) + log_sigmoid(m + a_r)) * inv_n;

    const double dl_dac = (-sigmoid(-delta) + sigmoid(a_c - m)) * inv_n;
    const double dl_dar = (sigmoid(-delta) - sigmoid(-m - a_r)) * inv_n;

    r_head.backward(cache_c, dl_dac * tc.r_coeff, out.grad.data());
    r_head.backward(cache_r, dl_dar * tr.r_coeff, out.grad.data());
    e_head.backward(cache_e, dl_dac * tc.e_coeff + dl_dar * tr.e_coeff, e_grad);
  }
  return out;
}

// Exponentially decayed running moments for the moving-average score
// normalization baseline. normalize() uses the statistics from before the
// observation, then folds the observation in.
struct MovingAverageNormalizer {
  double mean = 0.0;
  double variance = 1.0;
  double decay = 0.99;
  long count = 0;

  double normalize(double raw) {
    if (!std::isfinite(raw)) {
      throw std::invalid_argument("normalize_ma: non-finite input");
    }
    const double z = (raw - mean) / std::sqrt(variance + 1e-8);
    const double delta = raw - mean;
    mean += (1.0 - decay) * delta;
    variance = decay * (variance + (1.0 - decay) * delta * delta);
    count += 1;
    return z;
  }
};

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct ScoreTrainSettings {
  ScoreMode mode = ScoreMode::kReward;
  AdvantageConfig advantage;
  double learning_rate = 1e-2;  // peak rate; warm-up then cosine decay
  int batch_size = 64;
  int epochs = 1;
  // optional regression of e(x) toward the pair-mean reward, off by default
  bool aux_expected_regression = false;
  double aux_weight = 0.1;
};

struct TrainLogRow {
  int step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct ScoreCheckpoint {
  ScoreMode mode = ScoreMode::kReward;
  ScoreNet net;
  AdvantageConfig advantage;
  std::uint64_t seed = 0;
  int steps = 0;
};

namespace detail {

// squared-error pull of e(x) toward the detached pair-mean reward
inline void add_aux_expected_regression(const ScoreNet& net,
                                        const std::vector<ComparisonRecord>& batch,
                                        double weight, LossGrad& acc) {
  const MlpHead r_head = net.reward_head();
  const MlpHead e_head = net.expected_head();
  double* e_grad = acc.grad.data() + net.layout.expected_offset();
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const ComparisonRecord& rec : batch) {
    const double r_c =
        r_head.forward(reward_input(net.layout, rec.prompt, rec.chosen), nullptr);
    const double r_r = r_head.forward(
        reward_input(net.layout, rec.prompt, rec.rejected), nullptr);
    const double target = 0.5 * (r_c + r_r);
    MlpHead::Cache cache_e;
    const double e = e_head.forward(rec.prompt.features, &cache_e);
    acc.loss += weight * (e - target) * (e - target) * inv_n;
    e_head.backward(cache_e, weight * 2.0 * (e - target) * inv_n, e_grad);
  }
}

}  // namespace detail

// One (by default) epoch of shuffled mini-batch Adam with a warm-up/cosine
// schedule. Aborts with the failing step index if the loss goes non-finite.
inline ScoreCheckpoint train_score_model(
    const std::vector<ComparisonRecord>& dataset, const ScoreTrainSettings& settings,
    RandomStream rng, std::vector<TrainLogRow>* log = nullptr) {
  if (dataset.empty()) throw std::invalid_argument("train_score_model: empty dataset");
  settings.advantage.validate();
  if (settings.batch_size < 1 || settings.epochs < 1) {
    throw std::invalid_argument("train_score_model: bad batch/epoch settings");
  }

  ScoreNetLayout layout;
  layout.d = static_cast<int>(dataset.front().prompt.features.size());
  ScoreNet net = ScoreNet::init(layout, rng.split(0));

  const long n = static_cast<long>(dataset.size());
  const int steps_per_epoch =
      static_cast<int>((n + settings.batch_size - 1) / settings.batch_size);
  const int total_steps = steps_per_epoch * settings.epochs;
  const LrSchedule schedule{settings.learning_rate, total_steps};

  AdamState adam = AdamState::make(net.params.size());
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  RandomStream shuffle_rng = rng.split(1);
  int step = 0;
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (long start = 0; start < n; start += settings.batch_size, ++step) {
      const long end = std::min(n, start + settings.batch_size);
      std::vector<ComparisonRecord> batch;
      batch.reserve(end - start);
      for (long i = start; i < end; ++i) batch.push_back(dataset[order[i]]);

      LossGrad lg = settings.mode == ScoreMode::kReward
                        ? rm_loss_and_grad(net, batch)
                        : am_loss_and_grad(net, batch, settings.advantage);
      if (settings.mode == ScoreMode::kAdvantage && settings.aux_expected_regression) {
        detail::add_aux_expected_regression(net, batch, settings.aux_weight, lg);
      }
      if (!std::isfinite(lg.loss)) {
        throw std::runtime_error("train_score_model: non-finite loss at step " +
                                 std::to_string(step));
      }
      const double lr = schedule.at(step);
      adam_step(net.params, lg.grad, adam, lr);
      if (log) log->push_back({step, lg.loss, lr});
    }
  }

  ScoreCheckpoint ckpt;
  ckpt.mode = settings.mode;
  ckpt.net = std::move(net);
  ckpt.advantage = settings.advantage;
  ckpt.seed = rng.seed();
  ckpt.steps = step;
  return ckpt;
}

// Scalar score a checkpoint assigns to a response sampled from the current
// policy: the raw reward in RM mode, the advantage in AM mode.
inline double score_response(const ScoreCheckpoint& ckpt, const Prompt& x,
                             const Response& y) {
  const ScorePair s = score(ckpt.net, x, y);
  if (ckpt.mode == ScoreMode::kReward) return s.reward;
  const AdvantageTerms t = advantage_terms(0.0, 0.0, true, ckpt.advantage);
  return t.r_coeff * s.reward + t.e_coeff * s.expected;
}

// Scores of the two sides of a comparison record under the checkpoint mode,
// using the record's stored source-policy log-probabilities in AM mode.
inline std::pair<double, double> score_pair(const ScoreCheckpoint& ckpt,
                                            const ComparisonRecord& rec) {
  if (ckpt.mode == ScoreMode::kReward) {
    const detail::MlpHead head = ckpt.net.reward_head();
    return {head.forward(reward_input(ckpt.net.layout, rec.prompt, rec.chosen),
                         nullptr),
            head.forward(reward_input(ckpt.net.layout, rec.prompt, rec.rejected),
                         nullptr)};
  }
  return {advantage_score(ckpt.net, rec.prompt, rec.chosen, rec.chosen_logprob_cur,
                          rec.chosen_logprob, rec.source_is_current(),
                          ckpt.advantage),
          advantage_score(ckpt.net, rec.prompt, rec.rejected,
                          rec.rejected_logprob_cur, rec.rejected_logprob,
                          rec.source_is_current(), ckpt.advantage)};
}

inline nlohmann::json score_checkpoint_to_json(const ScoreCheckpoint& ckpt) {
  return nlohmann::json{
      {"mode", to_string(ckpt.mode)},
      {"layout",
       {{"d", ckpt.net.layout.d},
        {"hidden", ckpt.net.layout.hidden},
        {"heads",
         {{"reward_in", ckpt.net.layout.reward_in()},
          {"expected_in", ckpt.net.layout.expected_in()}}}}},
      {"params", ckpt.net.params},
      {"advantage_config",
       {{"margin", ckpt.advantage.margin},
        {"n", ckpt.advantage.n_harmonize},
        {"k", ckpt.advantage.k_alternates},
        {"weight_min", ckpt.advantage.weight_min},
        {"weight_max", ckpt.advantage.weight_max}}},
      {"seed", ckpt.seed},
      {"steps", ckpt.steps}};
}

inline ScoreCheckpoint score_checkpoint_from_json(const nlohmann::json& j) {
  ScoreCheckpoint ckpt;
  ckpt.mode = score_mode_from_string(j.at("mode").get<std::string>());
  ckpt.net.layout.d = j.at("layout").at("d").get<int>();
  ckpt.net.layout.hidden = j.at("layout").at("hidden").get<int>();
  ckpt.net.params = j.at("params").get<std::vector<double>>();
  if (ckpt.net.params.size() !=
      static_cast<std::size_t>(ckpt.net.layout.param_count())) {
    throw std::runtime_error("score checkpoint: parameter count mismatch");
  }
  const auto& a = j.at("advantage_config");
  ckpt.advantage.margin = a.at("margin").get<double>();
  ckpt.advantage.n_harmonize = a.at("n").get<int>();
  ckpt.advantage.k_alternates = a.at("k").get<int>();
  ckpt.advantage.weight_min = a.at("weight_min").get<double>();
  ckpt.advantage.weight_max = a.at("weight_max").get<double>();
  ckpt.seed = j.at("seed").get<std::uint64_t>();
  ckpt.steps = j.at("steps").get<int>();
  ckpt.advantage.validate();
  return ckpt;
}

inline void save_score_checkpoint(const ScoreCheckpoint& ckpt,
                                  const std::filesystem::path& path) {
  write_text_file(path, score_checkpoint_to_json(ckpt).dump() + "\n");
}

inline ScoreCheckpoint load_score_checkpoint(const std::filesystem::path& path) {
  return score_checkpoint_from_json(nlohmann::json::parse(read_text_file(path)));
}

inline void save_train_log(const std::vector<TrainLogRow>& rows,
                           const std::filesystem::path& path) {
  CsvWriter csv("step,loss,lr");
  for (const TrainLogRow& r : rows) {
    csv.row({std::to_string(r.step), fmt_g6(r.loss), fmt_g6(r.lr)});
  }
  csv.save(path);
}

}  // namespace rlhflab
