#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rlhflab/adam.hpp"
#include "rlhflab/env.hpp"
#include "rlhflab/io.hpp"
#include "rlhflab/numeric.hpp"
#include "rlhflab/rng.hpp"
#include "rlhflab/scoremodel.hpp"

namespace rlhflab {

// ---------------------------------------------------------------------------
// The stand-in LLM: a linear softmax policy over each episode's candidate
// pool. The pair feature is [prompt, response, exploit flag, prompt*response
// elementwise], so the policy can read the exploit channel directly and can
// represent diagonal prompt-response interactions.
// ---------------------------------------------------------------------------

struct SoftmaxPolicy {
  int d = 8;
  double temperature = 1.0;
  std::vector<double> weights;  // length psi_dim(d)

  static int psi_dim(int d) { return 3 * d + 1; }

  static SoftmaxPolicy zeros(int d) {
    SoftmaxPolicy p;
    p.d = d;
    p.weights.assign(psi_dim(d), 0.0);
    return p;
  }
};

inline std::vector<double> pair_features(const Prompt& x, const Response& y) {
  const std::size_t d = x.features.size();
  if (y.content.size() != d) {
    throw std::invalid_argument("pair_features: dimension mismatch");
  }
  std::vector<double> psi;
  psi.reserve(3 * d + 1);
  psi.insert(psi.end(), x.features.begin(), x.features.end());
  psi.insert(psi.end(), y.content.begin(), y.content.end());
  psi.push_back(static_cast<double>(y.exploit_flag));
  for (std::size_t i = 0; i < d; ++i) psi.push_back(x.features[i] * y.content[i]);
  return psi;
}

inline std::vector<double> action_logits(const SoftmaxPolicy& policy,
                                         const Episode& ep) {
  if (ep.candidates.empty()) {
    throw std::invalid_argument("action_logits: empty candidate pool");
  }
  std::vector<double> logits(ep.candidates.size());
  for (std::size_t i = 0; i < ep.candidates.size(); ++i) {
    const std::vector<double> psi = pair_features(ep.prompt, ep.candidates[i]);
    if (psi.size() != policy.weights.size()) {
      throw std::invalid_argument("action_logits: policy layout mismatch");
    }
    double s = 0.0;
    for (std::size_t j = 0; j < psi.size(); ++j) s += policy.weights[j] * psi[j];
    logits[i] = s / policy.temperature;
  }
  return logits;
}

inline std::vector<double> log_action_probs(const SoftmaxPolicy& policy,
                                            const Episode& ep) {
  std::vector<double> logits = action_logits(policy, ep);
  const double max_logit = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - max_logit);
  const double log_z = max_logit + std::log(z);
  for (double& l : logits) l -= log_z;
  return logits;
}

inline std::vector<double> action_probs(const SoftmaxPolicy& policy,
                                        const Episode& ep) {
  std::vector<double> lp = log_action_probs(policy, ep);
  for (double& v : lp) v = std::exp(v);
  return lp;
}

// evaluation convention: deterministic argmax action, ties to the lower index
inline int argmax_action(const SoftmaxPolicy& policy, const Episode& ep) {
  return argmax_index(action_logits(policy, ep));
}

// exact KL over the finite candidate pool, sum p log(p/q) >= 0
inline double kl_to_init(const SoftmaxPolicy& policy,
                         const SoftmaxPolicy& init_policy, const Episode& ep) {
  if (policy.d != init_policy.d) {
    throw std::invalid_argument("kl_to_init: layout mismatch");
  }
  const std::vector<double> lp = log_action_probs(policy, ep);
  const std::vector<double> lq = log_action_probs(init_policy, ep);
  double kl = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  }
  return std::max(0.0, kl);
}

// ---------------------------------------------------------------------------
// teacher forcing
// ---------------------------------------------------------------------------

struct TeacherPair {
  Episode episode;
  int response_index = 0;
};

// Mean negative log-likelihood of the designated responses and its gradient
// with respect to the policy weights.
inline LossGrad teacher_nll_and_grad(const SoftmaxPolicy& policy,
                                     const std::vector<const TeacherPair*>& batch) {
  if (batch.empty()) throw std::invalid_argument("teacher_nll: empty batch");
  LossGrad out;
  out.grad.assign(policy.weights.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const TeacherPair* pair : batch) {
    const Episode& ep = pair->episode;
    if (pair->response_index < 0 ||
        pair->response_index >= static_cast<int>(ep.candidates.size())) {
      throw std::invalid_argument("teacher_nll: response index out of range");
    }
    const std::vector<double> lp = log_action_probs(policy, ep);
    out.loss -= lp[pair->response_index] * inv_n;
    // d(-log p[a])/dW = sum_i (p_i - [i == a]) psi_i / temperature
    for (std::size_t i = 0; i < ep.candidates.size(); ++i) {
      const double coeff =
          (std::exp(lp[i]) - (static_cast<int>(i) == pair->response_index ? 1.0 : 0.0)) *
          inv_n / policy.temperature;
      const std::vector<double> psi = pair_features(ep.prompt, ep.candidates[i]);
      for (std::size_t j = 0; j < psi.size(); ++j) out.grad[j] += coeff * psi[j];
    }
  }
  return out;
}

inline LossGrad teacher_nll_and_grad(const SoftmaxPolicy& policy,
                                     const std::vector<TeacherPair>& batch) {
  std::vector<const TeacherPair*> ptrs;
  ptrs.reserve(batch.size());
  for (const TeacherPair& p : batch) ptrs.push_back(&p);
  return teacher_nll_and_grad(policy, ptrs);
}

// One pass of shuffled mini-batch gradient ascent on mean log pi(expert).
inline void sft_update(SoftmaxPolicy& policy, const std::vector<TeacherPair>& pairs,
                       double learning_rate, int batch_size, RandomStream& rng) {
  if (pairs.empty()) throw std::invalid_argument("sft_update: no pairs");
  if (batch_size < 1) throw std::invalid_argument("sft_update: bad batch size");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    const std::size_t end = std::min(pairs.size(), start + batch_size);
    std::vector<const TeacherPair*> batch;
    batch.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) batch.push_back(&pairs[order[i]]);
    const LossGrad nll = teacher_nll_and_grad(policy, batch);
    for (std::size_t j = 0; j < policy.weights.size(); ++j) {
      policy.weights[j] -= learning_rate * nll.grad[j];
    }
  }
}

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

enum class ScoreSignal { kReward, kRewardMovingAverage, kAdvantage };

inline std::string to_string(ScoreSignal s) {
  switch (s) {
    case ScoreSignal::kReward: return "rm";
    case ScoreSignal::kRewardMovingAverage: return "rm_ma";
    case ScoreSignal::kAdvantage: return "am";
  }
  return "rm";
}

inline ScoreSignal score_signal_from_string(const std::string& s) {
  if (s == "rm") return ScoreSignal::kReward;
  if (s == "rm_ma") return ScoreSignal::kRewardMovingAverage;
  if (s == "am") return ScoreSignal::kAdvantage;
  throw std::invalid_argument("unknown ppo score mode: " + s);
}

struct PpoSettings {
  double kl_coeff = 0.1;    // beta
  double clip_ratio = 0.2;  // epsilon
  int steps = 100;
  int batch_prompts = 64;
  double learning_rate = 1e-3;
  ScoreSignal score_mode = ScoreSignal::kReward;
  bool rehearsal = false;
  double rehearsal_coeff = 0.01;  // gamma
  double ma_decay = 0.99;

  void validate() const {
    if (kl_coeff < 0.0) throw std::invalid_argument("ppo: beta must be >= 0");
    if (!(clip_ratio >= 0.0 && clip_ratio < 1.0)) {
      throw std::invalid_argument("ppo: clip ratio must lie in [0, 1)");
    }
    if (rehearsal_coeff < 0.0) throw std::invalid_argument("ppo: gamma must be >= 0");
    if (batch_prompts < 1 || steps < 0) {
      throw std::invalid_argument("ppo: bad step/batch settings");
    }
  }
};

struct PpoSample {
  const Episode* episode = nullptr;
  int action = 0;
  double old_logprob = 0.0;
  double advantage = 0.0;
};

// Clipped surrogate mean_i min(rho_i A_i, clamp(rho_i, 1-eps, 1+eps) A_i)
// and its gradient. On the tie the clipped branch wins, so the degenerate
// eps = 0 band has zero gradient everywhere.
inline LossGrad ppo_clip_surrogate(const SoftmaxPolicy& policy,
                                   const std::vector<PpoSample>& samples,
                                   double clip_ratio) {
  if (samples.empty()) throw std::invalid_argument("ppo_clip_surrogate: no samples");
  LossGrad out;
  out.grad.assign(policy.weights.size(), 0.0);
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  for (const PpoSample& s : samples) {
    const Episode& ep = *s.episode;
    const std::vector<double> lp = log_action_probs(policy, ep);
    const double ratio = std::exp(lp[s.action] - s.old_logprob);
    const double clipped_ratio =
        std::clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio);
    const double unclipped = ratio * s.advantage;
    const double clipped = clipped_ratio * s.advantage;
    out.loss += std::min(unclipped, clipped) * inv_n;

    double dsurr_dratio;
    if (unclipped < clipped) {
      dsurr_dratio = s.advantage;
    } else {
      const bool inside = ratio > 1.0 - clip_ratio && ratio < 1.0 + clip_ratio;
      dsurr_dratio = inside ? s.advantage : 0.0;
    }
    if (dsurr_dratio == 0.0) continue;

    // d(ratio)/dW = ratio * dlogpi/dW; dlogpi(a)/dW = (psi_a - E_p psi)/temp
    const double coeff = dsurr_dratio * ratio * inv_n / policy.temperature;
    std::vector<double> mean_psi(policy.weights.size(), 0.0);
    for (std::size_t i = 0; i < ep.candidates.size(); ++i) {
      const std::vector<double> psi = pair_features(ep.prompt, ep.candidates[i]);
      const double p = std::exp(lp[i]);
      for (std::size_t j = 0; j < psi.size(); ++j) mean_psi[j] += p * psi[j];
    }
    const std::vector<double> psi_a =
        pair_features(ep.prompt, ep.candidates[s.action]);
    for (std::size_t j = 0; j < psi_a.size(); ++j) {
      out.grad[j] += coeff * (psi_a[j] - mean_psi[j]);
    }
  }
  return out;
}

using ResponseScorer = std::function<double(const Episode&, int)>;

struct PpoStepStats {
  int step = 0;
  double mean_score = 0.0;
  double mean_kl = 0.0;
  double mean_oracle_utility = 0.0;
  double rehearsal_nll = 0.0;
};

// Single-step contextual-bandit PPO-clip with a batch-mean baseline over the
// shaped reward R = score - beta * (log pi(y) - log pi_init(y)). The trainer
// owns the policy, the optimizer state and (in moving-average mode) the score
// normalizer; rehearsal mini-batches advance round-robin without touching the
// random stream, so a gamma = 0 run reproduces plain PPO bit for bit.
class PpoTrainer {
 public:
  PpoTrainer(SoftmaxPolicy initial_policy, PpoSettings settings,
             ResponseScorer scorer, RandomStream rng)
      : policy_(initial_policy),
        init_policy_(std::move(initial_policy)),
        settings_(settings),
        scorer_(std::move(scorer)),
        adam_(AdamState::make(policy_.weights.size())),
        rng_(rng) {
    settings_.validate();
    normalizer_.decay = settings_.ma_decay;
  }

  const SoftmaxPolicy& policy() const { return policy_; }
  const SoftmaxPolicy& init_policy() const { return init_policy_; }
  const PpoSettings& settings() const { return settings_; }
  int steps_taken() const { return step_count_; }

  PpoStepStats step(const std::vector<const Episode*>& batch) {
    if (settings_.rehearsal) {
      throw std::invalid_argument("ppo step: rehearsal enabled but no rehearsal set");
    }
    return step_impl(batch, nullptr);
  }

  PpoStepStats step_with_rehearsal(const std::vector<const Episode*>& batch,
                                   const std::vector<TeacherPair>& rehearsal_set) {
    if (!settings_.rehearsal) {
      throw std::invalid_argument("ppo step: settings do not enable rehearsal");
    }
    if (rehearsal_set.empty()) {
      throw std::invalid_argument("ppo step: rehearsal set is empty");
    }
    return step_impl(batch, &rehearsal_set);
  }

 private:
  PpoStepStats step_impl(const std::vector<const Episode*>& batch,
                         const std::vector<TeacherPair>* rehearsal_set) {
    if (batch.empty()) throw std::invalid_argument("ppo step: empty batch");
    PpoStepStats stats;
    stats.step = step_count_;

    std::vector<PpoSample> samples(batch.size());
    std::vector<double> shaped(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Episode& ep = *batch[i];
      const std::vector<double> lp = log_action_probs(policy_, ep);
      std::vector<double> probs(lp.size());
      for (std::size_t j = 0; j < lp.size(); ++j) probs[j] = std::exp(lp[j]);
      const int action = static_cast<int>(rng_.weighted_index(probs));

      double raw = scorer_(ep, action);
      if (settings_.score_mode == ScoreSignal::kRewardMovingAverage) {
        raw = normalizer_.normalize(raw);
      }
      if (!std::isfinite(raw)) {
        throw std::runtime_error("ppo step: non-finite score at step " +
                                 std::to_string(step_count_));
      }
      const double init_lp = log_action_probs(init_policy_, ep)[action];
      shaped[i] = raw - settings_.kl_coeff * (lp[action] - init_lp);

      samples[i] = {&ep, action, lp[action], 0.0};
      stats.mean_score += raw;
      stats.mean_kl += kl_to_init(policy_, init_policy_, ep);
      stats.mean_oracle_utility += ep.true_utilities[action];
    }
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    stats.mean_score *= inv_n;
    stats.mean_kl *= inv_n;
    stats.mean_oracle_utility *= inv_n;

    const double baseline = mean(shaped);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      samples[i].advantage = shaped[i] - baseline;
    }

    const LossGrad surrogate = ppo_clip_surrogate(policy_, samples, settings_.clip_ratio);
    std::vector<double> objective_grad = surrogate.grad;

    if (rehearsal_set) {
      std::vector<const TeacherPair*> mini;
      const int mini_size =
          std::max(1, settings_.batch_prompts / 4);  // quarter of the PPO batch
      mini.reserve(mini_size);
      for (int i = 0; i < mini_size; ++i) {
        mini.push_back(&(*rehearsal_set)[rehearsal_cursor_ % rehearsal_set->size()]);
        rehearsal_cursor_ += 1;
      }
      const LossGrad nll = teacher_nll_and_grad(policy_, mini);
      stats.rehearsal_nll = nll.loss;
      const double gamma = settings_.rehearsal_coeff;
      for (std::size_t j = 0; j < objective_grad.size(); ++j) {
        objective_grad[j] += gamma * (-nll.grad[j]);
      }
    }

    // ascend: Adam minimizes, so feed the negated objective gradient
    for (double& g : objective_grad) g = -g;
    adam_step(policy_.weights, objective_grad, adam_, settings_.learning_rate);
    step_count_ += 1;
    return stats;
  }

  SoftmaxPolicy policy_;
  SoftmaxPolicy init_policy_;
  PpoSettings settings_;
  ResponseScorer scorer_;
  AdamState adam_;
  MovingAverageNormalizer normalizer_;
  RandomStream rng_;
  int step_count_ = 0;
  std::size_t rehearsal_cursor_ = 0;
};

// One rejection-sampling iteration: sample a response per prompt, keep the
// ones whose score clears the threshold, teacher-force on the kept set.
// Returns the kept count; zero kept leaves the policy untouched.
inline long rejection_sampling_iteration(SoftmaxPolicy& policy,
                                         const std::vector<const Episode*>& batch,
                                         const ResponseScorer& scorer, double tau,
                                         double learning_rate, RandomStream& rng) {
  std::vector<TeacherPair> kept;
  for (const Episode* ep : batch) {
    std::vector<double> probs = action_probs(policy, *ep);
    const int action = static_cast<int>(rng.weighted_index(probs));
    if (scorer(*ep, action) >= tau) {
      kept.push_back({*ep, action});
    }
  }
  if (kept.empty()) return 0;
  const LossGrad nll = teacher_nll_and_grad(policy, kept);
  for (std::size_t j = 0; j < policy.weights.size(); ++j) {
    policy.weights[j] -= learning_rate * nll.grad[j];
  }
  return static_cast<long>(kept.size());
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

inline nlohmann::json policy_to_json(const SoftmaxPolicy& policy,
                                     std::uint64_t seed, int steps,
                                     const std::string& lineage) {
  return nlohmann::json{
      {"layout", {{"d", policy.d}, {"psi_dim", SoftmaxPolicy::psi_dim(policy.d)}}},
      {"W", policy.weights},
      {"temperature", policy.temperature},
      {"seed", seed},
      {"steps", steps},
      {"lineage", lineage}};
}

inline SoftmaxPolicy policy_from_json(const nlohmann::json& j) {
  SoftmaxPolicy p;
  p.d = j.at("layout").at("d").get<int>();
  p.temperature = j.at("temperature").get<double>();
  p.weights = j.at("W").get<std::vector<double>>();
  if (p.weights.size() != static_cast<std::size_t>(SoftmaxPolicy::psi_dim(p.d))) {
    throw std::runtime_error("policy checkpoint: weight count mismatch");
  }
  return p;
}

inline void save_policy(const SoftmaxPolicy& policy, std::uint64_t seed, int steps,
                        const std::string& lineage,
                        const std::filesystem::path& path) {
  write_text_file(path, policy_to_json(policy, seed, steps, lineage).dump() + "\n");
}

inline SoftmaxPolicy load_policy(const std::filesystem::path& path) {
  return policy_from_json(nlohmann::json::parse(read_text_file(path)));
}

inline void save_ppo_stats(const std::vector<PpoStepStats>& rows,
                           const std::filesystem::path& path) {
  CsvWriter csv("step,mean_score,mean_kl,mean_oracle_utility,rehearsal_nll");
  for (const PpoStepStats& r : rows) {
    csv.row({std::to_string(r.step), fmt_g6(r.mean_score), fmt_g6(r.mean_kl),
             fmt_g6(r.mean_oracle_utility), fmt_g6(r.rehearsal_nll)});
  }
  csv.save(path);
}

}  // namespace rlhflab
