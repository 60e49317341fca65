#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rlhflab/io.hpp"
#include "rlhflab/numeric.hpp"
#include "rlhflab/rng.hpp"

namespace rlhflab {

// ---------------------------------------------------------------------------
// Synthetic preference world. Prompts are feature vectors drawn around a
// per-category center, candidate responses are noisy images of the prompt
// under a hidden linear map, and the ground-truth utility is the (negated,
// dimension-normalized) squared residual against that map plus a category
// quality offset. Annotators are simulated by Bradley-Terry sampling with an
// optional category-conditional bias toward an "exploit" style flag that the
// ground-truth utility deliberately ignores.
// ---------------------------------------------------------------------------

struct TaskCategory {
  int id = 0;
  double quality_offset = 0.0;   // b_c
  double candidate_noise = 1.0;  // sigma_c > 0
  double label_bias = 0.0;       // eta_c in [0, 0.5]
  std::vector<double> prompt_center;
};

struct Prompt {
  std::int64_t id = 0;
  int category_id = 0;
  std::vector<double> features;
};

struct Response {
  std::int64_t id = 0;
  std::vector<double> content;
  int exploit_flag = 0;
};

// One preference pair. Log-probabilities are stored both under the policy
// that generated the pair (source policy k) and under source policy 0, the
// stand-in for the current policy, so importance weights are computable
// without re-materializing the candidate pool.
struct ComparisonRecord {
  Prompt prompt;
  Response chosen;
  Response rejected;
  int source_policy_id = 0;
  double chosen_logprob = 0.0;
  double rejected_logprob = 0.0;
  double chosen_logprob_cur = 0.0;
  double rejected_logprob_cur = 0.0;

  bool source_is_current() const { return source_policy_id == 0; }
};

struct Episode {
  Prompt prompt;
  std::vector<Response> candidates;
  std::vector<double> true_utilities;
};

struct ForgetPair {
  Episode episode;
  int expert_index = 0;  // argmax true utility
};

struct EnvParams {
  std::uint64_t seed = 1;
  int d = 8;
  int pool_size = 5;
  double exploit_prob = 0.2;
  double prompt_spread = 0.5;
  std::vector<double> hidden_map;  // row-major d*d
  std::vector<TaskCategory> categories;
  // temperature of each data-collection policy over a candidate pool;
  // index 0 is the current-policy stand-in
  std::vector<double> source_policy_temps;

  int n_categories() const { return static_cast<int>(categories.size()); }
  int n_alternate_policies() const {
    return static_cast<int>(source_policy_temps.size()) - 1;
  }

  void validate() const {
    if (d < 1) throw std::invalid_argument("env: d must be >= 1");
    if (pool_size < 2) throw std::invalid_argument("env: pool_size must be >= 2");
    if (categories.empty()) throw std::invalid_argument("env: no categories");
    if (hidden_map.size() != static_cast<std::size_t>(d) * d) {
      throw std::invalid_argument("env: hidden map must be d*d");
    }
    if (source_policy_temps.empty()) {
      throw std::invalid_argument("env: need at least one source policy");
    }
    for (std::size_t i = 0; i < categories.size(); ++i) {
      const TaskCategory& c = categories[i];
      if (c.id != static_cast<int>(i)) {
        throw std::invalid_argument("env: category ids must be dense 0..C-1");
      }
      if (!(c.candidate_noise > 0.0)) {
        throw std::invalid_argument("env: candidate_noise must be positive");
      }
      if (c.label_bias < 0.0 || c.label_bias > 0.5) {
        throw std::invalid_argument("env: label_bias must lie in [0, 0.5]");
      }
      if (c.prompt_center.size() != static_cast<std::size_t>(d)) {
        throw std::invalid_argument("env: prompt_center must have length d");
      }
    }
    for (double t : source_policy_temps) {
      if (!(t > 0.0)) throw std::invalid_argument("env: temperatures must be positive");
    }
  }
};

namespace stream_label {
constexpr std::uint64_t kEnvSetup = 1;
constexpr std::uint64_t kData = 2;
constexpr std::uint64_t kScoreTrain = 3;
constexpr std::uint64_t kSftTrain = 4;
constexpr std::uint64_t kPpo = 5;
constexpr std::uint64_t kRehearsal = 6;
}  // namespace stream_label

// Default category schedule: quality offsets evenly spaced in [-2, 2], noise
// levels evenly spaced in [0.2, 1.5], and a 0.3 label bias on the two
// noisiest categories (the engineered reward-hacking channel).
struct CategorySpec {
  double quality_offset = 0.0;
  double candidate_noise = 1.0;
  double label_bias = 0.0;
};

inline std::vector<CategorySpec> default_category_schedule(int n_categories) {
  std::vector<CategorySpec> spec(n_categories);
  for (int c = 0; c < n_categories; ++c) {
    const double frac =
        n_categories > 1 ? static_cast<double>(c) / (n_categories - 1) : 0.5;
    spec[c].quality_offset = -2.0 + 4.0 * frac;
    spec[c].candidate_noise = 0.2 + 1.3 * frac;
    spec[c].label_bias = (n_categories >= 2 && c >= n_categories - 2) ? 0.3 : 0.0;
  }
  return spec;
}

inline EnvParams make_env(std::uint64_t seed, int d, int n_categories,
                          int pool_size, double exploit_prob,
                          double prompt_spread, int n_alternate_policies,
                          const std::vector<CategorySpec>& schedule = {}) {
  EnvParams env;
  env.seed = seed;
  env.d = d;
  env.pool_size = pool_size;
  env.exploit_prob = exploit_prob;
  env.prompt_spread = prompt_spread;

  RandomStream setup = RandomStream(seed).split(stream_label::kEnvSetup);
  env.hidden_map.resize(static_cast<std::size_t>(d) * d);
  const double map_scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& t : env.hidden_map) t = map_scale * setup.normal();

  const std::vector<CategorySpec> spec =
      schedule.empty() ? default_category_schedule(n_categories) : schedule;
  if (static_cast<int>(spec.size()) != n_categories) {
    throw std::invalid_argument("make_env: category table size mismatch");
  }
  env.categories.resize(n_categories);
  for (int c = 0; c < n_categories; ++c) {
    TaskCategory& cat = env.categories[c];
    cat.id = c;
    cat.quality_offset = spec[c].quality_offset;
    cat.candidate_noise = spec[c].candidate_noise;
    cat.label_bias = spec[c].label_bias;
    cat.prompt_center.resize(d);
    for (double& x : cat.prompt_center) x = setup.normal();
  }

  env.source_policy_temps.assign(1, 1.0);
  for (int k = 1; k <= n_alternate_policies; ++k) {
    const double frac = n_alternate_policies > 1
                            ? static_cast<double>(k - 1) / (n_alternate_policies - 1)
                            : 0.0;
    env.source_policy_temps.push_back(0.6 + 1.4 * frac);
  }

  env.validate();
  return env;
}

inline std::vector<double> apply_hidden_map(const EnvParams& env,
                                            const std::vector<double>& x) {
  std::vector<double> out(env.d, 0.0);
  for (int i = 0; i < env.d; ++i) {
    double s = 0.0;
    for (int j = 0; j < env.d; ++j) {
      s += env.hidden_map[static_cast<std::size_t>(i) * env.d + j] * x[j];
    }
    out[i] = s;
  }
  return out;
}

// Ground-truth utility u*(x, y) = b_c - ||y - T x||^2 / d. The exploit flag
// is deliberately ignored: it exists only in the annotation channel.
inline double oracle_utility(const Prompt& prompt, const Response& response,
                             const EnvParams& env) {
  if (prompt.features.size() != static_cast<std::size_t>(env.d) ||
      response.content.size() != static_cast<std::size_t>(env.d)) {
    throw std::invalid_argument("oracle_utility: dimension mismatch");
  }
  if (prompt.category_id < 0 || prompt.category_id >= env.n_categories()) {
    throw std::invalid_argument("oracle_utility: unknown category");
  }
  const std::vector<double> target = apply_hidden_map(env, prompt.features);
  double sq = 0.0;
  for (int i = 0; i < env.d; ++i) {
    const double r = response.content[i] - target[i];
    sq += r * r;
  }
  return env.categories[prompt.category_id].quality_offset -
         sq / static_cast<double>(env.d);
}

inline Episode sample_episode(const EnvParams& env, const TaskCategory& category,
                              std::int64_t prompt_id, RandomStream& rng) {
  Episode ep;
  ep.prompt.id = prompt_id;
  ep.prompt.category_id = category.id;
  ep.prompt.features.resize(env.d);
  for (int i = 0; i < env.d; ++i) {
    ep.prompt.features[i] =
        category.prompt_center[i] + env.prompt_spread * rng.normal();
  }
  const std::vector<double> target = apply_hidden_map(env, ep.prompt.features);
  ep.candidates.resize(env.pool_size);
  ep.true_utilities.resize(env.pool_size);
  for (int j = 0; j < env.pool_size; ++j) {
    Response& y = ep.candidates[j];
    y.id = prompt_id * env.pool_size + j;
    y.content.resize(env.d);
    for (int i = 0; i < env.d; ++i) {
      y.content[i] = target[i] + category.candidate_noise * rng.normal();
    }
    y.exploit_flag = rng.bernoulli(env.exploit_prob) ? 1 : 0;
    ep.true_utilities[j] = oracle_utility(ep.prompt, y, env);
  }
  return ep;
}

// Simulated annotator: with probability eta (when exploit flags differ) the
// flagged candidate wins outright; otherwise Bradley-Terry on true utility.
// Returns true when candidate A is preferred.
inline bool preference_label(double utility_a, double utility_b, int exploit_a,
                             int exploit_b, double eta, RandomStream& rng) {
  if (!std::isfinite(utility_a) || !std::isfinite(utility_b)) {
    throw std::invalid_argument("preference_label: non-finite utility");
  }
  if (exploit_a != exploit_b && rng.bernoulli(eta)) {
    return exploit_a == 1;
  }
  return rng.bernoulli(sigmoid(utility_a - utility_b));
}

// log probabilities of a softmax-over-pool data-collection policy with the
// given temperature: log softmax(u / t)
inline std::vector<double> source_policy_logprobs(const Episode& ep,
                                                  double temperature) {
  std::vector<double> logits(ep.true_utilities.size());
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    logits[i] = ep.true_utilities[i] / temperature;
    max_logit = std::max(max_logit, logits[i]);
  }
  double z = 0.0;
  for (double l : logits) z += std::exp(l - max_logit);
  const double log_z = max_logit + std::log(z);
  for (double& l : logits) l -= log_z;
  return logits;
}

struct DatasetCounts {
  long rm_train_pairs = 20000;
  long rm_test_pairs = 2000;
  long ppo_train_prompts = 2000;
  long ppo_test_prompts = 500;
  long forget_pairs = 500;

  void validate() const {
    if (rm_train_pairs <= 0 || rm_test_pairs <= 0 || ppo_train_prompts <= 0 ||
        ppo_test_prompts <= 0 || forget_pairs <= 0) {
      throw std::invalid_argument("dataset counts must be positive");
    }
  }
};

struct Datasets {
  std::vector<ComparisonRecord> rm_train;
  std::vector<ComparisonRecord> rm_test;
  std::vector<Episode> ppo_train;
  std::vector<Episode> ppo_test;
  std::vector<ForgetPair> forget;
};

// Stream an episode is generated from; exposed so episodes are regenerable
// from (env, prompt_id) alone.
inline RandomStream episode_stream(const EnvParams& env, std::int64_t prompt_id) {
  return RandomStream(env.seed)
      .split(stream_label::kData)
      .split(static_cast<std::uint64_t>(prompt_id));
}

inline int argmax_index(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

namespace detail {

inline ComparisonRecord make_comparison(const EnvParams& env, Episode&& ep,
                                        int source_policy, RandomStream& rng) {
  const std::vector<double> lp_src =
      source_policy_logprobs(ep, env.source_policy_temps[source_policy]);
  const std::vector<double> lp_cur =
      source_policy == 0 ? lp_src : source_policy_logprobs(ep, env.source_policy_temps[0]);

  std::vector<double> weights(lp_src.size());
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = std::exp(lp_src[i]);
  const std::size_t first = rng.weighted_index(weights);
  std::vector<double> rest = weights;
  rest[first] = 0.0;
  const std::size_t second = rng.weighted_index(rest);

  const TaskCategory& cat = env.categories[ep.prompt.category_id];
  const bool first_wins = preference_label(
      ep.true_utilities[first], ep.true_utilities[second],
      ep.candidates[first].exploit_flag, ep.candidates[second].exploit_flag,
      cat.label_bias, rng);
  const std::size_t win = first_wins ? first : second;
  const std::size_t lose = first_wins ? second : first;

  ComparisonRecord rec;
  rec.prompt = ep.prompt;
  rec.chosen = ep.candidates[win];
  rec.rejected = ep.candidates[lose];
  rec.source_policy_id = source_policy;
  rec.chosen_logprob = lp_src[win];
  rec.rejected_logprob = lp_src[lose];
  rec.chosen_logprob_cur = lp_cur[win];
  rec.rejected_logprob_cur = lp_cur[lose];
  return rec;
}

}  // namespace detail

// Materializes every split. Prompt ids are a single monotone counter across
// splits, so train/test id sets are disjoint by construction; categories
// cycle round-robin so each split covers the full task spectrum.
inline Datasets build_datasets(const EnvParams& env, const DatasetCounts& counts) {
  env.validate();
  counts.validate();

  Datasets out;
  std::int64_t next_id = 0;
  const int n_cat = env.n_categories();
  const int n_pol = static_cast<int>(env.source_policy_temps.size());

  auto next_episode = [&](std::int64_t id, RandomStream& rng) {
    const TaskCategory& cat = env.categories[id % n_cat];
    return sample_episode(env, cat, id, rng);
  };

  for (long i = 0; i < counts.rm_train_pairs + counts.rm_test_pairs; ++i) {
    const std::int64_t id = next_id++;
    RandomStream rng = episode_stream(env, id);
    Episode ep = next_episode(id, rng);
    ComparisonRecord rec = detail::make_comparison(
        env, std::move(ep), static_cast<int>(i % n_pol), rng);
    if (i < counts.rm_train_pairs) {
      out.rm_train.push_back(std::move(rec));
    } else {
      out.rm_test.push_back(std::move(rec));
    }
  }

  for (long i = 0; i < counts.ppo_train_prompts; ++i) {
    const std::int64_t id = next_id++;
    RandomStream rng = episode_stream(env, id);
    out.ppo_train.push_back(next_episode(id, rng));
  }
  for (long i = 0; i < counts.ppo_test_prompts; ++i) {
    const std::int64_t id = next_id++;
    RandomStream rng = episode_stream(env, id);
    out.ppo_test.push_back(next_episode(id, rng));
  }
  for (long i = 0; i < counts.forget_pairs; ++i) {
    const std::int64_t id = next_id++;
    RandomStream rng = episode_stream(env, id);
    ForgetPair fp;
    fp.episode = next_episode(id, rng);
    fp.expert_index = argmax_index(fp.episode.true_utilities);
    out.forget.push_back(std::move(fp));
  }
  return out;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

inline nlohmann::json env_to_json(const EnvParams& env) {
  nlohmann::json cats = nlohmann::json::array();
  for (const TaskCategory& c : env.categories) {
    cats.push_back({{"id", c.id},
                    {"quality_offset", c.quality_offset},
                    {"candidate_noise", c.candidate_noise},
                    {"label_bias", c.label_bias},
                    {"prompt_center", c.prompt_center}});
  }
  return nlohmann::json{{"seed", env.seed},
                        {"d", env.d},
                        {"pool_size", env.pool_size},
                        {"exploit_prob", env.exploit_prob},
                        {"prompt_spread", env.prompt_spread},
                        {"hidden_map", env.hidden_map},
                        {"categories", cats},
                        {"source_policy_temps", env.source_policy_temps}};
}

inline EnvParams env_from_json(const nlohmann::json& j) {
  EnvParams env;
  env.seed = j.at("seed").get<std::uint64_t>();
  env.d = j.at("d").get<int>();
  env.pool_size = j.at("pool_size").get<int>();
  env.exploit_prob = j.at("exploit_prob").get<double>();
  env.prompt_spread = j.at("prompt_spread").get<double>();
  env.hidden_map = j.at("hidden_map").get<std::vector<double>>();
  for (const auto& c : j.at("categories")) {
    TaskCategory cat;
    cat.id = c.at("id").get<int>();
    cat.quality_offset = c.at("quality_offset").get<double>();
    cat.candidate_noise = c.at("candidate_noise").get<double>();
    cat.label_bias = c.at("label_bias").get<double>();
    cat.prompt_center = c.at("prompt_center").get<std::vector<double>>();
    env.categories.push_back(std::move(cat));
  }
  env.source_policy_temps = j.at("source_policy_temps").get<std::vector<double>>();
  env.validate();
  return env;
}

inline void save_env(const EnvParams& env, const std::filesystem::path& path) {
  write_text_file(path, env_to_json(env).dump(2) + "\n");
}

inline EnvParams load_env(const std::filesystem::path& path) {
  return env_from_json(nlohmann::json::parse(read_text_file(path)));
}

namespace detail {

inline nlohmann::json response_side_json(const Response& r, double logprob,
                                         double logprob_cur) {
  return nlohmann::json{{"content", r.content},
                        {"exploit", r.exploit_flag},
                        {"logprob", logprob},
                        {"logprob_cur", logprob_cur}};
}

}  // namespace detail

inline void write_comparisons_jsonl(const std::vector<ComparisonRecord>& recs,
                                    const std::filesystem::path& path) {
  std::ostringstream out;
  for (const ComparisonRecord& r : recs) {
    nlohmann::json j{
        {"id", r.prompt.id},
        {"category", r.prompt.category_id},
        {"prompt", r.prompt.features},
        {"chosen",
         detail::response_side_json(r.chosen, r.chosen_logprob, r.chosen_logprob_cur)},
        {"rejected", detail::response_side_json(r.rejected, r.rejected_logprob,
                                                r.rejected_logprob_cur)},
        {"source_policy", r.source_policy_id}};
    out << j.dump() << '\n';
  }
  write_text_file(path, out.str());
}

inline std::vector<ComparisonRecord> read_comparisons_jsonl(
    const std::filesystem::path& path) {
  std::vector<ComparisonRecord> recs;
  const std::vector<std::string> lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(i + 1) +
                               ": " + e.what());
    }
    ComparisonRecord r;
    r.prompt.id = j.at("id").get<std::int64_t>();
    r.prompt.category_id = j.at("category").get<int>();
    r.prompt.features = j.at("prompt").get<std::vector<double>>();
    const auto& c = j.at("chosen");
    const auto& x = j.at("rejected");
    r.chosen.id = r.prompt.id * 2;
    r.chosen.content = c.at("content").get<std::vector<double>>();
    r.chosen.exploit_flag = c.at("exploit").get<int>();
    r.chosen_logprob = c.at("logprob").get<double>();
    r.chosen_logprob_cur = c.at("logprob_cur").get<double>();
    r.rejected.id = r.prompt.id * 2 + 1;
    r.rejected.content = x.at("content").get<std::vector<double>>();
    r.rejected.exploit_flag = x.at("exploit").get<int>();
    r.rejected_logprob = x.at("logprob").get<double>();
    r.rejected_logprob_cur = x.at("logprob_cur").get<double>();
    r.source_policy_id = j.at("source_policy").get<int>();
    recs.push_back(std::move(r));
  }
  return recs;
}

inline void write_episodes_jsonl(const std::vector<Episode>& eps,
                                 const std::filesystem::path& path) {
  std::ostringstream out;
  for (const Episode& ep : eps) {
    nlohmann::json cands = nlohmann::json::array();
    for (const Response& y : ep.candidates) {
      cands.push_back({{"content", y.content}, {"exploit", y.exploit_flag}});
    }
    nlohmann::json j{{"id", ep.prompt.id},
                     {"category", ep.prompt.category_id},
                     {"prompt", ep.prompt.features},
                     {"candidates", cands},
                     {"utilities", ep.true_utilities}};
    out << j.dump() << '\n';
  }
  write_text_file(path, out.str());
}

inline std::vector<Episode> read_episodes_jsonl(const std::filesystem::path& path) {
  std::vector<Episode> eps;
  const std::vector<std::string> lines = read_lines(path);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(lines[i]);
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ": line " + std::to_string(i + 1) +
                               ": " + e.what());
    }
    Episode ep;
    ep.prompt.id = j.at("id").get<std::int64_t>();
    ep.prompt.category_id = j.at("category").get<int>();
    ep.prompt.features = j.at("prompt").get<std::vector<double>>();
    const auto& cands = j.at("candidates");
    int idx = 0;
    for (const auto& c : cands) {
      Response y;
      y.id = ep.prompt.id * static_cast<std::int64_t>(cands.size()) + idx++;
      y.content = c.at("content").get<std::vector<double>>();
      y.exploit_flag = c.at("exploit").get<int>();
      ep.candidates.push_back(std::move(y));
    }
    ep.true_utilities = j.at("utilities").get<std::vector<double>>();
    eps.push_back(std::move(ep));
  }
  return eps;
}

inline void write_forget_jsonl(const std::vector<ForgetPair>& pairs,
                               const std::filesystem::path& path) {
  std::ostringstream out;
  for (const ForgetPair& fp : pairs) {
    const Response& expert = fp.episode.candidates[fp.expert_index];
    nlohmann::json j{{"id", fp.episode.prompt.id},
                     {"category", fp.episode.prompt.category_id},
                     {"prompt", fp.episode.prompt.features},
                     {"expert",
                      {{"content", expert.content}, {"exploit", expert.exploit_flag}}}};
    out << j.dump() << '\n';
  }
  write_text_file(path, out.str());
}

}  // namespace rlhflab
