#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rlhflab/env.hpp"
#include "rlhflab/io.hpp"
#include "rlhflab/policy.hpp"
#include "rlhflab/scoremodel.hpp"

namespace rlhflab {

// ---------------------------------------------------------------------------
// Run configuration: one flat document of blocks with defaults filled in,
// strict key checking, and dotted-path command-line overrides. The config
// hash is taken over the fully-defaulted canonical serialization, so an
// override that restates a default hashes identically.
// ---------------------------------------------------------------------------

struct CategoryTableRow {
  double quality_offset = 0.0;
  double candidate_noise = 1.0;
  double label_bias = 0.0;
};

struct EnvironmentBlock {
  int d = 8;
  int categories = 6;
  int pool_size = 5;
  double exploit_prob = 0.2;
  double prompt_spread = 0.5;
  std::uint64_t seed = 1;
  std::vector<CategoryTableRow> category_table;  // empty = default schedule
};

struct DataBlock {
  long rm_train_pairs = 20000;
  long rm_test_pairs = 2000;
  long ppo_train_prompts = 2000;
  long ppo_test_prompts = 500;
  long forget_pairs = 500;
  int alternate_policies = 2;  // K
};

struct ScoreBlock {
  double margin = 2.5;
  int n = 8;
  double weight_min = 0.1;
  double weight_max = 10.0;
  double lr = 1e-2;
  int batch = 64;
  int epochs = 1;
  bool aux_expected = false;
  double aux_weight = 0.1;
};

struct PpoBlock {
  std::string score_mode = "rm";
  double beta = 0.1;
  double clip_ratio = 0.2;
  int steps = 100;
  int batch_prompts = 64;
  double lr = 1e-3;
  bool rehearsal = false;
  double gamma = 0.01;
  int clusters = 8;
  int top_k = 4;
  double ma_decay = 0.99;
  double sft_lr = 0.1;
  int sft_passes = 50;
  int sft_batch = 64;
  std::string external_records;  // optional input for select-rehearsal
};

struct EvalBlock {
  int bins = 10;
  double tie_epsilon = 0.05;
  int snapshot_interval = 5;
};

struct PathsBlock {
  std::string out_dir = "out";
};

struct RunConfig {
  EnvironmentBlock environment;
  DataBlock data;
  ScoreBlock score;
  PpoBlock ppo;
  EvalBlock eval;
  PathsBlock paths;

  nlohmann::json to_json() const;
  std::string hash() const { return hex64(fnv1a64(to_json().dump())); }

  void validate() const {
    if (environment.d < 1 || environment.categories < 1 || environment.pool_size < 2) {
      throw std::invalid_argument("config: bad environment sizes");
    }
    if (!environment.category_table.empty() &&
        static_cast<int>(environment.category_table.size()) != environment.categories) {
      throw std::invalid_argument(
          "config: environment.category_table must list one row per category");
    }
    if (score.epochs < 1) throw std::invalid_argument("config: score.epochs must be >= 1");
    if (eval.bins < 1) throw std::invalid_argument("config: eval.bins must be >= 1");
    if (eval.snapshot_interval < 1) {
      throw std::invalid_argument("config: eval.snapshot_interval must be >= 1");
    }
    score_signal_from_string(ppo.score_mode);
    advantage_config().validate();
  }

  AdvantageConfig advantage_config() const {
    AdvantageConfig cfg;
    cfg.margin = score.margin;
    cfg.n_harmonize = score.n;
    cfg.k_alternates = data.alternate_policies;
    cfg.weight_min = score.weight_min;
    cfg.weight_max = score.weight_max;
    return cfg;
  }

  ScoreTrainSettings score_train_settings(ScoreMode mode) const {
    ScoreTrainSettings s;
    s.mode = mode;
    s.advantage = advantage_config();
    s.learning_rate = score.lr;
    s.batch_size = score.batch;
    s.epochs = score.epochs;
    s.aux_expected_regression = score.aux_expected;
    s.aux_weight = score.aux_weight;
    return s;
  }

  PpoSettings ppo_settings() const {
    PpoSettings s;
    s.kl_coeff = ppo.beta;
    s.clip_ratio = ppo.clip_ratio;
    s.steps = ppo.steps;
    s.batch_prompts = ppo.batch_prompts;
    s.learning_rate = ppo.lr;
    s.score_mode = score_signal_from_string(ppo.score_mode);
    s.rehearsal = ppo.rehearsal;
    s.rehearsal_coeff = ppo.gamma;
    s.ma_decay = ppo.ma_decay;
    return s;
  }

  EnvParams make_env_params() const {
    std::vector<CategorySpec> schedule;
    for (const CategoryTableRow& row : environment.category_table) {
      schedule.push_back({row.quality_offset, row.candidate_noise, row.label_bias});
    }
    return make_env(environment.seed, environment.d, environment.categories,
                    environment.pool_size, environment.exploit_prob,
                    environment.prompt_spread, data.alternate_policies, schedule);
  }

  DatasetCounts dataset_counts() const {
    DatasetCounts c;
    c.rm_train_pairs = data.rm_train_pairs;
    c.rm_test_pairs = data.rm_test_pairs;
    c.ppo_train_prompts = data.ppo_train_prompts;
    c.ppo_test_prompts = data.ppo_test_prompts;
    c.forget_pairs = data.forget_pairs;
    return c;
  }
};

// ---------------------------------------------------------------------------
// strict (de)serialization
// ---------------------------------------------------------------------------

namespace detail {

using FieldSetter = std::function<void(const nlohmann::json&)>;
using FieldTable = std::map<std::string, FieldSetter>;

template <typename T>
FieldSetter set_field(T& target, const std::string& full_key) {
  return [&target, full_key](const nlohmann::json& value) {
    try {
      target = value.get<T>();
    } catch (const std::exception&) {
      throw std::invalid_argument("config: type mismatch for key '" + full_key + "'");
    }
  };
}

inline void apply_block(const nlohmann::json& block, const std::string& block_name,
                        const FieldTable& table) {
  if (!block.is_object()) {
    throw std::invalid_argument("config: block '" + block_name + "' must be an object");
  }
  for (const auto& [key, value] : block.items()) {
    const auto it = table.find(key);
    if (it == table.end()) {
      throw std::invalid_argument("config: unknown key '" + block_name + "." + key + "'");
    }
    it->second(value);
  }
}

inline FieldTable environment_table(EnvironmentBlock& b) {
  FieldTable t;
  t["d"] = set_field(b.d, "environment.d");
  t["categories"] = set_field(b.categories, "environment.categories");
  t["pool_size"] = set_field(b.pool_size, "environment.pool_size");
  t["exploit_prob"] = set_field(b.exploit_prob, "environment.exploit_prob");
  t["prompt_spread"] = set_field(b.prompt_spread, "environment.prompt_spread");
  t["seed"] = set_field(b.seed, "environment.seed");
  t["category_table"] = [&b](const nlohmann::json& value) {
    if (!value.is_array()) {
      throw std::invalid_argument("config: type mismatch for key 'environment.category_table'");
    }
    b.category_table.clear();
    for (const auto& row : value) {
      CategoryTableRow r;
      FieldTable rt;
      rt["quality_offset"] = set_field(r.quality_offset, "category_table.quality_offset");
      rt["candidate_noise"] = set_field(r.candidate_noise, "category_table.candidate_noise");
      rt["label_bias"] = set_field(r.label_bias, "category_table.label_bias");
      apply_block(row, "environment.category_table[]", rt);
      b.category_table.push_back(r);
    }
  };
  return t;
}

inline FieldTable data_table(DataBlock& b) {
  FieldTable t;
  t["rm_train_pairs"] = set_field(b.rm_train_pairs, "data.rm_train_pairs");
  t["rm_test_pairs"] = set_field(b.rm_test_pairs, "data.rm_test_pairs");
  t["ppo_train_prompts"] = set_field(b.ppo_train_prompts, "data.ppo_train_prompts");
  t["ppo_test_prompts"] = set_field(b.ppo_test_prompts, "data.ppo_test_prompts");
  t["forget_pairs"] = set_field(b.forget_pairs, "data.forget_pairs");
  t["alternate_policies"] = set_field(b.alternate_policies, "data.alternate_policies");
  return t;
}

inline FieldTable score_table(ScoreBlock& b) {
  FieldTable t;
  t["margin"] = set_field(b.margin, "score.margin");
  t["n"] = set_field(b.n, "score.n");
  t["weight_min"] = set_field(b.weight_min, "score.weight_min");
  t["weight_max"] = set_field(b.weight_max, "score.weight_max");
  t["lr"] = set_field(b.lr, "score.lr");
  t["batch"] = set_field(b.batch, "score.batch");
  t["epochs"] = set_field(b.epochs, "score.epochs");
  t["aux_expected"] = set_field(b.aux_expected, "score.aux_expected");
  t["aux_weight"] = set_field(b.aux_weight, "score.aux_weight");
  return t;
}

inline FieldTable ppo_table(PpoBlock& b) {
  FieldTable t;
  t["score_mode"] = set_field(b.score_mode, "ppo.score_mode");
  t["beta"] = set_field(b.beta, "ppo.beta");
  t["clip_ratio"] = set_field(b.clip_ratio, "ppo.clip_ratio");
  t["steps"] = set_field(b.steps, "ppo.steps");
  t["batch_prompts"] = set_field(b.batch_prompts, "ppo.batch_prompts");
  t["lr"] = set_field(b.lr, "ppo.lr");
  t["rehearsal"] = set_field(b.rehearsal, "ppo.rehearsal");
  t["gamma"] = set_field(b.gamma, "ppo.gamma");
  t["clusters"] = set_field(b.clusters, "ppo.clusters");
  t["top_k"] = set_field(b.top_k, "ppo.top_k");
  t["ma_decay"] = set_field(b.ma_decay, "ppo.ma_decay");
  t["sft_lr"] = set_field(b.sft_lr, "ppo.sft_lr");
  t["sft_passes"] = set_field(b.sft_passes, "ppo.sft_passes");
  t["sft_batch"] = set_field(b.sft_batch, "ppo.sft_batch");
  t["external_records"] = set_field(b.external_records, "ppo.external_records");
  return t;
}

inline FieldTable eval_table(EvalBlock& b) {
  FieldTable t;
  t["bins"] = set_field(b.bins, "eval.bins");
  t["tie_epsilon"] = set_field(b.tie_epsilon, "eval.tie_epsilon");
  t["snapshot_interval"] = set_field(b.snapshot_interval, "eval.snapshot_interval");
  return t;
}

inline FieldTable paths_table(PathsBlock& b) {
  FieldTable t;
  t["out_dir"] = set_field(b.out_dir, "paths.out_dir");
  return t;
}

inline void apply_document(RunConfig& cfg, const nlohmann::json& doc) {
  if (!doc.is_object()) {
    throw std::invalid_argument("config: top-level document must be an object");
  }
  for (const auto& [block, value] : doc.items()) {
    if (block == "environment") {
      apply_block(value, block, environment_table(cfg.environment));
    } else if (block == "data") {
      apply_block(value, block, data_table(cfg.data));
    } else if (block == "score") {
      apply_block(value, block, score_table(cfg.score));
    } else if (block == "ppo") {
      apply_block(value, block, ppo_table(cfg.ppo));
    } else if (block == "eval") {
      apply_block(value, block, eval_table(cfg.eval));
    } else if (block == "paths") {
      apply_block(value, block, paths_table(cfg.paths));
    } else {
      throw std::invalid_argument("config: unknown key '" + block + "'");
    }
  }
}

}  // namespace detail

inline nlohmann::json RunConfig::to_json() const {
  nlohmann::json cats = nlohmann::json::array();
  for (const CategoryTableRow& r : environment.category_table) {
    cats.push_back({{"quality_offset", r.quality_offset},
                    {"candidate_noise", r.candidate_noise},
                    {"label_bias", r.label_bias}});
  }
  return nlohmann::json{
      {"environment",
       {{"d", environment.d},
        {"categories", environment.categories},
        {"pool_size", environment.pool_size},
        {"exploit_prob", environment.exploit_prob},
        {"prompt_spread", environment.prompt_spread},
        {"seed", environment.seed},
        {"category_table", cats}}},
      {"data",
       {{"rm_train_pairs", data.rm_train_pairs},
        {"rm_test_pairs", data.rm_test_pairs},
        {"ppo_train_prompts", data.ppo_train_prompts},
        {"ppo_test_prompts", data.ppo_test_prompts},
        {"forget_pairs", data.forget_pairs},
        {"alternate_policies", data.alternate_policies}}},
      {"score",
       {{"margin", score.margin},
        {"n", score.n},
        {"weight_min", score.weight_min},
        {"weight_max", score.weight_max},
        {"lr", score.lr},
        {"batch", score.batch},
        {"epochs", score.epochs},
        {"aux_expected", score.aux_expected},
        {"aux_weight", score.aux_weight}}},
      {"ppo",
       {{"score_mode", ppo.score_mode},
        {"beta", ppo.beta},
        {"clip_ratio", ppo.clip_ratio},
        {"steps", ppo.steps},
        {"batch_prompts", ppo.batch_prompts},
        {"lr", ppo.lr},
        {"rehearsal", ppo.rehearsal},
        {"gamma", ppo.gamma},
        {"clusters", ppo.clusters},
        {"top_k", ppo.top_k},
        {"ma_decay", ppo.ma_decay},
        {"sft_lr", ppo.sft_lr},
        {"sft_passes", ppo.sft_passes},
        {"sft_batch", ppo.sft_batch},
        {"external_records", ppo.external_records}}},
      {"eval",
       {{"bins", eval.bins},
        {"tie_epsilon", eval.tie_epsilon},
        {"snapshot_interval", eval.snapshot_interval}}},
      {"paths", {{"out_dir", paths.out_dir}}}};
}

// "key.path=value" with the value parsed as JSON where possible, so numbers
// and booleans coerce through the same typed setters as file input
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw std::invalid_argument("override must look like key.path=value: " + assignment);
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  const std::size_t dot = path.find('.');
  if (dot == std::string::npos) {
    throw std::invalid_argument("override key must be block.field: " + path);
  }
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const std::exception&) {
    value = raw;  // bare strings pass through
  }
  nlohmann::json doc{
      {path.substr(0, dot), nlohmann::json{{path.substr(dot + 1), value}}}};
  detail::apply_document(cfg, doc);
}

// Defaults filled, file applied (empty file means all defaults), overrides
// applied last, then validated.
inline RunConfig load_config(const std::filesystem::path& path,
                             const std::vector<std::string>& overrides = {}) {
  RunConfig cfg;
  const std::string text = read_text_file(path);
  const bool blank = text.find_first_not_of(" \t\r\n") == std::string::npos;
  if (!blank) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
      throw std::invalid_argument("config: " + path.string() + ": " + e.what());
    }
    detail::apply_document(cfg, doc);
  }
  for (const std::string& ov : overrides) apply_override(cfg, ov);
  cfg.validate();
  return cfg;
}

inline RunConfig default_config() { return RunConfig{}; }

}  // namespace rlhflab
