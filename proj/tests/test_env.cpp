#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "rlhflab/env.hpp"
#include "rlhflab/numeric.hpp"

using namespace rlhflab;

namespace {

EnvParams tiny_env(std::uint64_t seed = 1) {
  return make_env(seed, /*d=*/4, /*n_categories=*/3, /*pool_size=*/5,
                  /*exploit_prob=*/0.2, /*prompt_spread=*/0.5,
                  /*n_alternate_policies=*/2);
}

}  // namespace

TEST_CASE("oracle utility matches the hand-computed residual", "[env]") {
  EnvParams env = tiny_env();
  env.d = 2;
  env.hidden_map = {1.0, 0.0, 0.0, 1.0};  // identity
  env.categories.resize(1);
  env.categories[0].id = 0;
  env.categories[0].quality_offset = 0.0;
  env.categories[0].prompt_center = {0.0, 0.0};

  Prompt x{0, 0, {1.0, 0.0}};
  SECTION("zero residual gives exactly the quality offset") {
    Response y{0, {1.0, 0.0}, 0};
    REQUIRE(oracle_utility(x, y, env) == 0.0);
  }
  SECTION("residual (1,0) over d=2 gives -0.5") {
    Response y{0, {0.0, 0.0}, 0};
    REQUIRE(oracle_utility(x, y, env) == Catch::Approx(-0.5).margin(1e-12));
  }
  SECTION("exploit flag never changes utility") {
    Response y0{0, {0.3, -0.8}, 0};
    Response y1{1, {0.3, -0.8}, 1};
    REQUIRE(oracle_utility(x, y0, env) == oracle_utility(x, y1, env));
  }
  SECTION("dimension mismatch is an error") {
    Response bad{0, {1.0, 2.0, 3.0}, 0};
    REQUIRE_THROWS_AS(oracle_utility(x, bad, env), std::invalid_argument);
  }
}

TEST_CASE("sample_episode shapes, determinism and noise limit", "[env]") {
  const EnvParams env = tiny_env();
  SECTION("pool size and utility count") {
    RandomStream rng(9);
    const Episode ep = sample_episode(env, env.categories[1], 17, rng);
    REQUIRE(ep.candidates.size() == 5);
    REQUIRE(ep.true_utilities.size() == 5);
    REQUIRE(ep.prompt.category_id == 1);
    for (std::size_t i = 0; i < ep.candidates.size(); ++i) {
      REQUIRE(ep.true_utilities[i] ==
              Catch::Approx(oracle_utility(ep.prompt, ep.candidates[i], env)));
    }
  }
  SECTION("same stream replays the identical episode") {
    RandomStream r1(9), r2(9);
    const Episode a = sample_episode(env, env.categories[0], 3, r1);
    const Episode b = sample_episode(env, env.categories[0], 3, r2);
    REQUIRE(a.prompt.features == b.prompt.features);
    for (std::size_t i = 0; i < a.candidates.size(); ++i) {
      REQUIRE(a.candidates[i].content == b.candidates[i].content);
      REQUIRE(a.candidates[i].exploit_flag == b.candidates[i].exploit_flag);
    }
  }
  SECTION("vanishing candidate noise pushes every utility to b_c") {
    EnvParams env2 = tiny_env();
    env2.categories[0].candidate_noise = 1e-9;
    env2.categories[0].quality_offset = 1.25;
    RandomStream rng(4);
    const Episode ep = sample_episode(env2, env2.categories[0], 0, rng);
    for (double u : ep.true_utilities) {
      REQUIRE(u == Catch::Approx(1.25).margin(1e-12));
    }
  }
}

TEST_CASE("preference_label frequencies", "[env][property]") {
  SECTION("equal utilities, no bias: wins split evenly") {
    RandomStream rng(100);
    long wins = 0;
    const long n = 100000;
    for (long i = 0; i < n; ++i) {
      if (preference_label(1.0, 1.0, 0, 0, 0.0, rng)) wins += 1;
    }
    REQUIRE(static_cast<double>(wins) / n == Catch::Approx(0.5).margin(0.01));
  }
  SECTION("utility gap 2.5 wins at sigma(2.5)") {
    RandomStream rng(101);
    long wins = 0;
    const long n = 200000;
    for (long i = 0; i < n; ++i) {
      if (preference_label(2.5, 0.0, 0, 0, 0.0, rng)) wins += 1;
    }
    // sigma(2.5) = 0.9241418..., allow 3 binomial standard errors
    const double se = std::sqrt(0.924142 * (1 - 0.924142) / n);
    REQUIRE(static_cast<double>(wins) / n ==
            Catch::Approx(0.9241418199787566).margin(3 * se));
  }
  SECTION("saturated bias always elects the exploit candidate") {
    RandomStream rng(102);
    for (int i = 0; i < 1000; ++i) {
      REQUIRE(preference_label(-5.0, 5.0, 1, 0, 1.0, rng));
      REQUIRE_FALSE(preference_label(5.0, -5.0, 0, 1, 1.0, rng));
    }
  }
  SECTION("binned label frequency matches sigma(delta u) without bias") {
    // empirical chosen-rate per utility-gap bin vs the Bradley-Terry curve
    RandomStream rng(103);
    const int n_bins = 8;
    std::vector<long> wins(n_bins, 0), total(n_bins, 0);
    const long n = 40000;
    for (long i = 0; i < n; ++i) {
      const double du = (rng.uniform01() * 2.0 - 1.0) * 4.0;
      const int bin = std::min(n_bins - 1, static_cast<int>((du + 4.0) / 1.0));
      total[bin] += 1;
      if (preference_label(du, 0.0, 0, 0, 0.0, rng)) wins[bin] += 1;
    }
    for (int b = 0; b < n_bins; ++b) {
      REQUIRE(total[b] > 1000);
      const double mid = -4.0 + (b + 0.5);
      const double p = sigmoid(mid);
      // bin midpoint approximation adds a small systematic term on top of
      // the 3-standard-error band
      const double se = std::sqrt(p * (1 - p) / total[b]);
      const double frac = static_cast<double>(wins[b]) / total[b];
      REQUIRE(frac == Catch::Approx(p).margin(3 * se + 0.02));
    }
  }
}

TEST_CASE("build_datasets cardinality, disjoint ids, expert argmax", "[env]") {
  const EnvParams env = tiny_env(7);
  DatasetCounts counts;
  counts.rm_train_pairs = 1000;
  counts.rm_test_pairs = 200;
  counts.ppo_train_prompts = 500;
  counts.ppo_test_prompts = 100;
  counts.forget_pairs = 150;
  const Datasets data = build_datasets(env, counts);

  REQUIRE(data.rm_train.size() == 1000);
  REQUIRE(data.rm_test.size() == 200);
  REQUIRE(data.ppo_train.size() == 500);
  REQUIRE(data.ppo_test.size() == 100);
  REQUIRE(data.forget.size() == 150);

  SECTION("prompt ids are globally disjoint across splits") {
    std::set<std::int64_t> ids;
    long total = 0;
    const auto add = [&](std::int64_t id) {
      ids.insert(id);
      total += 1;
    };
    for (const auto& r : data.rm_train) add(r.prompt.id);
    for (const auto& r : data.rm_test) add(r.prompt.id);
    for (const auto& e : data.ppo_train) add(e.prompt.id);
    for (const auto& e : data.ppo_test) add(e.prompt.id);
    for (const auto& f : data.forget) add(f.episode.prompt.id);
    REQUIRE(static_cast<long>(ids.size()) == total);
  }

  SECTION("forget experts maximize oracle utility in their episode") {
    for (const ForgetPair& fp : data.forget) {
      const double expert_u = fp.episode.true_utilities[fp.expert_index];
      for (double u : fp.episode.true_utilities) REQUIRE(expert_u >= u);
    }
  }

  SECTION("comparison records are internally consistent") {
    for (const ComparisonRecord& r : data.rm_train) {
      REQUIRE(r.chosen.id != r.rejected.id);
      REQUIRE(r.chosen_logprob <= 0.0);
      REQUIRE(r.rejected_logprob <= 0.0);
      REQUIRE(std::isfinite(r.chosen_logprob));
      REQUIRE(r.source_policy_id >= 0);
      REQUIRE(r.source_policy_id < 3);
    }
  }

  SECTION("non-positive counts are rejected") {
    DatasetCounts bad = counts;
    bad.forget_pairs = 0;
    REQUIRE_THROWS_AS(build_datasets(env, bad), std::invalid_argument);
  }
}

TEST_CASE("stored logprobs replay from the regenerated episode", "[env]") {
  const EnvParams env = tiny_env(21);
  DatasetCounts counts;
  counts.rm_train_pairs = 300;
  counts.rm_test_pairs = 50;
  counts.ppo_train_prompts = 10;
  counts.ppo_test_prompts = 10;
  counts.forget_pairs = 10;
  const Datasets data = build_datasets(env, counts);

  for (const ComparisonRecord& rec : data.rm_train) {
    RandomStream rng = episode_stream(env, rec.prompt.id);
    const TaskCategory& cat = env.categories[rec.prompt.id % env.n_categories()];
    const Episode ep = sample_episode(env, cat, rec.prompt.id, rng);
    const std::vector<double> lp_src =
        source_policy_logprobs(ep, env.source_policy_temps[rec.source_policy_id]);
    const std::vector<double> lp_cur =
        source_policy_logprobs(ep, env.source_policy_temps[0]);

    const auto find_candidate = [&](const Response& r) {
      for (std::size_t i = 0; i < ep.candidates.size(); ++i) {
        if (ep.candidates[i].id == r.id) return i;
      }
      FAIL("candidate not found in regenerated episode");
      return std::size_t{0};
    };
    const std::size_t ci = find_candidate(rec.chosen);
    const std::size_t ri = find_candidate(rec.rejected);
    REQUIRE(rec.chosen_logprob == Catch::Approx(lp_src[ci]).margin(1e-12));
    REQUIRE(rec.rejected_logprob == Catch::Approx(lp_src[ri]).margin(1e-12));
    REQUIRE(rec.chosen_logprob_cur == Catch::Approx(lp_cur[ci]).margin(1e-12));
    REQUIRE(rec.rejected_logprob_cur == Catch::Approx(lp_cur[ri]).margin(1e-12));
    REQUIRE(ep.candidates[ci].content == rec.chosen.content);
  }
}

TEST_CASE("datasets and environment serialize byte-identically across runs",
          "[env][determinism]") {
  namespace fs = std::filesystem;
  const fs::path tmp = fs::temp_directory_path() / "rlhflab_env_test";
  fs::create_directories(tmp);

  DatasetCounts counts;
  counts.rm_train_pairs = 200;
  counts.rm_test_pairs = 40;
  counts.ppo_train_prompts = 30;
  counts.ppo_test_prompts = 20;
  counts.forget_pairs = 10;

  const auto emit = [&](const fs::path& dir) {
    const EnvParams env = tiny_env(33);
    const Datasets data = build_datasets(env, counts);
    fs::create_directories(dir);
    save_env(env, dir / "env.json");
    write_comparisons_jsonl(data.rm_train, dir / "cmp.jsonl");
    write_episodes_jsonl(data.ppo_train, dir / "eps.jsonl");
    write_forget_jsonl(data.forget, dir / "forget.jsonl");
  };
  emit(tmp / "a");
  emit(tmp / "b");
  for (const char* name : {"env.json", "cmp.jsonl", "eps.jsonl", "forget.jsonl"}) {
    REQUIRE(read_text_file(tmp / "a" / name) == read_text_file(tmp / "b" / name));
  }

  SECTION("environment JSON round-trips") {
    const EnvParams env = load_env(tmp / "a" / "env.json");
    const EnvParams orig = tiny_env(33);
    REQUIRE(env.hidden_map == orig.hidden_map);
    REQUIRE(env.categories.size() == orig.categories.size());
    REQUIRE(env.categories[2].prompt_center == orig.categories[2].prompt_center);
    REQUIRE(env.source_policy_temps == orig.source_policy_temps);
  }

  SECTION("comparison records round-trip through JSONL") {
    const EnvParams env = tiny_env(33);
    const Datasets data = build_datasets(env, counts);
    const std::vector<ComparisonRecord> loaded =
        read_comparisons_jsonl(tmp / "a" / "cmp.jsonl");
    REQUIRE(loaded.size() == data.rm_train.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) {
      REQUIRE(loaded[i].prompt.id == data.rm_train[i].prompt.id);
      REQUIRE(loaded[i].prompt.features == data.rm_train[i].prompt.features);
      REQUIRE(loaded[i].chosen.content == data.rm_train[i].chosen.content);
      REQUIRE(loaded[i].chosen_logprob == data.rm_train[i].chosen_logprob);
      REQUIRE(loaded[i].source_policy_id == data.rm_train[i].source_policy_id);
    }
  }

  fs::remove_all(tmp);
}

TEST_CASE("category schedule follows the declared ramps", "[env]") {
  const auto spec = default_category_schedule(6);
  REQUIRE(spec[0].quality_offset == Catch::Approx(-2.0));
  REQUIRE(spec[5].quality_offset == Catch::Approx(2.0));
  REQUIRE(spec[0].candidate_noise == Catch::Approx(0.2));
  REQUIRE(spec[5].candidate_noise == Catch::Approx(1.5));
  REQUIRE(spec[0].label_bias == 0.0);
  REQUIRE(spec[3].label_bias == 0.0);
  REQUIRE(spec[4].label_bias == Catch::Approx(0.3));
  REQUIRE(spec[5].label_bias == Catch::Approx(0.3));
}

TEST_CASE("environment validation rejects bad inputs", "[env]") {
  EnvParams env = tiny_env();
  SECTION("label bias above 0.5") {
    env.categories[0].label_bias = 0.7;
    REQUIRE_THROWS_AS(env.validate(), std::invalid_argument);
  }
  SECTION("non-positive noise") {
    env.categories[1].candidate_noise = 0.0;
    REQUIRE_THROWS_AS(env.validate(), std::invalid_argument);
  }
  SECTION("pool too small") {
    env.pool_size = 1;
    REQUIRE_THROWS_AS(env.validate(), std::invalid_argument);
  }
}
