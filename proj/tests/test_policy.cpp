#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "rlhflab/adam.hpp"
#include "rlhflab/env.hpp"
#include "rlhflab/numeric.hpp"
#include "rlhflab/policy.hpp"

using namespace rlhflab;

namespace {

// hand-built episode: d=2, candidates with distinct, separable features
Episode toy_episode(std::int64_t id, std::vector<std::vector<double>> contents,
                    std::vector<double> utilities, std::vector<int> flags = {}) {
  Episode ep;
  ep.prompt.id = id;
  ep.prompt.category_id = 0;
  ep.prompt.features = {1.0, -0.5};
  for (std::size_t i = 0; i < contents.size(); ++i) {
    Response y;
    y.id = id * 10 + static_cast<std::int64_t>(i);
    y.content = std::move(contents[i]);
    y.exploit_flag = flags.empty() ? 0 : flags[i];
    ep.candidates.push_back(std::move(y));
  }
  ep.true_utilities = std::move(utilities);
  return ep;
}

std::vector<Episode> env_episodes(int n, std::uint64_t seed = 51) {
  const EnvParams env = make_env(seed, 4, 3, 5, 0.2, 0.5, 2);
  std::vector<Episode> eps;
  for (int i = 0; i < n; ++i) {
    RandomStream rng = RandomStream(seed).split(900 + i);
    eps.push_back(sample_episode(env, env.categories[i % 3], i, rng));
  }
  return eps;
}

}  // namespace

TEST_CASE("action_probs is a simplex point", "[policy]") {
  SECTION("zero weights give the uniform distribution") {
    const Episode ep = toy_episode(0, {{1, 0}, {0, 1}, {1, 1}}, {0.0, 0.0, 0.0});
    const SoftmaxPolicy p = SoftmaxPolicy::zeros(2);
    for (double v : action_probs(p, ep)) {
      REQUIRE(v == Catch::Approx(1.0 / 3.0).margin(1e-12));
    }
  }
  SECTION("a dominant logit saturates") {
    SoftmaxPolicy p = SoftmaxPolicy::zeros(2);
    p.weights[2] = 1000.0;  // weight on the first response coordinate
    const Episode ep = toy_episode(0, {{1, 0}, {0, 0}}, {0.0, 0.0});
    const std::vector<double> probs = action_probs(p, ep);
    REQUIRE(probs[0] == Catch::Approx(1.0).margin(1e-9));
  }
  SECTION("random policies stay on the simplex") {
    RandomStream rng(3);
    const std::vector<Episode> eps = env_episodes(10);
    for (const Episode& ep : eps) {
      SoftmaxPolicy p = SoftmaxPolicy::zeros(4);
      for (double& w : p.weights) w = rng.normal();
      const std::vector<double> probs = action_probs(p, ep);
      double total = 0.0;
      for (double v : probs) {
        REQUIRE(v > 0.0);
        REQUIRE(v < 1.0);
        total += v;
      }
      REQUIRE(total == Catch::Approx(1.0).margin(1e-9));
    }
  }
}

TEST_CASE("kl_to_init values and positivity", "[policy]") {
  SECTION("identical policies have zero divergence") {
    const Episode ep = toy_episode(0, {{1, 0}, {0, 1}}, {0, 0});
    SoftmaxPolicy p = SoftmaxPolicy::zeros(2);
    p.weights[0] = 0.7;
    REQUIRE(kl_to_init(p, p, ep) == 0.0);
  }
  SECTION("uniform against (0.8, 0.2) is about 0.2231") {
    // arrange logits so q = (0.8, 0.2): logit gap log(4)
    const Episode ep = toy_episode(0, {{1, 0}, {0, 0}}, {0, 0});
    const SoftmaxPolicy uniform = SoftmaxPolicy::zeros(2);
    SoftmaxPolicy q = SoftmaxPolicy::zeros(2);
    q.weights[2] = std::log(4.0);
    REQUIRE(action_probs(q, ep)[0] == Catch::Approx(0.8).margin(1e-12));
    REQUIRE(kl_to_init(uniform, q, ep) ==
            Catch::Approx(0.22314355131420976).margin(1e-9));
  }
  SECTION("KL is non-negative over random policy pairs") {
    RandomStream rng(5);
    const std::vector<Episode> eps = env_episodes(8);
    for (const Episode& ep : eps) {
      SoftmaxPolicy a = SoftmaxPolicy::zeros(4), b = SoftmaxPolicy::zeros(4);
      for (double& w : a.weights) w = rng.normal();
      for (double& w : b.weights) w = rng.normal();
      REQUIRE(kl_to_init(a, b, ep) >= 0.0);
      REQUIRE(kl_to_init(a, a, ep) <= 1e-12);
    }
  }
}

TEST_CASE("teacher NLL gradient matches finite differences", "[policy][gradcheck]") {
  const std::vector<Episode> eps = env_episodes(6);
  std::vector<TeacherPair> pairs;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    pairs.push_back({eps[i], static_cast<int>(i) % 5});
  }
  RandomStream rng(7);
  for (int point = 0; point < 20; ++point) {
    SoftmaxPolicy p = SoftmaxPolicy::zeros(4);
    for (double& w : p.weights) w = rng.normal() * 0.5;
    const LossGrad nll = teacher_nll_and_grad(p, pairs);
    const std::vector<double> fd = finite_diff_grad(
        [&](const std::vector<double>& w) {
          SoftmaxPolicy probe = p;
          probe.weights = w;
          return teacher_nll_and_grad(probe, pairs).loss;
        },
        p.weights, 1e-5);
    REQUIRE(max_rel_err(nll.grad, fd) <= 1e-4);
  }
}

TEST_CASE("sft converges on a separable fixture", "[policy]") {
  // experts are separable by the first response coordinate
  std::vector<TeacherPair> pairs;
  pairs.push_back({toy_episode(0, {{2, 0}, {-1, 0}, {0, 0}}, {1, 0, 0}), 0});
  pairs.push_back({toy_episode(1, {{-1, 1}, {2, 1}, {0, 1}}, {0, 1, 0}), 1});
  pairs.push_back({toy_episode(2, {{-2, -1}, {0, -1}, {2, -1}}, {0, 0, 1}), 2});

  SoftmaxPolicy policy = SoftmaxPolicy::zeros(2);
  RandomStream rng(11);
  for (int pass = 0; pass < 600; ++pass) {
    sft_update(policy, pairs, 0.5, 2, rng);
  }
  for (const TeacherPair& pair : pairs) {
    REQUIRE(action_probs(policy, pair.episode)[pair.response_index] > 0.9);
  }

  SECTION("zero learning rate leaves the policy untouched") {
    SoftmaxPolicy before = policy;
    sft_update(policy, pairs, 0.0, 2, rng);
    REQUIRE(policy.weights == before.weights);
  }
  SECTION("invalid expert index is an error") {
    std::vector<TeacherPair> bad{{pairs[0].episode, 99}};
    REQUIRE_THROWS_AS(sft_update(policy, bad, 0.1, 2, rng), std::invalid_argument);
  }
}

TEST_CASE("ppo surrogate gradient matches finite differences away from kinks",
          "[policy][gradcheck]") {
  const std::vector<Episode> eps = env_episodes(8, 77);
  RandomStream rng(13);
  for (int point = 0; point < 20; ++point) {
    // old policy at W0; evaluate the surrogate at a nearby W
    SoftmaxPolicy old_policy = SoftmaxPolicy::zeros(4);
    for (double& w : old_policy.weights) w = rng.normal() * 0.3;
    std::vector<PpoSample> samples;
    for (const Episode& ep : eps) {
      const std::vector<double> lp = log_action_probs(old_policy, ep);
      const int action = static_cast<int>(rng.below(ep.candidates.size()));
      samples.push_back({&ep, action, lp[action], rng.normal()});
    }
    SoftmaxPolicy probe = old_policy;
    for (double& w : probe.weights) w += rng.normal() * 0.03;

    const LossGrad surr = ppo_clip_surrogate(probe, samples, 0.2);
    const std::vector<double> fd = finite_diff_grad(
        [&](const std::vector<double>& w) {
          SoftmaxPolicy g = probe;
          g.weights = w;
          return ppo_clip_surrogate(g, samples, 0.2).loss;
        },
        probe.weights, 1e-6);
    REQUIRE(max_rel_err(surr.grad, fd) <= 1e-4);
  }
}

namespace {

ResponseScorer oracle_scorer() {
  return [](const Episode& ep, int i) { return ep.true_utilities[i]; };
}

double expected_utility(const SoftmaxPolicy& p, const std::vector<Episode>& eps) {
  double total = 0.0;
  for (const Episode& ep : eps) {
    const std::vector<double> probs = action_probs(p, ep);
    for (std::size_t i = 0; i < probs.size(); ++i) {
      total += probs[i] * ep.true_utilities[i];
    }
  }
  return total / static_cast<double>(eps.size());
}

}  // namespace

TEST_CASE("ppo_step moves mass toward the better candidate under the oracle",
          "[policy]") {
  const Episode ep =
      toy_episode(0, {{1.0, 0.4}, {-0.8, -0.2}}, {2.0, -2.0});
  PpoSettings settings;
  settings.kl_coeff = 0.0;
  settings.learning_rate = 0.05;
  settings.batch_prompts = 16;
  PpoTrainer trainer(SoftmaxPolicy::zeros(2), settings, oracle_scorer(),
                     RandomStream(17));
  const double before = expected_utility(trainer.policy(), {ep});
  std::vector<const Episode*> batch(16, &ep);
  trainer.step(batch);
  const double after = expected_utility(trainer.policy(), {ep});
  REQUIRE(after > before);
  REQUIRE(action_probs(trainer.policy(), ep)[0] > 0.5);
}

TEST_CASE("zero clip ratio makes the update a no-op", "[policy]") {
  const std::vector<Episode> eps = env_episodes(12, 91);
  PpoSettings settings;
  settings.clip_ratio = 0.0;
  settings.learning_rate = 0.05;
  settings.batch_prompts = 12;
  PpoTrainer trainer(SoftmaxPolicy::zeros(4), settings, oracle_scorer(),
                     RandomStream(19));
  std::vector<const Episode*> batch;
  for (const Episode& ep : eps) batch.push_back(&ep);
  const std::vector<double> before = trainer.policy().weights;
  trainer.step(batch);
  REQUIRE(trainer.policy().weights == before);
}

TEST_CASE("identical seeds give identical trajectories", "[policy][determinism]") {
  const std::vector<Episode> eps = env_episodes(20, 101);
  std::vector<const Episode*> batch;
  for (const Episode& ep : eps) batch.push_back(&ep);
  PpoSettings settings;
  settings.batch_prompts = 20;

  const auto run = [&]() {
    PpoTrainer trainer(SoftmaxPolicy::zeros(4), settings, oracle_scorer(),
                       RandomStream(23));
    for (int s = 0; s < 10; ++s) trainer.step(batch);
    return trainer.policy().weights;
  };
  REQUIRE(run() == run());
}

TEST_CASE("200 oracle-scored steps strictly improve a 10-episode fixture",
          "[policy][property]") {
  const std::vector<Episode> eps = env_episodes(10, 111);
  std::vector<const Episode*> batch;
  for (const Episode& ep : eps) batch.push_back(&ep);
  PpoSettings settings;
  settings.kl_coeff = 0.0;
  settings.learning_rate = 5e-3;
  settings.batch_prompts = 10;
  PpoTrainer trainer(SoftmaxPolicy::zeros(4), settings, oracle_scorer(),
                     RandomStream(29));
  const double before = expected_utility(trainer.policy(), eps);
  for (int s = 0; s < 200; ++s) trainer.step(batch);
  REQUIRE(expected_utility(trainer.policy(), eps) > before);
}

TEST_CASE("rejection sampling thresholds", "[policy]") {
  const std::vector<Episode> eps = env_episodes(10, 121);
  std::vector<const Episode*> batch;
  for (const Episode& ep : eps) batch.push_back(&ep);
  const double inf = std::numeric_limits<double>::infinity();

  SECTION("tau = -inf keeps everything") {
    SoftmaxPolicy policy = SoftmaxPolicy::zeros(4);
    RandomStream rng(31);
    REQUIRE(rejection_sampling_iteration(policy, batch, oracle_scorer(), -inf, 0.1,
                                         rng) == 10);
  }
  SECTION("tau = +inf keeps nothing and leaves the policy unchanged") {
    SoftmaxPolicy policy = SoftmaxPolicy::zeros(4);
    const std::vector<double> before = policy.weights;
    RandomStream rng(31);
    REQUIRE(rejection_sampling_iteration(policy, batch, oracle_scorer(), inf, 0.1,
                                         rng) == 0);
    REQUIRE(policy.weights == before);
  }
  SECTION("kept count matches an independent enumeration of the sampled scores") {
    SoftmaxPolicy policy = SoftmaxPolicy::zeros(4);
    // enumerate the draws the op will make, with an identical stream copy
    RandomStream probe(33);
    std::vector<double> scores;
    for (const Episode* ep : batch) {
      std::vector<double> probs = action_probs(policy, *ep);
      const int action = static_cast<int>(probe.weighted_index(probs));
      scores.push_back(ep->true_utilities[action]);
    }
    std::vector<double> sorted = scores;
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    const double tau = sorted[2];  // exactly three scores are >= tau
    long expected = 0;
    for (double s : scores) {
      if (s >= tau) expected += 1;
    }
    REQUIRE(expected == 3);

    RandomStream rng(33);
    REQUIRE(rejection_sampling_iteration(policy, batch, oracle_scorer(), tau, 0.1,
                                         rng) == 3);
  }
}

TEST_CASE("rehearsal machinery: gamma = 0 identity, isolation, composition",
          "[policy][rehearsal]") {
  const std::vector<Episode> eps = env_episodes(24, 131);
  std::vector<const Episode*> batch;
  for (const Episode& ep : eps) batch.push_back(&ep);
  std::vector<TeacherPair> rehearsal;
  for (int i = 0; i < 8; ++i) {
    rehearsal.push_back({eps[i], argmax_index(eps[i].true_utilities)});
  }

  PpoSettings base;
  base.batch_prompts = 24;
  base.learning_rate = 2e-3;

  SECTION("gamma = 0 reproduces plain PPO bit for bit") {
    PpoSettings sr = base;
    sr.rehearsal = true;
    sr.rehearsal_coeff = 0.0;
    PpoTrainer plain(SoftmaxPolicy::zeros(4), base, oracle_scorer(), RandomStream(37));
    PpoTrainer with_sr(SoftmaxPolicy::zeros(4), sr, oracle_scorer(), RandomStream(37));
    for (int s = 0; s < 8; ++s) {
      plain.step(batch);
      with_sr.step_with_rehearsal(batch, rehearsal);
      REQUIRE(plain.policy().weights == with_sr.policy().weights);
    }
  }

  SECTION("rehearsal on with an empty set is an error") {
    PpoSettings sr = base;
    sr.rehearsal = true;
    PpoTrainer trainer(SoftmaxPolicy::zeros(4), sr, oracle_scorer(), RandomStream(37));
    REQUIRE_THROWS_AS(trainer.step_with_rehearsal(batch, {}), std::invalid_argument);
  }

  SECTION("with a flat scorer and beta 0 the update is a pure rehearsal step") {
    PpoSettings sr = base;
    sr.rehearsal = true;
    sr.rehearsal_coeff = 0.01;
    sr.kl_coeff = 0.0;
    const ResponseScorer flat = [](const Episode&, int) { return 1.0; };
    PpoTrainer trainer(SoftmaxPolicy::zeros(4), sr, oracle_scorer(), RandomStream(41));
    // replicate: flat scorer means every advantage is 0, so the surrogate
    // gradient vanishes and only gamma * NLL ascent remains
    PpoTrainer flat_trainer(SoftmaxPolicy::zeros(4), sr, flat, RandomStream(41));
    flat_trainer.step_with_rehearsal(batch, rehearsal);

    std::vector<const TeacherPair*> mini;
    for (int i = 0; i < sr.batch_prompts / 4; ++i) {
      mini.push_back(&rehearsal[i % rehearsal.size()]);
    }
    const SoftmaxPolicy zeros = SoftmaxPolicy::zeros(4);
    const LossGrad nll = teacher_nll_and_grad(zeros, mini);
    std::vector<double> expected_grad(nll.grad.size());
    for (std::size_t j = 0; j < nll.grad.size(); ++j) {
      expected_grad[j] = -(sr.rehearsal_coeff * -nll.grad[j]);
    }
    std::vector<double> weights = zeros.weights;
    AdamState adam = AdamState::make(weights.size());
    adam_step(weights, expected_grad, adam, sr.learning_rate);
    REQUIRE(flat_trainer.policy().weights == weights);
  }

  SECTION("the combined update equals surrogate plus gamma times the NLL part") {
    PpoSettings sr = base;
    sr.rehearsal = true;
    sr.rehearsal_coeff = 0.01;
    PpoTrainer trainer(SoftmaxPolicy::zeros(4), sr, oracle_scorer(), RandomStream(43));
    trainer.step_with_rehearsal(batch, rehearsal);

    // replicate the whole step by hand with an identical stream
    RandomStream replica(43);
    const SoftmaxPolicy zeros = SoftmaxPolicy::zeros(4);
    std::vector<PpoSample> samples;
    std::vector<double> shaped;
    for (const Episode* ep : batch) {
      const std::vector<double> lp = log_action_probs(zeros, *ep);
      std::vector<double> probs(lp.size());
      for (std::size_t j = 0; j < lp.size(); ++j) probs[j] = std::exp(lp[j]);
      const int action = static_cast<int>(replica.weighted_index(probs));
      const double raw = ep->true_utilities[action];
      shaped.push_back(raw - sr.kl_coeff * (lp[action] - lp[action]));
      samples.push_back({ep, action, lp[action], 0.0});
    }
    const double baseline = mean(shaped);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      samples[i].advantage = shaped[i] - baseline;
    }
    const LossGrad surr = ppo_clip_surrogate(zeros, samples, sr.clip_ratio);
    std::vector<const TeacherPair*> mini;
    for (int i = 0; i < sr.batch_prompts / 4; ++i) {
      mini.push_back(&rehearsal[i % rehearsal.size()]);
    }
    const LossGrad nll = teacher_nll_and_grad(zeros, mini);

    std::vector<double> combined(surr.grad.size());
    for (std::size_t j = 0; j < combined.size(); ++j) {
      combined[j] = -(surr.grad[j] + sr.rehearsal_coeff * -nll.grad[j]);
    }
    std::vector<double> weights = zeros.weights;
    AdamState adam = AdamState::make(weights.size());
    adam_step(weights, combined, adam, sr.learning_rate);
    for (std::size_t j = 0; j < weights.size(); ++j) {
      REQUIRE(trainer.policy().weights[j] ==
              Catch::Approx(weights[j]).margin(1e-10));
    }
  }
}

TEST_CASE("policy checkpoints round-trip", "[policy]") {
  SoftmaxPolicy p = SoftmaxPolicy::zeros(4);
  RandomStream rng(47);
  for (double& w : p.weights) w = rng.normal();
  namespace fs = std::filesystem;
  const fs::path tmp = fs::temp_directory_path() / "rlhflab_policy_test.json";
  save_policy(p, 47, 12, "sft", tmp);
  const SoftmaxPolicy loaded = load_policy(tmp);
  REQUIRE(loaded.weights == p.weights);
  REQUIRE(loaded.d == p.d);
  REQUIRE(loaded.temperature == p.temperature);
  fs::remove(tmp);
}
