#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <vector>

#include "rlhflab/env.hpp"
#include "rlhflab/metrics.hpp"
#include "rlhflab/numeric.hpp"

using namespace rlhflab;

namespace {

// minimal pair with injectable scores carried in the content payloads
ComparisonRecord pair_with_utilities(double u_chosen, double u_rejected,
                                     std::int64_t id = 0) {
  ComparisonRecord rec;
  rec.prompt = {id, 0, {0.0}};
  rec.chosen = {id * 2, {u_chosen}, 0};
  rec.rejected = {id * 2 + 1, {u_rejected}, 0};
  return rec;
}

const auto content_scorer = [](const ComparisonRecord& rec) {
  return std::pair<double, double>{rec.chosen.content[0], rec.rejected.content[0]};
};

}  // namespace

TEST_CASE("pairwise accuracy counts wins and splits ties", "[metrics]") {
  std::vector<ComparisonRecord> pairs;
  pairs.push_back(pair_with_utilities(1.0, 0.0, 0));  // correct
  pairs.push_back(pair_with_utilities(2.0, 1.0, 1));  // correct
  pairs.push_back(pair_with_utilities(0.5, 0.4, 2));  // correct
  pairs.push_back(pair_with_utilities(0.0, 1.0, 3));  // wrong
  REQUIRE(pairwise_accuracy(content_scorer, pairs) == Catch::Approx(0.75));

  SECTION("all-equal scores give exactly one half") {
    std::vector<ComparisonRecord> ties;
    for (int i = 0; i < 7; ++i) ties.push_back(pair_with_utilities(1.0, 1.0, i));
    REQUIRE(pairwise_accuracy(content_scorer, ties) == 0.5);
  }
  SECTION("empty input is an error") {
    REQUIRE_THROWS_AS(pairwise_accuracy(content_scorer, {}), std::invalid_argument);
  }
}

TEST_CASE("expected calibration error closed forms", "[metrics]") {
  SECTION("single bin at confidence 0.9 with accuracy 0.8 gives 10 points") {
    // |delta| = logit(0.9); 8 of 10 pairs oriented correctly
    const double delta = std::log(0.9 / 0.1);
    std::vector<ComparisonRecord> pairs;
    for (int i = 0; i < 10; ++i) {
      const bool correct = i < 8;
      pairs.push_back(correct ? pair_with_utilities(delta, 0.0, i)
                              : pair_with_utilities(0.0, delta, i));
    }
    const CalibrationReport report =
        expected_calibration_error(content_scorer, pairs, 1);
    REQUIRE(report.ece == Catch::Approx(10.0).margin(1e-9));
    REQUIRE(report.accuracy == Catch::Approx(0.8));
    REQUIRE(report.bins.size() == 1);
    REQUIRE(report.bins[0].count == 10);
  }
  SECTION("bin counts sum to the pair count") {
    RandomStream rng(3);
    std::vector<ComparisonRecord> pairs;
    for (int i = 0; i < 500; ++i) {
      pairs.push_back(pair_with_utilities(rng.normal(), rng.normal(), i));
    }
    const CalibrationReport report =
        expected_calibration_error(content_scorer, pairs, 10);
    long total = 0;
    for (const CalibrationBin& b : report.bins) total += b.count;
    REQUIRE(total == 500);
    REQUIRE(report.ece >= 0.0);
  }
}

TEST_CASE("a perfectly calibrated scorer drives ECE toward zero",
          "[metrics][oracle]") {
  // scores are the true utilities and labels are Bradley-Terry draws on the
  // same utilities: predicted preference probabilities are exact, so the
  // residual ECE is pure binomial noise
  RandomStream rng(7);
  std::vector<ComparisonRecord> pairs;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double u_a = rng.normal();
    const double u_b = rng.normal();
    const bool a_chosen = preference_label(u_a, u_b, 0, 0, 0.0, rng);
    pairs.push_back(a_chosen ? pair_with_utilities(u_a, u_b, i)
                             : pair_with_utilities(u_b, u_a, i));
  }
  const CalibrationReport report = expected_calibration_error(content_scorer, pairs, 10);
  REQUIRE(report.ece < 1.5);
}

TEST_CASE("calibration curve bins and ideal reference", "[metrics]") {
  RandomStream rng(11);
  std::vector<ComparisonRecord> pairs;
  for (int i = 0; i < 400; ++i) {
    pairs.push_back(pair_with_utilities(rng.normal() * 2.0, rng.normal() * 2.0, i));
  }
  const auto curve = calibration_curve(content_scorer, pairs, 8);
  REQUIRE_FALSE(curve.empty());
  long total = 0;
  for (const CalibrationCurvePoint& pt : curve) {
    REQUIRE(pt.count > 0);  // empty bins are omitted
    REQUIRE(pt.ideal == sigmoid(pt.delta_mean));
    total += pt.count;
  }
  REQUIRE(total == 400);

  SECTION("a zero-difference bin has ideal reference one half") {
    std::vector<ComparisonRecord> ties{pair_with_utilities(1.0, 1.0, 0)};
    const auto tie_curve = calibration_curve(content_scorer, ties, 3);
    REQUIRE(tie_curve.size() == 1);
    REQUIRE(tie_curve[0].ideal == 0.5);
  }
  SECTION("sigma(2.5) reference value") {
    std::vector<ComparisonRecord> wide{pair_with_utilities(2.5, 0.0, 0)};
    const auto wide_curve = calibration_curve(content_scorer, wide, 1);
    REQUIRE(wide_curve[0].ideal == Catch::Approx(0.9241418199787566).margin(1e-12));
  }
}

namespace {

Episode moments_episode(std::int64_t id, int category, std::vector<double> scores) {
  Episode ep;
  ep.prompt = {id, category, {0.0}};
  for (std::size_t i = 0; i < scores.size(); ++i) {
    ep.candidates.push_back({id * 10 + static_cast<std::int64_t>(i), {scores[i]}, 0});
    ep.true_utilities.push_back(0.0);
  }
  return ep;
}

const auto first_coord_scorer = [](const Episode& ep, int i) {
  return ep.candidates[i].content[0];
};

}  // namespace

TEST_CASE("category moments and disparity summaries", "[metrics]") {
  SECTION("constant scorer: all means equal, stds zero, disparity zero") {
    std::vector<Episode> eps{moments_episode(0, 0, {3.0, 3.0}),
                             moments_episode(1, 1, {3.0, 3.0})};
    const CategoryMomentsReport report = category_moments(first_coord_scorer, eps);
    REQUIRE(report.rows.size() == 2);
    for (const CategoryMomentsRow& row : report.rows) {
      REQUIRE(row.mean == 3.0);
      REQUIRE(row.stddev == 0.0);
    }
    REQUIRE(report.mean_spread == 0.0);
    REQUIRE(report.max_abs_mean_dev == 0.0);
    REQUIRE(report.std_ratio == 1.0);
  }
  SECTION("two categories {0,2} and {10,12}: means 1 and 11, equal stds") {
    std::vector<Episode> eps{moments_episode(0, 0, {0.0, 2.0}),
                             moments_episode(1, 1, {10.0, 12.0})};
    const CategoryMomentsReport report = category_moments(first_coord_scorer, eps);
    REQUIRE(report.rows[0].mean == Catch::Approx(1.0));
    REQUIRE(report.rows[1].mean == Catch::Approx(11.0));
    REQUIRE(report.rows[0].stddev == Catch::Approx(report.rows[1].stddev));
    REQUIRE(report.mean_spread == Catch::Approx(10.0));
    REQUIRE(report.std_ratio == Catch::Approx(1.0));
  }
  SECTION("a category with fewer than two scores is an error") {
    std::vector<Episode> eps{moments_episode(0, 0, {1.0})};
    REQUIRE_THROWS_WITH(category_moments(first_coord_scorer, eps),
                        Catch::Matchers::ContainsSubstring("category 0"));
  }
  SECTION("per-category shifts cancel when the expected head absorbs them") {
    // a = r - e is unchanged when both r and e gain the same per-category
    // constant, so the disparity summary is too
    std::vector<Episode> eps{moments_episode(0, 0, {0.1, 0.7, -0.3}),
                             moments_episode(1, 1, {1.5, 0.9, 2.2}),
                             moments_episode(2, 0, {0.0, 0.4, -0.1})};
    const std::map<int, double> shift{{0, 5.0}, {1, -3.0}};
    const auto advantage_base = [&](const Episode& ep, int i) {
      return ep.candidates[i].content[0];  // e == 0
    };
    const auto advantage_shifted = [&](const Episode& ep, int i) {
      const double s = shift.at(ep.prompt.category_id);
      return (ep.candidates[i].content[0] + s) - s;  // e absorbs the shift
    };
    const CategoryMomentsReport a = category_moments(advantage_base, eps);
    const CategoryMomentsReport b = category_moments(advantage_shifted, eps);
    REQUIRE(a.mean_spread == Catch::Approx(b.mean_spread));
    REQUIRE(a.std_ratio == Catch::Approx(b.std_ratio));
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
      REQUIRE(a.rows[i].mean == Catch::Approx(b.rows[i].mean));
      REQUIRE(a.rows[i].stddev == Catch::Approx(b.rows[i].stddev));
    }
  }
}

TEST_CASE("win/lose/tie reports", "[metrics]") {
  const EnvParams env = make_env(13, 4, 2, 5, 0.2, 0.5, 1);
  std::vector<Episode> eps;
  for (int i = 0; i < 40; ++i) {
    RandomStream rng = episode_stream(env, i);
    eps.push_back(sample_episode(env, env.categories[i % 2], i, rng));
  }

  SECTION("a policy against itself is all ties") {
    SoftmaxPolicy p = SoftmaxPolicy::zeros(4);
    RandomStream rng(17);
    for (double& w : p.weights) w = rng.normal();
    const WinLossReport report = win_rate_vs_reference(p, p, eps, 0.05);
    REQUIRE(report.win == 0.0);
    REQUIRE(report.lose == 0.0);
    REQUIRE(report.tie == 100.0);
    REQUIRE(report.n == 40);
  }
  SECTION("percentages always sum to 100") {
    RandomStream rng(19);
    for (int trial = 0; trial < 10; ++trial) {
      SoftmaxPolicy a = SoftmaxPolicy::zeros(4), b = SoftmaxPolicy::zeros(4);
      for (double& w : a.weights) w = rng.normal();
      for (double& w : b.weights) w = rng.normal();
      const WinLossReport report = win_rate_vs_reference(a, b, eps, 0.05);
      REQUIRE(report.win + report.lose + report.tie == Catch::Approx(100.0).margin(0.01));
    }
  }
  SECTION("zero tie band ties only exact equality; experts never lose") {
    std::vector<ForgetPair> forget;
    for (const Episode& ep : eps) {
      forget.push_back({ep, argmax_index(ep.true_utilities)});
    }
    RandomStream rng(23);
    SoftmaxPolicy p = SoftmaxPolicy::zeros(4);
    for (double& w : p.weights) w = rng.normal();
    const WinLossReport report = win_rate_vs_expert(p, forget, 0.0);
    REQUIRE(report.win == 0.0);  // the expert is the argmax by construction
    REQUIRE(report.win + report.lose + report.tie == Catch::Approx(100.0).margin(0.01));
  }
}

TEST_CASE("curve files round-trip and training_report validates columns",
          "[metrics]") {
  namespace fs = std::filesystem;
  const fs::path tmp = fs::temp_directory_path() / "rlhflab_metrics_test";
  fs::create_directories(tmp);

  SECTION("parse(emit(x)) == x for curve data") {
    const std::vector<std::pair<int, double>> curve{
        {0, 0.0}, {5, 1.25}, {10, -3.0625}, {15, 42.0}};
    write_curve_csv(curve, tmp / "roundtrip.csv");
    REQUIRE(read_curve_csv(tmp / "roundtrip.csv") == curve);
  }

  SECTION("single-step logs produce single-row curves; delta starts at zero") {
    std::vector<PpoStepStats> stats(1);
    stats[0].step = 0;
    stats[0].mean_score = 1.5;
    EvalSnapshot snap;
    snap.step = 0;
    snap.values["win"] = 0.0;
    training_report(stats, {snap}, 1.5, tmp / "curves");
    const auto delta = read_curve_csv(tmp / "curves" / "delta_reward.csv");
    REQUIRE(delta.size() == 1);
    REQUIRE(delta[0].second == 0.0);
    const auto win = read_curve_csv(tmp / "curves" / "win.csv");
    REQUIRE(win.size() == 1);
  }

  SECTION("a missing snapshot column is reported by name") {
    std::vector<PpoStepStats> stats(1);
    EvalSnapshot a, b;
    a.step = 0;
    a.values["win"] = 1.0;
    b.step = 5;  // missing the win column
    REQUIRE_THROWS_WITH(training_report(stats, {a, b}, 0.0, tmp / "curves2"),
                        Catch::Matchers::ContainsSubstring("win"));
  }

  fs::remove_all(tmp);
}

TEST_CASE("csv float formatting uses six significant digits", "[metrics]") {
  REQUIRE(fmt_g6(0.12345678) == "0.123457");
  REQUIRE(fmt_g6(123456.78) == "123457");
  REQUIRE(fmt_g6(-1.0) == "-1");
  REQUIRE(fmt_g6(1e-7) == "1e-07");
}
