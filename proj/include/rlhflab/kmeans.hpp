#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

#include "rlhflab/rng.hpp"

namespace rlhflab {

struct Clustering {
  std::vector<int> assignments;               // record index -> cluster id
  std::vector<std::vector<double>> centroids;
  double objective = 0.0;                     // sum of squared distances
  int iterations_used = 0;
  std::vector<double> objective_trace;        // objective after each Lloyd pass
};

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline int nearest_centroid(const std::vector<double>& point,
                            const std::vector<std::vector<double>>& centroids) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = sq_dist(point, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

inline std::vector<std::vector<double>> kmeanspp_seed(
    const std::vector<std::vector<double>>& points, int c, RandomStream& rng) {
  std::vector<std::vector<double>> centroids;
  centroids.reserve(c);
  centroids.push_back(points[rng.below(points.size())]);
  std::vector<double> min_d(points.size(), std::numeric_limits<double>::infinity());
  while (static_cast<int>(centroids.size()) < c) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      min_d[i] = std::min(min_d[i], sq_dist(points[i], centroids.back()));
      total += min_d[i];
    }
    if (total > 0.0) {
      centroids.push_back(points[rng.weighted_index(min_d)]);
    } else {
      centroids.push_back(points[rng.below(points.size())]);
    }
  }
  return centroids;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding, best objective over restarts.
// Deterministic for a given stream; ties in distance go to the lower cluster
// index and an emptied cluster keeps its previous centroid.
inline Clustering kmeans_cluster(const std::vector<std::vector<double>>& points,
                                 int c, RandomStream& rng, int max_iters = 100,
                                 int restarts = 10) {
  if (points.empty()) throw std::invalid_argument("kmeans: empty input");
  if (c < 1) throw std::invalid_argument("kmeans: need c >= 1");
  if (c > static_cast<int>(points.size())) {
    throw std::invalid_argument("kmeans: more clusters than points");
  }
  if (max_iters < 1 || restarts < 1) {
    throw std::invalid_argument("kmeans: need max_iters >= 1 and restarts >= 1");
  }
  for (const auto& p : points) {
    if (p.size() != points.front().size()) {
      throw std::invalid_argument("kmeans: ragged point dimensions");
    }
  }

  auto assign_all = [&](const std::vector<std::vector<double>>& centroids) {
    std::vector<int> a(points.size());
    for (std::size_t i = 0; i < points.size(); ++i) {
      a[i] = detail::nearest_centroid(points[i], centroids);
    }
    return a;
  };
  auto objective_of = [&](const std::vector<std::vector<double>>& centroids,
                          const std::vector<int>& assignments) {
    double obj = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      obj += detail::sq_dist(points[i], centroids[assignments[i]]);
    }
    return obj;
  };

  Clustering best;
  best.objective = std::numeric_limits<double>::infinity();

  for (int r = 0; r < restarts; ++r) {
    std::vector<std::vector<double>> centroids = detail::kmeanspp_seed(points, c, rng);
    std::vector<int> assignments = assign_all(centroids);
    Clustering cur;
    for (int iter = 0; iter < max_iters; ++iter) {
      // recenter
      std::vector<std::vector<double>> sums(
          c, std::vector<double>(points.front().size(), 0.0));
      std::vector<long> counts(c, 0);
      for (std::size_t i = 0; i < points.size(); ++i) {
        counts[assignments[i]] += 1;
        for (std::size_t j = 0; j < points[i].size(); ++j) {
          sums[assignments[i]][j] += points[i][j];
        }
      }
      for (int cl = 0; cl < c; ++cl) {
        if (counts[cl] == 0) continue;  // emptied cluster keeps its centroid
        for (std::size_t j = 0; j < sums[cl].size(); ++j) {
          centroids[cl][j] = sums[cl][j] / static_cast<double>(counts[cl]);
        }
      }
      // reassign
      std::vector<int> next = assign_all(centroids);
      cur.iterations_used = iter + 1;
      cur.objective_trace.push_back(objective_of(centroids, next));
      const bool converged = next == assignments;
      assignments = std::move(next);
      if (converged) break;
    }
    cur.assignments = std::move(assignments);
    cur.centroids = std::move(centroids);
    cur.objective = cur.objective_trace.back();
    if (cur.objective < best.objective) best = std::move(cur);
  }
  return best;
}

}  // namespace rlhflab
