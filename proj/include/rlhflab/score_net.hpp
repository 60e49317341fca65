#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "rlhflab/env.hpp"
#include "rlhflab/rng.hpp"

namespace rlhflab {

// ---------------------------------------------------------------------------
// Shared scorer with two strictly separated heads over one flat parameter
// vector: a reward head r(x, y) reading [prompt, response, exploit flag]
// and an expected-reward head e(x) reading the prompt features only. Both
// heads are two-hidden-layer tanh MLPs; gradients are hand-derived.
// ---------------------------------------------------------------------------

struct ScoreNetLayout {
  int d = 8;
  int hidden = 32;

  int reward_in() const { return 2 * d + 1; }
  int expected_in() const { return d; }

  static int head_param_count(int in, int hidden) {
    return in * hidden + hidden + hidden * hidden + hidden + hidden + 1;
  }
  int reward_param_count() const { return head_param_count(reward_in(), hidden); }
  int expected_param_count() const {
    return head_param_count(expected_in(), hidden);
  }
  int param_count() const { return reward_param_count() + expected_param_count(); }
  int expected_offset() const { return reward_param_count(); }

  bool operator==(const ScoreNetLayout&) const = default;
};

namespace detail {

// Scalar-output MLP over a parameter slice. Weight layout:
// W1[hidden][in], b1[hidden], W2[hidden][hidden], b2[hidden], w3[hidden], b3.
struct MlpHead {
  const double* p;
  int in;
  int hidden;

  struct Cache {
    std::vector<double> input;
    std::vector<double> h1;
    std::vector<double> h2;
  };

  double forward(const std::vector<double>& input, Cache* cache) const {
    const double* w1 = p;
    const double* b1 = w1 + static_cast<std::size_t>(hidden) * in;
    const double* w2 = b1 + hidden;
    const double* b2 = w2 + static_cast<std::size_t>(hidden) * hidden;
    const double* w3 = b2 + hidden;
    const double* b3 = w3 + hidden;

    std::vector<double> h1(hidden), h2(hidden);
    for (int j = 0; j < hidden; ++j) {
      double s = b1[j];
      const double* row = w1 + static_cast<std::size_t>(j) * in;
      for (int i = 0; i < in; ++i) s += row[i] * input[i];
      h1[j] = std::tanh(s);
    }
    for (int k = 0; k < hidden; ++k) {
      double s = b2[k];
      const double* row = w2 + static_cast<std::size_t>(k) * hidden;
      for (int j = 0; j < hidden; ++j) s += row[j] * h1[j];
      h2[k] = std::tanh(s);
    }
    double out = *b3;
    for (int k = 0; k < hidden; ++k) out += w3[k] * h2[k];

    if (cache) {
      cache->input = input;
      cache->h1 = std::move(h1);
      cache->h2 = std::move(h2);
    }
    return out;
  }

  // accumulates d(out)/d(params) * upstream into grad (same slice layout)
  void backward(const Cache& cache, double upstream, double* grad) const {
    const double* w2 = p + static_cast<std::size_t>(hidden) * in + hidden;
    const double* w3 = w2 + static_cast<std::size_t>(hidden) * hidden + hidden;

    double* g_w1 = grad;
    double* g_b1 = g_w1 + static_cast<std::size_t>(hidden) * in;
    double* g_w2 = g_b1 + hidden;
    double* g_b2 = g_w2 + static_cast<std::size_t>(hidden) * hidden;
    double* g_w3 = g_b2 + hidden;
    double* g_b3 = g_w3 + hidden;

    std::vector<double> dpre2(hidden);
    for (int k = 0; k < hidden; ++k) {
      const double dh2 = upstream * w3[k];
      dpre2[k] = dh2 * (1.0 - cache.h2[k] * cache.h2[k]);
      g_w3[k] += upstream * cache.h2[k];
      g_b2[k] += dpre2[k];
      double* row = g_w2 + static_cast<std::size_t>(k) * hidden;
      for (int j = 0; j < hidden; ++j) row[j] += dpre2[k] * cache.h1[j];
    }
    *g_b3 += upstream;

    for (int j = 0; j < hidden; ++j) {
      double dh1 = 0.0;
      for (int k = 0; k < hidden; ++k) {
        dh1 += dpre2[k] * w2[static_cast<std::size_t>(k) * hidden + j];
      }
      const double dpre1 = dh1 * (1.0 - cache.h1[j] * cache.h1[j]);
      g_b1[j] += dpre1;
      double* row = g_w1 + static_cast<std::size_t>(j) * in;
      for (int i = 0; i < in; ++i) row[i] += dpre1 * cache.input[i];
    }
  }
};

}  // namespace detail

struct ScoreNet {
  ScoreNetLayout layout;
  std::vector<double> params;

  // weights ~ Normal(0, 1/fan_in), biases 0
  static ScoreNet init(const ScoreNetLayout& layout, RandomStream rng) {
    ScoreNet net;
    net.layout = layout;
    net.params.assign(layout.param_count(), 0.0);
    auto init_head = [&](int offset, int in) {
      const int h = layout.hidden;
      double* p = net.params.data() + offset;
      const double s1 = 1.0 / std::sqrt(static_cast<double>(in));
      const double s2 = 1.0 / std::sqrt(static_cast<double>(h));
      for (int i = 0; i < in * h; ++i) p[i] = s1 * rng.normal();
      p += static_cast<std::size_t>(in) * h + h;  // skip b1
      for (int i = 0; i < h * h; ++i) p[i] = s2 * rng.normal();
      p += static_cast<std::size_t>(h) * h + h;  // skip b2
      for (int i = 0; i < h; ++i) p[i] = s2 * rng.normal();
    };
    init_head(0, layout.reward_in());
    init_head(layout.expected_offset(), layout.expected_in());
    return net;
  }

  static ScoreNet zeros(const ScoreNetLayout& layout) {
    ScoreNet net;
    net.layout = layout;
    net.params.assign(layout.param_count(), 0.0);
    return net;
  }

  detail::MlpHead reward_head() const {
    return {params.data(), layout.reward_in(), layout.hidden};
  }
  detail::MlpHead expected_head() const {
    return {params.data() + layout.expected_offset(), layout.expected_in(),
            layout.hidden};
  }
};

inline std::vector<double> reward_input(const ScoreNetLayout& layout,
                                        const Prompt& x, const Response& y) {
  if (x.features.size() != static_cast<std::size_t>(layout.d) ||
      y.content.size() != static_cast<std::size_t>(layout.d)) {
    throw std::invalid_argument("score: dimension mismatch");
  }
  std::vector<double> in;
  in.reserve(layout.reward_in());
  in.insert(in.end(), x.features.begin(), x.features.end());
  in.insert(in.end(), y.content.begin(), y.content.end());
  in.push_back(static_cast<double>(y.exploit_flag));
  return in;
}

struct ScorePair {
  double reward = 0.0;    // r(x, y)
  double expected = 0.0;  // e(x)
};

inline ScorePair score(const ScoreNet& net, const Prompt& x, const Response& y) {
  ScorePair s;
  s.reward = net.reward_head().forward(reward_input(net.layout, x, y), nullptr);
  if (x.features.size() != static_cast<std::size_t>(net.layout.d)) {
    throw std::invalid_argument("score: dimension mismatch");
  }
  s.expected = net.expected_head().forward(x.features, nullptr);
  return s;
}

}  // namespace rlhflab
