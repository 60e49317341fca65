#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rlhflab {

// log(1 / (1 + exp(-z))), overflow-free for |z| up to ~1e6; result <= 0
inline double log_sigmoid(double z) {
  if (!std::isfinite(z)) {
    throw std::invalid_argument("log_sigmoid: non-finite input");
  }
  return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

inline double sigmoid(double z) {
  if (z >= 0.0) {
    return 1.0 / (1.0 + std::exp(-z));
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Central differences (f(x + h e_i) - f(x - h e_i)) / (2h) per coordinate.
// Verification oracle for every hand-derived gradient in this library.
inline std::vector<double> finite_diff_grad(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double h = 1e-5) {
  if (!(h > 0.0)) {
    throw std::invalid_argument("finite_diff_grad: h must be positive");
  }
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw std::runtime_error(
          "finite_diff_grad: non-finite evaluation at coordinate " +
          std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// l-inf relative error between a gradient and its reference, with
// denominator max(1, |ref_i|)
inline double max_rel_err(const std::vector<double>& got,
                          const std::vector<double>& ref) {
  if (got.size() != ref.size()) {
    throw std::invalid_argument("max_rel_err: length mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double denom = std::max(1.0, std::abs(ref[i]));
    worst = std::max(worst, std::abs(got[i] - ref[i]) / denom);
  }
  return worst;
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean: empty input");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// sample standard deviation (n - 1 denominator)
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) throw std::invalid_argument("sample_std: need >= 2 values");
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace rlhflab
