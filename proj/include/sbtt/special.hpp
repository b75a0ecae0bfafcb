#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <numbers>

namespace sbtt {

// Log-gamma by the Lanczos approximation (g = 7, 9 terms) with reflection
// below 0.5.
inline double lanczos_lgamma(double x) {
  static constexpr std::array<double, 9> c = {
      0.99999999999980993,     676.5203681218851,   -1259.1392167224028,
      771.32342877765313,      -176.61502916214059, 12.507343278686905,
      -0.13857109526572012,    9.9843695780195716e-6, 1.5056327351493116e-7};
  constexpr double pi = std::numbers::pi;
  if (x < 0.5) {
    const double s = std::sin(pi * x);
    if (s == 0.0) return std::numeric_limits<double>::infinity();
    return std::log(pi / std::fabs(s)) - lanczos_lgamma(1.0 - x);
  }
  x -= 1.0;
  double a = c[0];
  const double t = x + 7.5;
  for (int i = 1; i < 9; ++i) a += c[static_cast<std::size_t>(i)] / (x + i);
  return 0.5 * std::log(2.0 * pi) + (x + 0.5) * std::log(t) - t + std::log(a);
}

// Digamma via upward recurrence to x >= 10 and the asymptotic series.
inline double digamma(double x) {
  double acc = 0.0;
  if (x <= 0.0 && x == std::floor(x)) return std::numeric_limits<double>::quiet_NaN();
  if (x < 0.0) {
    // reflection: psi(1 - x) - psi(x) = pi cot(pi x)
    return digamma(1.0 - x) - std::numbers::pi / std::tan(std::numbers::pi * x);
  }
  while (x < 10.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double f = 1.0 / (x * x);
  const double series =
      f * (-1.0 / 12 + f * (1.0 / 120 + f * (-1.0 / 252 + f * (1.0 / 240 + f * (-1.0 / 132 + f * (691.0 / 32760))))));
  return acc + std::log(x) - 0.5 / x + series;
}

inline double sigmoid(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace sbtt
