#pragma once

#include <cmath>
#include <span>

namespace margin_lab {

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
inline double sample_stddev(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

/// Standard error of the mean: sample stddev / sqrt(n).
inline double sem_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return sample_stddev(v) / std::sqrt(static_cast<double>(v.size()));
}

}  // namespace margin_lab
