#pragma once

#include <cmath>
#include <random>
#include <span>

namespace icenode::detail {

// Normal with stddev 1/sqrt(fan_in), resampled outside two deviations.
inline void truncated_normal(std::span<double> w, std::size_t fan_in, std::mt19937_64& rng) {
  const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& x : w) {
    double z;
    do z = n(rng);
    while (std::abs(z) > 2.0);
    x = sd * z;
  }
}

}  // namespace icenode::detail
