#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace regguide {

using Rng = std::mt19937_64;

// Mixes a base seed with stream indices so that independent streams (per
// trajectory, per grid cell) are reproducible regardless of evaluation order.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

inline Rng make_rng(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0) {
  return Rng(derive_seed(seed, a, b));
}

Eigen::MatrixXd standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng);

}  // namespace regguide
