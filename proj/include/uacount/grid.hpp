#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <random>

namespace uacount {

// Row-major 2-D map. Rows index image rows (y), columns index image columns (x).
using Grid = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Per-pixel class scores, channel 0 = background, channel 1 = crowd.
using ScoreMap = std::array<Grid, 2>;

using Rng = std::mt19937_64;

// Mixes a base seed with stream coordinates so independent workers/steps draw
// from decorrelated generators (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(base) ^ a) ^ b);
}

// Sum over non-overlapping stride x stride blocks (mass preserving).
inline Grid sum_pool(const Grid& g, int stride) {
  Grid out = Grid::Zero(g.rows() / stride, g.cols() / stride);
  for (Eigen::Index r = 0; r < out.rows() * stride; ++r)
    for (Eigen::Index c = 0; c < out.cols() * stride; ++c) out(r / stride, c / stride) += g(r, c);
  return out;
}

// Max over non-overlapping stride x stride blocks.
inline Grid max_pool(const Grid& g, int stride) {
  Grid out(g.rows() / stride, g.cols() / stride);
  for (Eigen::Index r = 0; r < out.rows(); ++r)
    for (Eigen::Index c = 0; c < out.cols(); ++c)
      out(r, c) = g.block(r * stride, c * stride, stride, stride).maxCoeff();
  return out;
}

}  // namespace uacount
