#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "uacount/grid.hpp"
#include "uacount/model.hpp"

namespace uacount {

// Maximum entropy of a two-class distribution, in nats.
inline constexpr double kMaxEntropy = std::numbers::ln2;

// exp(-5 (1 - t/t_ramp)^2), saturating at 1 for t >= t_ramp.
double gaussian_rampup(double t, double t_ramp);

// Hard-mask threshold ramped from 3/4 of the maximum entropy to the maximum.
struct ThresholdSchedule {
  double t_ramp = 1.0;
  double i_max = kMaxEntropy;

  // The Gaussian ramp is rescaled to start at exactly 0 so threshold(0) = 0.75 i_max.
  double threshold(double t) const;
};

struct UncertaintyBundle {
  ScoreMap mean_score;  // average of T softmax outputs
  Grid entropy;         // I, nats
  Grid normalized;      // I / ln 2
  Grid hard;            // 1(I < threshold)
  Grid soft;            // M (1 - I / ln 2)
};

// Mean of T stochastic passes for a batch of images: per-image class score and density.
struct McEnsemble {
  std::vector<ScoreMap> mean_score;
  std::vector<Grid> mean_density;
};

McEnsemble mc_ensemble(const Network& net, const ParamSet& params, std::span<const Grid> images, int passes,
                       const PerturbationConfig& perturb, Rng& rng);

ScoreMap mc_mean_score(const Network& net, const ParamSet& params, const Grid& image, int passes,
                       const PerturbationConfig& perturb, Rng& rng);

// -sum_c P_c ln P_c with 0 ln 0 = 0. Rejects pixels whose channel sum is off by more than 1e-4.
Grid shannon_entropy(const ScoreMap& mean_score);

Grid hard_mask(const Grid& entropy, double threshold);
Grid soft_mask(const Grid& entropy, double weight);

UncertaintyBundle estimate_uncertainty(const ScoreMap& mean_score, double threshold, double weight);

}  // namespace uacount
