#include "uacount/uncertainty.hpp"

#include <algorithm>

#include "uacount/errors.hpp"

namespace uacount {

double gaussian_rampup(double t, double t_ramp) {
  if (!(t_ramp > 0.0)) throw ConfigError("ramp length must be positive");
  const double x = 1.0 - std::clamp(t, 0.0, t_ramp) / t_ramp;
  return std::exp(-5.0 * x * x);
}

double ThresholdSchedule::threshold(double t) const {
  const double floor = std::exp(-5.0);
  const double ramp = (gaussian_rampup(t, t_ramp) - floor) / (1.0 - floor);
  return i_max * (0.75 + 0.25 * ramp);
}

McEnsemble mc_ensemble(const Network& net, const ParamSet& params, std::span<const Grid> images, int passes,
                       const PerturbationConfig& perturb, Rng& rng) {
  if (passes < 1) throw ConfigError("number of stochastic passes T must be at least 1");
  McEnsemble ens;
  for (int t = 0; t < passes; ++t) {
    const BatchOutput out = net.forward(params, images, perturb, rng);
    if (t == 0) {
      ens.mean_score.resize(out.n);
      ens.mean_density.resize(out.n);
    }
    for (int i = 0; i < out.n; ++i) {
      ModelOutput s = out.sample(i);
      if (t == 0) {
        ens.mean_score[i] = std::move(s.score);
        ens.mean_density[i] = std::move(s.density);
      } else {
        ens.mean_score[i][0] += s.score[0];
        ens.mean_score[i][1] += s.score[1];
        ens.mean_density[i] += s.density;
      }
    }
  }
  const double inv = 1.0 / passes;
  for (std::size_t i = 0; i < ens.mean_score.size(); ++i) {
    ens.mean_score[i][0] *= inv;
    ens.mean_score[i][1] *= inv;
    ens.mean_density[i] *= inv;
  }
  return ens;
}

ScoreMap mc_mean_score(const Network& net, const ParamSet& params, const Grid& image, int passes,
                       const PerturbationConfig& perturb, Rng& rng) {
  return std::move(mc_ensemble(net, params, std::span<const Grid>(&image, 1), passes, perturb, rng).mean_score[0]);
}

Grid shannon_entropy(const ScoreMap& p) {
  if (p[0].rows() != p[1].rows() || p[0].cols() != p[1].cols()) throw DataError("class score channels differ in shape");
  Grid out(p[0].rows(), p[0].cols());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    const double a = p[0].data()[i];
    const double b = p[1].data()[i];
    if (!(std::abs(a + b - 1.0) <= 1e-4) || a < 0.0 || b < 0.0) {
      throw DataError("class score is not a probability distribution at pixel " + std::to_string(i));
    }
    const double h = -(a * std::log(std::max(a, 1e-12)) + b * std::log(std::max(b, 1e-12)));
    out.data()[i] = std::clamp(h, 0.0, kMaxEntropy);
  }
  return out;
}

Grid hard_mask(const Grid& entropy, double threshold) {
  return (entropy.array() < threshold).cast<double>().matrix();
}

Grid soft_mask(const Grid& entropy, double weight) {
  if (!(weight > 0.0)) throw ConfigError("soft mask weight M must be positive");
  return (weight * (1.0 - entropy.array() / kMaxEntropy)).matrix();
}

UncertaintyBundle estimate_uncertainty(const ScoreMap& mean_score, double threshold, double weight) {
  UncertaintyBundle b;
  b.mean_score = mean_score;
  b.entropy = shannon_entropy(mean_score);
  b.normalized = b.entropy / kMaxEntropy;
  b.hard = hard_mask(b.entropy, threshold);
  b.soft = soft_mask(b.entropy, weight);
  return b;
}

}  // namespace uacount
