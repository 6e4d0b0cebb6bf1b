#pragma once

#include <span>
#include <vector>

#include "json.hpp"
#include "uacount/grid.hpp"

namespace uacount {

struct LossWeights {
  double alpha = 0.1;
  double lambda_max = 1.0;
  double ramp_steps = 1.0;  // t_ramp

  void validate() const;
};

// lambda_max * exp(-5 (1 - min(t, t_ramp) / t_ramp)^2)
double ramp_lambda(double t, const LossWeights& weights);

// A loss value with its gradient w.r.t. each per-sample prediction map.
struct MapLoss {
  double value = 0.0;
  std::vector<Grid> grad;
};

struct ScoreLoss {
  double value = 0.0;
  std::vector<ScoreMap> grad;
};

struct InherentLoss {
  double value = 0.0;
  std::vector<Grid> grad_crowd;   // d/d M_B
  std::vector<Grid> grad_approx;  // d/d M_AB
};

// Mean squared error over every pixel of the labeled sub-batch.
MapLoss supervised_density_loss(std::span<const Grid> pred, std::span<const Grid> target);

// Mean of -ln P[true class] over every pixel of the labeled sub-batch.
ScoreLoss supervised_seg_loss(std::span<const ScoreMap> prob, std::span<const Grid> mask);

// Mean squared error between M_B and M_AB over the whole batch.
InherentLoss inherent_consistency_loss(std::span<const Grid> crowd_prob, std::span<const Grid> approx_seg);

// sum(w * ||P_s - P_t||^2) / max(sum(w), floor); teacher scores carry no gradient.
ScoreLoss consistency_seg_loss(std::span<const ScoreMap> student, std::span<const ScoreMap> teacher,
                               std::span<const Grid> weight, double floor = 1.0);

// sum(w * (D_s - D_t)^2) / max(sum(w), floor); teacher density carries no gradient.
MapLoss consistency_density_loss(std::span<const Grid> student, std::span<const Grid> teacher,
                                 std::span<const Grid> weight, double floor = 1e-8);

struct LossParts {
  double sd = 0.0;
  double sb = 0.0;
  double inherent = 0.0;
  double cb = 0.0;
  double cd = 0.0;
};

struct LossReport {
  LossParts parts;
  double total = 0.0;
  double lambda = 0.0;
  double alpha = 0.0;
  double kept_fraction = 0.0;
};

// L_Sd + alpha L_Sb + L_c' + lambda (alpha L_Cb + L_Cd)
LossReport total_loss(const LossParts& parts, double alpha, double lambda);

void to_json(nlohmann::json& j, const LossReport& r);

}  // namespace uacount
