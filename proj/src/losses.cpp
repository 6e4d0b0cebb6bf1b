#include "uacount/losses.hpp"

#include <algorithm>
#include <cmath>

#include "uacount/errors.hpp"
#include "uacount/uncertainty.hpp"

namespace uacount {

void LossWeights::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (!(lambda_max >= 0.0)) throw ConfigError("lambda_max must be non-negative");
  if (!(ramp_steps > 0.0)) throw ConfigError("ramp length must be positive");
}

double ramp_lambda(double t, const LossWeights& weights) {
  if (!(weights.ramp_steps > 0.0)) throw ConfigError("ramp length must be positive");
  if (t < 0.0) throw ConfigError("training step must be non-negative");
  return weights.lambda_max * gaussian_rampup(t, weights.ramp_steps);
}

namespace {

template <typename A, typename B>
void require_same(const A& a, const B& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw DataError(std::string(what) + ": shape mismatch");
}

template <typename A, typename B>
void require_count(std::span<A> a, std::span<B> b, const char* what) {
  if (a.size() != b.size()) throw DataError(std::string(what) + ": batch size mismatch");
}

double pixel_count(std::span<const Grid> maps) {
  double n = 0.0;
  for (const auto& m : maps) n += static_cast<double>(m.size());
  return n;
}

}  // namespace

MapLoss supervised_density_loss(std::span<const Grid> pred, std::span<const Grid> target) {
  require_count(pred, target, "supervised density loss");
  MapLoss out;
  const double n = pixel_count(pred);
  if (n == 0.0) return out;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    require_same(pred[i], target[i], "supervised density loss");
    const Grid diff = pred[i] - target[i];
    out.value += diff.squaredNorm();
    out.grad.push_back((2.0 / n) * diff);
  }
  out.value /= n;
  return out;
}

ScoreLoss supervised_seg_loss(std::span<const ScoreMap> prob, std::span<const Grid> mask) {
  require_count(prob, mask, "supervised segmentation loss");
  ScoreLoss out;
  double n = 0.0;
  for (const auto& m : mask) n += static_cast<double>(m.size());
  if (n == 0.0) return out;
  for (std::size_t i = 0; i < prob.size(); ++i) {
    require_same(prob[i][0], mask[i], "supervised segmentation loss");
    require_same(prob[i][1], mask[i], "supervised segmentation loss");
    ScoreMap g{Grid::Zero(mask[i].rows(), mask[i].cols()), Grid::Zero(mask[i].rows(), mask[i].cols())};
    for (Eigen::Index k = 0; k < mask[i].size(); ++k) {
      const double m = mask[i].data()[k];
      if (m != 0.0 && m != 1.0) throw DataError("segmentation target must be binary");
      const int c = m > 0.5 ? 1 : 0;
      const double p = std::max(prob[i][c].data()[k], 1e-12);
      out.value -= std::log(p);
      g[c].data()[k] = -1.0 / (p * n);
    }
    out.grad.push_back(std::move(g));
  }
  out.value /= n;
  return out;
}

InherentLoss inherent_consistency_loss(std::span<const Grid> crowd_prob, std::span<const Grid> approx_seg) {
  require_count(crowd_prob, approx_seg, "inherent consistency loss");
  InherentLoss out;
  const double n = pixel_count(crowd_prob);
  if (n == 0.0) return out;
  for (std::size_t i = 0; i < crowd_prob.size(); ++i) {
    require_same(crowd_prob[i], approx_seg[i], "inherent consistency loss");
    const Grid diff = crowd_prob[i] - approx_seg[i];
    out.value += diff.squaredNorm();
    out.grad_crowd.push_back((2.0 / n) * diff);
    out.grad_approx.push_back((-2.0 / n) * diff);
  }
  out.value /= n;
  return out;
}

ScoreLoss consistency_seg_loss(std::span<const ScoreMap> student, std::span<const ScoreMap> teacher,
                               std::span<const Grid> weight, double floor) {
  require_count(student, teacher, "segmentation consistency loss");
  require_count(student, weight, "segmentation consistency loss");
  double mass = 0.0;
  for (const auto& w : weight) mass += w.sum();
  const double denom = std::max(mass, floor);
  ScoreLoss out;
  for (std::size_t i = 0; i < student.size(); ++i) {
    ScoreMap g;
    for (int c = 0; c < 2; ++c) {
      require_same(student[i][c], teacher[i][c], "segmentation consistency loss");
      require_same(student[i][c], weight[i], "segmentation consistency loss");
      const Grid diff = student[i][c] - teacher[i][c];
      out.value += (weight[i].array() * diff.array().square()).sum();
      g[c] = ((2.0 / denom) * weight[i].array() * diff.array()).matrix();
    }
    out.grad.push_back(std::move(g));
  }
  out.value /= denom;
  return out;
}

MapLoss consistency_density_loss(std::span<const Grid> student, std::span<const Grid> teacher,
                                 std::span<const Grid> weight, double floor) {
  require_count(student, teacher, "density consistency loss");
  require_count(student, weight, "density consistency loss");
  double mass = 0.0;
  for (const auto& w : weight) mass += w.sum();
  const double denom = std::max(mass, floor);
  MapLoss out;
  for (std::size_t i = 0; i < student.size(); ++i) {
    require_same(student[i], teacher[i], "density consistency loss");
    require_same(student[i], weight[i], "density consistency loss");
    const Grid diff = student[i] - teacher[i];
    out.value += (weight[i].array() * diff.array().square()).sum();
    out.grad.push_back(((2.0 / denom) * weight[i].array() * diff.array()).matrix());
  }
  out.value /= denom;
  return out;
}

LossReport total_loss(const LossParts& parts, double alpha, double lambda) {
  LossReport r;
  r.parts = parts;
  r.alpha = alpha;
  r.lambda = lambda;
  r.total = parts.sd + alpha * parts.sb + parts.inherent + lambda * (alpha * parts.cb + parts.cd);
  return r;
}

void to_json(nlohmann::json& j, const LossReport& r) {
  j = nlohmann::json{{"L_Sd", r.parts.sd},   {"L_Sb", r.parts.sb},   {"L_c", r.parts.inherent},
                     {"L_Cb", r.parts.cb},   {"L_Cd", r.parts.cd},   {"L_total", r.total},
                     {"lambda", r.lambda},   {"alpha", r.alpha},     {"kept_fraction", r.kept_fraction}};
}

}  // namespace uacount
