#include "uacount/transform.hpp"

#include <cmath>

#include "uacount/errors.hpp"

namespace uacount {

void TransformConfig::validate() const {
  if (!(gain > 0.0) || !std::isfinite(gain)) throw ConfigError("transformation gain K must be positive");
}

double approx_segmentation_value(double x, double gain) {
  // 2 / (1 + e^-z) - 1 = (1 - e^-z) / (1 + e^-z); evaluated on |z| so e^-|z| never overflows.
  const double z = gain * x;
  const double e = std::exp(-std::abs(z));
  const double v = -std::expm1(-std::abs(z)) / (1.0 + e);
  return z < 0 ? -v : v;
}

double approx_segmentation_slope(double x, double gain) {
  const double e = std::exp(-std::abs(gain * x));
  return 2.0 * gain * e / ((1.0 + e) * (1.0 + e));
}

namespace {

void check_non_negative(const Grid& density) {
  for (Eigen::Index i = 0; i < density.size(); ++i) {
    if (!(density.data()[i] >= 0.0)) throw DataError("transformation layer received a negative density value");
  }
}

}  // namespace

Grid approx_segmentation(const Grid& density, const TransformConfig& cfg) {
  cfg.validate();
  check_non_negative(density);
  return density.unaryExpr([g = cfg.gain](double x) { return approx_segmentation_value(x, g); });
}

Grid transform_gradient(const Grid& density, const TransformConfig& cfg) {
  cfg.validate();
  check_non_negative(density);
  return density.unaryExpr([g = cfg.gain](double x) { return approx_segmentation_slope(x, g); });
}

}  // namespace uacount
