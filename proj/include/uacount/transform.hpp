#pragma once

#include "uacount/grid.hpp"

namespace uacount {

struct TransformConfig {
  double gain = 6000.0;  // K

  void validate() const;
};

// 2 * sigmoid(K x) - 1 for a single value; defined for any real x.
double approx_segmentation_value(double x, double gain);
// d/dx of the above: 2K s (1 - s), s = sigmoid(K x).
double approx_segmentation_slope(double x, double gain);

// Density -> approximate binary segmentation. Negative density is rejected
// since the density head never produces it.
Grid approx_segmentation(const Grid& density, const TransformConfig& cfg);
Grid transform_gradient(const Grid& density, const TransformConfig& cfg);

}  // namespace uacount
