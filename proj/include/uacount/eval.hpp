#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "uacount/data.hpp"
#include "uacount/model.hpp"

namespace uacount {

struct ImageResult {
  std::string id;
  double predicted = 0.0;
  double truth = 0.0;
  double abs_error = 0.0;
};

struct EvalResult {
  std::vector<ImageResult> images;
  double mae = 0.0;
  double rmse = 0.0;
};

// Fills MAE / RMSE from the per-image rows.
EvalResult summarize(std::vector<ImageResult> images);

// Reflect-pads the bottom and right edges up to a multiple of stride.
Grid pad_to_stride(const Grid& image, int stride);

// Deterministic inference (dropout off, no input noise). Images whose sides
// exceed max_side are processed as non-overlapping tiles and stitched.
ModelOutput infer(const Network& net, const ParamSet& params, const Grid& image, int max_side = 1024);

EvalResult evaluate(const Network& net, const ParamSet& params, const std::vector<Scene>& scenes,
                    int max_side = 1024);

std::string format_table(const EvalResult& result);
void to_json(nlohmann::json& j, const EvalResult& r);

struct ExportOptions {
  int mc_passes = 8;
  double input_noise_std = 0.05;
  double threshold = 0.0;  // hard-mask threshold; <= 0 means the end-of-ramp value ln 2
  double soft_weight = 7.0;
  double transform_gain = 6000.0;
  double sigma = 4.0;
  std::uint64_t seed = 0;
};

// Writes colour-mapped renderings (.ppm) and raw float32 grids (.f32) of the
// density, segmentation, approximated segmentation, entropy and both masks.
std::vector<std::filesystem::path> export_maps(const Network& net, const ParamSet& student, const ParamSet& teacher,
                                               const Scene& scene, const std::filesystem::path& out_dir,
                                               const ExportOptions& options);

}  // namespace uacount
