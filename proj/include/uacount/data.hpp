#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "uacount/grid.hpp"

namespace uacount {

struct Point {
  int row = 0;
  int col = 0;
  bool operator==(const Point&) const = default;
};

// An image (intensities in [0,1]) with its head-centre annotations.
struct Scene {
  std::string id;
  Grid image;
  std::vector<Point> points;

  int height() const { return static_cast<int>(image.rows()); }
  int width() const { return static_cast<int>(image.cols()); }
  bool contains(const Point& p) const {
    return p.row >= 0 && p.row < height() && p.col >= 0 && p.col < width();
  }
};

// Throws DataError when the scene is empty or a point falls outside the image.
void validate_scene(const Scene& scene);

struct DensityMap {
  Grid values;
};

struct BinaryMask {
  Grid values;
};

struct CountRange {
  int min = 0;
  int max = 0;
};

Scene generate_synthetic_scene(std::uint64_t seed, int height, int width, CountRange count_range,
                               double clutter_level);

// Kernel support radius for a given bandwidth (4 sigma).
inline double kernel_radius(double sigma) { return 4.0 * sigma; }

// One isotropic Gaussian per point, truncated at 4 sigma and renormalized to
// unit mass inside the image, so the map sums to the annotated count.
DensityMap density_from_points(const Scene& scene, double sigma);

BinaryMask mask_from_density(const DensityMap& density);

// Full-resolution training sample with precomputed targets.
struct LabeledSample {
  Grid image;
  DensityMap density;
  BinaryMask mask;
};

LabeledSample make_labeled_sample(const Scene& scene, double sigma);

struct LabeledPatch {
  Grid image;
  Grid density;
  Grid mask;
};

struct Batch {
  std::vector<LabeledPatch> labeled;
  std::vector<Grid> unlabeled;
  int patch_size = 0;
};

struct BatchSpec {
  int labeled = 8;
  int unlabeled = 8;
  int patch = 128;
  double flip_p = 0.3;
};

// Samples sources with replacement, crops each at one random offset shared by
// image/density/mask and flips horizontally with probability flip_p. Density
// patches are not renormalized.
Batch make_batch(const std::vector<LabeledSample>& labeled_pool, const std::vector<Grid>& unlabeled_pool,
                 Rng& rng, const BatchSpec& spec);

// Column-reversed copy.
Grid flip_horizontal(const Grid& g);

// Annotation files: one "row col" integer pair per line.
std::vector<Point> read_annotations(const std::filesystem::path& path);
void write_annotations(const std::filesystem::path& path, const std::vector<Point>& points);

// Flat float32 grid: int32 header (H, W, count) followed by H*W little-endian floats.
void write_grid_f32(const std::filesystem::path& path, const Grid& grid, int count);
Grid read_grid_f32(const std::filesystem::path& path, int* count = nullptr);

// Dataset on disk: <root>/index.txt holds "<split> <scene id>" lines; each
// scene is <root>/scenes/<id>.pgm plus <root>/scenes/<id>.txt.
struct Dataset {
  std::vector<Scene> labeled;
  std::vector<Scene> unlabeled;
  std::vector<Scene> val;
  std::vector<Scene> test;
};

struct SplitCounts {
  int labeled = 0;
  int unlabeled = 0;
  int val = 0;
};

// Validation takes max(1, floor(n / 10)) scenes; the rest is split into
// floor(rest * labeled_fraction) labeled and the remainder unlabeled.
SplitCounts split_counts(int n, double labeled_fraction);

struct GenerateOptions {
  int count = 120;
  int test_count = 0;
  double labeled_fraction = 0.5;
  int height = 64;
  int width = 64;
  CountRange count_range{4, 24};
  double clutter_level = 0.8;
  std::uint64_t seed = 0;
};

Dataset generate_dataset(const GenerateOptions& options);
void save_dataset(const Dataset& dataset, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

}  // namespace uacount
