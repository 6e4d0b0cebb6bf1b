#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "uacount/data.hpp"
#include "uacount/errors.hpp"

using namespace uacount;
namespace fs = std::filesystem;

namespace {

// Direct rasterization of one truncated, renormalized kernel over the whole image.
Grid kernel_oracle(int h, int w, Point p, double sigma) {
  Grid k = Grid::Zero(h, w);
  const double r2 = 16.0 * sigma * sigma;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double d2 = double(y - p.row) * (y - p.row) + double(x - p.col) * (x - p.col);
      if (d2 <= r2) k(y, x) = std::exp(-d2 / (2 * sigma * sigma));
    }
  return k / k.sum();
}

Scene blank_scene(int h, int w, std::vector<Point> pts) {
  return Scene{"t", Grid::Zero(h, w), std::move(pts)};
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("uacount_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("synthetic scene: empty scene has uniform background") {
  const Scene s = generate_synthetic_scene(0, 64, 64, {0, 0}, 0.0);
  CHECK(s.points.empty());
  CHECK(s.image.maxCoeff() == s.image.minCoeff());
}

TEST_CASE("synthetic scene: count forced by range, points in bounds") {
  const Scene s = generate_synthetic_scene(1, 128, 128, {5, 5}, 0.2);
  REQUIRE(s.points.size() == 5);
  for (const auto& p : s.points) CHECK(s.contains(p));
  CHECK(s.image.minCoeff() >= 0.0);
  CHECK(s.image.maxCoeff() <= 1.0);
}

TEST_CASE("synthetic scene: deterministic per seed") {
  const Scene a = generate_synthetic_scene(1, 96, 80, {2, 9}, 0.5);
  const Scene b = generate_synthetic_scene(1, 96, 80, {2, 9}, 0.5);
  CHECK(a.image == b.image);
  CHECK(a.points == b.points);
  const Scene c = generate_synthetic_scene(2, 96, 80, {2, 9}, 0.5);
  CHECK_FALSE(a.image == c.image);
}

TEST_CASE("synthetic scene: configuration errors") {
  CHECK_THROWS_AS(generate_synthetic_scene(0, 16, 64, {0, 1}, 0.0), ConfigError);
  CHECK_THROWS_AS(generate_synthetic_scene(0, 64, 64, {3, 2}, 0.0), ConfigError);
  CHECK_THROWS_AS(generate_synthetic_scene(0, 64, 64, {-1, 2}, 0.0), ConfigError);
  CHECK_THROWS_AS(generate_synthetic_scene(0, 64, 64, {0, 2}, 1.5), ConfigError);
}

TEST_CASE("density: zero points give a zero map") {
  const DensityMap dm = density_from_points(blank_scene(40, 40, {}), 4.0);
  CHECK(dm.values.sum() == 0.0);
}

TEST_CASE("density: a centred point has unit mass") {
  const DensityMap dm = density_from_points(blank_scene(64, 64, {{32, 32}}), 4.0);
  CHECK(std::abs(dm.values.sum() - 1.0) < 1e-6);
  CHECK(dm.values.minCoeff() >= 0.0);
}

TEST_CASE("density: separated points match per-point rasterization oracle") {
  const std::vector<Point> pts{{10, 10}, {10, 50}, {50, 30}};
  const DensityMap dm = density_from_points(blank_scene(64, 64, pts), 4.0);
  Grid oracle = Grid::Zero(64, 64);
  for (const auto& p : pts) oracle += kernel_oracle(64, 64, p, 4.0);
  CHECK((dm.values - oracle).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(std::abs(dm.values.sum() - 3.0) < 1e-6);
  for (const auto& p : pts) {
    Eigen::Index r, c;
    dm.values.block(p.row - 8, p.col - 8, 17, 17).maxCoeff(&r, &c);
    CHECK(r == 8);
    CHECK(c == 8);
  }
}

TEST_CASE("density: border points keep unit mass after truncation") {
  const DensityMap dm = density_from_points(blank_scene(48, 48, {{0, 0}, {47, 20}, {5, 47}}), 4.0);
  CHECK(std::abs(dm.values.sum() - 3.0) < 1e-6);
}

TEST_CASE("density: rejects out-of-bounds points and bad sigma") {
  CHECK_THROWS_AS(density_from_points(blank_scene(32, 32, {{32, 0}}), 4.0), DataError);
  CHECK_THROWS_AS(density_from_points(blank_scene(32, 32, {{-1, 3}}), 4.0), DataError);
  CHECK_THROWS_AS(density_from_points(blank_scene(32, 32, {{3, 3}}), 0.0), ConfigError);
}

TEST_CASE("density: sum equals count over random scenes") {
  for (int i = 0; i < 50; ++i) {
    const Scene s = generate_synthetic_scene(100 + i, 64 + 8 * (i % 3), 64, {0, 25}, 0.3);
    const DensityMap dm = density_from_points(s, 4.0);
    CHECK(std::abs(dm.values.sum() - static_cast<double>(s.points.size())) < 1e-6);
  }
}

TEST_CASE("mask: trivial cases") {
  CHECK(mask_from_density(DensityMap{Grid::Zero(5, 7)}).values.sum() == 0.0);
  Grid one = Grid::Zero(5, 7);
  one(2, 3) = 1e-9;
  const BinaryMask m = mask_from_density(DensityMap{one});
  CHECK(m.values.sum() == 1.0);
  CHECK(m.values(2, 3) == 1.0);
}

TEST_CASE("mask: support of a kernel is the 4-sigma disk") {
  const double sigma = 4.0;
  const BinaryMask m = mask_from_density(density_from_points(blank_scene(64, 64, {{30, 33}}), sigma));
  int mismatches = 0;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const int d2 = (y - 30) * (y - 30) + (x - 33) * (x - 33);
      const double expected = d2 <= 16 * 16 ? 1.0 : 0.0;
      mismatches += m.values(y, x) != expected;
    }
  CHECK(mismatches == 0);
}

TEST_CASE("mask: re-thresholding a mask is idempotent") {
  const Scene s = generate_synthetic_scene(5, 64, 64, {3, 8}, 0.1);
  const BinaryMask m = mask_from_density(density_from_points(s, 4.0));
  CHECK(mask_from_density(DensityMap{m.values}).values == m.values);
}

TEST_CASE("batch: crop without flip is a direct sub-grid") {
  const Scene s = generate_synthetic_scene(9, 64, 80, {4, 10}, 0.3);
  const std::vector<LabeledSample> pool{make_labeled_sample(s, 4.0)};
  Rng rng(3);
  const Batch b = make_batch(pool, {}, rng, {4, 0, 32, 0.0});
  REQUIRE(b.labeled.size() == 4);
  CHECK(b.unlabeled.empty());
  for (const auto& lp : b.labeled) {
    bool found = false;
    for (int r = 0; r + 32 <= 64 && !found; ++r)
      for (int c = 0; c + 32 <= 80 && !found; ++c)
        found = lp.image == s.image.block(r, c, 32, 32) &&
                lp.density == pool[0].density.values.block(r, c, 32, 32) &&
                lp.mask == pool[0].mask.values.block(r, c, 32, 32);
    CHECK(found);
  }
}

TEST_CASE("batch: flip reverses columns and preserves mass") {
  const Scene s = generate_synthetic_scene(11, 48, 48, {5, 10}, 0.3);
  const std::vector<LabeledSample> pool{make_labeled_sample(s, 4.0)};
  Rng rng(5);
  const Batch b = make_batch(pool, {s.image}, rng, {2, 2, 48, 1.0});
  for (const auto& lp : b.labeled) {
    CHECK(lp.density == flip_horizontal(pool[0].density.values));
    CHECK(lp.image == flip_horizontal(s.image));
    CHECK(std::abs(lp.density.sum() - pool[0].density.values.sum()) < 1e-12);
  }
  for (const auto& u : b.unlabeled) CHECK(u == flip_horizontal(s.image));
}

TEST_CASE("batch: fixed seed gives identical batches; configured sizes") {
  std::vector<LabeledSample> pool;
  std::vector<Grid> unl;
  for (int i = 0; i < 4; ++i) {
    const Scene s = generate_synthetic_scene(20 + i, 64, 64, {2, 6}, 0.2);
    pool.push_back(make_labeled_sample(s, 4.0));
    unl.push_back(s.image);
  }
  Rng r1(77), r2(77);
  const Batch a = make_batch(pool, unl, r1, {8, 8, 32, 0.3});
  const Batch b = make_batch(pool, unl, r2, {8, 8, 32, 0.3});
  REQUIRE(a.labeled.size() == 8);
  REQUIRE(a.unlabeled.size() == 8);
  for (int i = 0; i < 8; ++i) {
    CHECK(a.labeled[i].image == b.labeled[i].image);
    CHECK(a.labeled[i].density == b.labeled[i].density);
    CHECK(a.unlabeled[i] == b.unlabeled[i]);
    CHECK(a.labeled[i].image.rows() == 32);
    CHECK(a.unlabeled[i].cols() == 32);
  }
}

TEST_CASE("batch: images smaller than the crop are rejected") {
  const Scene s = generate_synthetic_scene(1, 32, 40, {1, 2}, 0.0);
  const std::vector<LabeledSample> pool{make_labeled_sample(s, 4.0)};
  Rng rng(1);
  CHECK_THROWS_AS(make_batch(pool, {}, rng, {1, 0, 36, 0.0}), DataError);
  CHECK_THROWS_AS(make_batch({}, {}, rng, {1, 0, 16, 0.0}), ConfigError);
}

TEST_CASE("batch: crop/flip commutes with mask derivation") {
  Rng rng(2024);
  for (int i = 0; i < 200; ++i) {
    const Scene s = generate_synthetic_scene(500 + i, 64, 64, {0, 12}, 0.2);
    const LabeledSample sample = make_labeled_sample(s, 2.0 + (i % 4));
    Rng batch_rng(rng());
    const Batch b = make_batch({sample}, {}, batch_rng, {1, 0, 16 + 8 * (i % 5), 0.5});
    const auto& lp = b.labeled[0];
    CHECK(mask_from_density(DensityMap{lp.density}).values == lp.mask);
  }
}

TEST_CASE("annotations: round trip and malformed input") {
  const fs::path dir = temp_dir("annotations");
  const std::vector<Point> pts{{0, 0}, {12, 7}, {63, 1}};
  write_annotations(dir / "a.txt", pts);
  CHECK(read_annotations(dir / "a.txt") == pts);
  {
    std::ofstream bad(dir / "bad.txt");
    bad << "1 2\n3 x\n";
  }
  CHECK_THROWS_AS(read_annotations(dir / "bad.txt"), DataError);
  CHECK_THROWS_AS(read_annotations(dir / "missing.txt"), DataError);
}

TEST_CASE("float32 grid export round trip keeps the header") {
  const fs::path dir = temp_dir("grid");
  const Scene s = generate_synthetic_scene(3, 40, 36, {4, 4}, 0.0);
  const DensityMap dm = density_from_points(s, 4.0);
  write_grid_f32(dir / "d.f32", dm.values, 4);
  int count = -1;
  const Grid g = read_grid_f32(dir / "d.f32", &count);
  CHECK(count == 4);
  CHECK(g.rows() == 40);
  CHECK(g.cols() == 36);
  CHECK((g - dm.values).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("split arithmetic") {
  const SplitCounts s = split_counts(60, 0.5);
  CHECK(s.labeled == 27);
  CHECK(s.unlabeled == 27);
  CHECK(s.val == 6);
  const SplitCounts t = split_counts(120, 0.5);
  CHECK(t.labeled == 54);
  CHECK(t.unlabeled == 54);
  CHECK(t.val == 12);
  CHECK(split_counts(5, 0.5).val == 1);
  CHECK_THROWS_AS(split_counts(0, 0.5), ConfigError);
}

TEST_CASE("dataset save/load round trip") {
  const fs::path dir = temp_dir("dataset");
  GenerateOptions o;
  o.count = 12;
  o.test_count = 2;
  o.seed = 4;
  const Dataset ds = generate_dataset(o);
  CHECK(ds.val.size() == 1);
  CHECK(ds.labeled.size() == 5);
  CHECK(ds.unlabeled.size() == 6);
  save_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  REQUIRE(back.labeled.size() == ds.labeled.size());
  REQUIRE(back.test.size() == 2);
  for (std::size_t i = 0; i < ds.labeled.size(); ++i) {
    CHECK(back.labeled[i].id == ds.labeled[i].id);
    CHECK(back.labeled[i].points == ds.labeled[i].points);
    CHECK((back.labeled[i].image - ds.labeled[i].image).cwiseAbs().maxCoeff() <= 0.5 / 65535 + 1e-12);
  }
  CHECK_THROWS_AS(load_dataset(dir / "nope"), DataError);
}
