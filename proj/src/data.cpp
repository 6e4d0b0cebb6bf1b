#include "uacount/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "uacount/errors.hpp"
#include "uacount/image_io.hpp"

namespace uacount {

namespace fs = std::filesystem;

void validate_scene(const Scene& scene) {
  if (scene.height() < 1 || scene.width() < 1) throw DataError("scene '" + scene.id + "' has an empty image");
  for (const auto& p : scene.points) {
    if (!scene.contains(p)) {
      throw DataError("scene '" + scene.id + "': point (" + std::to_string(p.row) + ", " + std::to_string(p.col) +
                      ") lies outside the " + std::to_string(scene.height()) + "x" +
                      std::to_string(scene.width()) + " image");
    }
  }
}

namespace {

// Bilinearly interpolated lattice noise in [-1, 1].
Grid value_noise(Rng& rng, int height, int width, int cell) {
  const int lr = height / cell + 2;
  const int lc = width / cell + 2;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Grid lattice(lr, lc);
  for (int r = 0; r < lr; ++r)
    for (int c = 0; c < lc; ++c) lattice(r, c) = u(rng);
  Grid out(height, width);
  for (int y = 0; y < height; ++y) {
    const double fy = static_cast<double>(y) / cell;
    const int y0 = static_cast<int>(fy);
    const double ty = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = static_cast<double>(x) / cell;
      const int x0 = static_cast<int>(fx);
      const double tx = fx - x0;
      const double top = lattice(y0, x0) * (1 - tx) + lattice(y0, x0 + 1) * tx;
      const double bottom = lattice(y0 + 1, x0) * (1 - tx) + lattice(y0 + 1, x0 + 1) * tx;
      out(y, x) = top * (1 - ty) + bottom * ty;
    }
  }
  return out;
}

void add_blob(Grid& img, double cy, double cx, double sy, double sx, double amplitude) {
  const int ry = static_cast<int>(std::ceil(3 * sy));
  const int rx = static_cast<int>(std::ceil(3 * sx));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy)) - ry);
  const int y1 = std::min(static_cast<int>(img.rows()) - 1, static_cast<int>(std::floor(cy)) + ry);
  const int x0 = std::max(0, static_cast<int>(std::floor(cx)) - rx);
  const int x1 = std::min(static_cast<int>(img.cols()) - 1, static_cast<int>(std::floor(cx)) + rx);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dy = (y - cy) / sy;
      const double dx = (x - cx) / sx;
      img(y, x) += amplitude * std::exp(-0.5 * (dy * dy + dx * dx));
    }
  }
}

}  // namespace

Scene generate_synthetic_scene(std::uint64_t seed, int height, int width, CountRange count_range,
                               double clutter_level) {
  if (height < 32 || width < 32) throw ConfigError("synthetic scenes must be at least 32x32");
  if (count_range.min < 0 || count_range.max < count_range.min) throw ConfigError("empty or negative count range");
  if (!(clutter_level >= 0.0 && clutter_level <= 1.0)) throw ConfigError("clutter_level must lie in [0, 1]");

  Rng rng(derive_seed(seed, 0x5c3e));
  Scene scene;
  scene.id = "synthetic_" + std::to_string(seed);
  scene.image = Grid::Constant(height, width, 0.15);

  if (clutter_level > 0.0) {
    scene.image += (0.22 * clutter_level) * value_noise(rng, height, width, 16);
    scene.image += (0.12 * clutter_level) * value_noise(rng, height, width, 5);
    // Elongated distractors: bright, but never head-shaped.
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const int distractors = static_cast<int>(std::lround(6 * clutter_level));
    for (int i = 0; i < distractors; ++i) {
      const double cy = u01(rng) * height;
      const double cx = u01(rng) * width;
      const bool vertical = u01(rng) < 0.5;
      const double a = 1.0 + u01(rng);
      const double b = 5.0 + 4.0 * u01(rng);
      add_blob(scene.image, cy, cx, vertical ? b : a, vertical ? a : b, 0.3 + 0.25 * u01(rng));
    }
  }

  std::uniform_int_distribution<int> count_dist(count_range.min, count_range.max);
  std::uniform_int_distribution<int> row_dist(0, height - 1);
  std::uniform_int_distribution<int> col_dist(0, width - 1);
  std::uniform_real_distribution<double> amp_dist(0.45, 0.7);
  const int n = count_dist(rng);
  scene.points.reserve(n);
  for (int i = 0; i < n; ++i) {
    const Point p{row_dist(rng), col_dist(rng)};
    const double amp = amp_dist(rng);
    add_blob(scene.image, p.row, p.col, 1.6, 1.6, amp);
    add_blob(scene.image, p.row + 4.5, p.col, 2.8, 1.9, 0.35 * amp);
    scene.points.push_back(p);
  }
  scene.image = scene.image.cwiseMax(0.0).cwiseMin(1.0);
  return scene;
}

DensityMap density_from_points(const Scene& scene, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("density kernel sigma must be positive");
  validate_scene(scene);
  const int h = scene.height();
  const int w = scene.width();
  const double radius = kernel_radius(sigma);
  const double r2 = radius * radius;
  const int reach = static_cast<int>(std::floor(radius));
  DensityMap dm{Grid::Zero(h, w)};
  std::vector<std::pair<int, double>> support;
  for (const auto& p : scene.points) {
    support.clear();
    double mass = 0.0;
    for (int dy = -reach; dy <= reach; ++dy) {
      const int y = p.row + dy;
      if (y < 0 || y >= h) continue;
      for (int dx = -reach; dx <= reach; ++dx) {
        const int x = p.col + dx;
        const double d2 = static_cast<double>(dy * dy + dx * dx);
        if (x < 0 || x >= w || d2 > r2) continue;
        const double v = std::exp(-d2 / (2.0 * sigma * sigma));
        support.emplace_back(y * w + x, v);
        mass += v;
      }
    }
    for (const auto& [idx, v] : support) dm.values.data()[idx] += v / mass;
  }
  return dm;
}

BinaryMask mask_from_density(const DensityMap& density) {
  return BinaryMask{(density.values.array() > 0.0).cast<double>().matrix()};
}

LabeledSample make_labeled_sample(const Scene& scene, double sigma) {
  LabeledSample s;
  s.image = scene.image;
  s.density = density_from_points(scene, sigma);
  s.mask = mask_from_density(s.density);
  return s;
}

Grid flip_horizontal(const Grid& g) { return g.rowwise().reverse(); }

Batch make_batch(const std::vector<LabeledSample>& labeled_pool, const std::vector<Grid>& unlabeled_pool,
                 Rng& rng, const BatchSpec& spec) {
  if (spec.patch < 1) throw ConfigError("patch size must be positive");
  if (labeled_pool.empty() && spec.labeled > 0) throw ConfigError("labeled pool is empty");
  const int p = spec.patch;
  auto check = [p](const Grid& g) {
    if (g.rows() < p || g.cols() < p) {
      throw DataError("source image " + std::to_string(g.rows()) + "x" + std::to_string(g.cols()) +
                      " is smaller than the " + std::to_string(p) + "px crop");
    }
  };
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto pick = [&rng](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  auto offset = [&rng](Eigen::Index extent, int patch) {
    return std::uniform_int_distribution<int>(0, static_cast<int>(extent) - patch)(rng);
  };

  Batch batch;
  batch.patch_size = p;
  batch.labeled.reserve(spec.labeled);
  for (int i = 0; i < spec.labeled; ++i) {
    const auto& src = labeled_pool[pick(labeled_pool.size())];
    check(src.image);
    const int r0 = offset(src.image.rows(), p);
    const int c0 = offset(src.image.cols(), p);
    const bool flip = u01(rng) < spec.flip_p;
    LabeledPatch lp{src.image.block(r0, c0, p, p), src.density.values.block(r0, c0, p, p),
                    src.mask.values.block(r0, c0, p, p)};
    if (flip) {
      lp.image = flip_horizontal(lp.image);
      lp.density = flip_horizontal(lp.density);
      lp.mask = flip_horizontal(lp.mask);
    }
    batch.labeled.push_back(std::move(lp));
  }
  if (!unlabeled_pool.empty()) {
    batch.unlabeled.reserve(spec.unlabeled);
    for (int i = 0; i < spec.unlabeled; ++i) {
      const auto& src = unlabeled_pool[pick(unlabeled_pool.size())];
      check(src);
      const int r0 = offset(src.rows(), p);
      const int c0 = offset(src.cols(), p);
      const bool flip = u01(rng) < spec.flip_p;
      Grid patch = src.block(r0, c0, p, p);
      batch.unlabeled.push_back(flip ? flip_horizontal(patch) : patch);
    }
  }
  return batch;
}

std::vector<Point> read_annotations(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open annotation file " + path.string());
  std::vector<Point> points;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Point p;
    std::string rest;
    if (!(ls >> p.row >> p.col) || (ls >> rest)) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 'row col' integer pair");
    }
    points.push_back(p);
  }
  return points;
}

void write_annotations(const fs::path& path, const std::vector<Point>& points) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write annotation file " + path.string());
  for (const auto& p : points) out << p.row << ' ' << p.col << '\n';
}

void write_grid_f32(const fs::path& path, const Grid& grid, int count) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write grid file " + path.string());
  const std::int32_t header[3] = {static_cast<std::int32_t>(grid.rows()), static_cast<std::int32_t>(grid.cols()),
                                  count};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  std::vector<float> buf(grid.size());
  for (Eigen::Index i = 0; i < grid.size(); ++i) buf[i] = static_cast<float>(grid.data()[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!out) throw DataError("failed writing grid file " + path.string());
}

Grid read_grid_f32(const fs::path& path, int* count) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open grid file " + path.string());
  std::int32_t header[3];
  if (!in.read(reinterpret_cast<char*>(header), sizeof(header)) || header[0] < 0 || header[1] < 0) {
    throw DataError("truncated grid header in " + path.string());
  }
  std::vector<float> buf(static_cast<std::size_t>(header[0]) * header[1]);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)))) {
    throw DataError("truncated grid payload in " + path.string());
  }
  Grid g(header[0], header[1]);
  for (std::size_t i = 0; i < buf.size(); ++i) g.data()[i] = buf[i];
  if (count) *count = header[2];
  return g;
}

SplitCounts split_counts(int n, double labeled_fraction) {
  if (n < 2) throw ConfigError("need at least 2 scenes to form a split");
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) throw ConfigError("labeled fraction must lie in (0, 1]");
  SplitCounts s;
  s.val = std::max(1, n / 10);
  const int rest = n - s.val;
  s.labeled = static_cast<int>(std::floor(rest * labeled_fraction));
  s.unlabeled = rest - s.labeled;
  if (s.labeled < 1) throw ConfigError("split leaves no labeled scenes");
  return s;
}

namespace {

std::string scene_name(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_%05d", prefix, i);
  return buf;
}

}  // namespace

Dataset generate_dataset(const GenerateOptions& o) {
  const SplitCounts split = split_counts(o.count, o.labeled_fraction);
  Dataset ds;
  for (int i = 0; i < o.count; ++i) {
    Scene s = generate_synthetic_scene(derive_seed(o.seed, 1, i), o.height, o.width, o.count_range, o.clutter_level);
    s.id = scene_name("scene", i);
    if (i < split.labeled)
      ds.labeled.push_back(std::move(s));
    else if (i < split.labeled + split.unlabeled)
      ds.unlabeled.push_back(std::move(s));
    else
      ds.val.push_back(std::move(s));
  }
  for (int i = 0; i < o.test_count; ++i) {
    Scene s = generate_synthetic_scene(derive_seed(o.seed, 2, i), o.height, o.width, o.count_range, o.clutter_level);
    s.id = scene_name("test", i);
    ds.test.push_back(std::move(s));
  }
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& root) {
  fs::create_directories(root / "scenes");
  std::ofstream index(root / "index.txt");
  if (!index) throw DataError("cannot write " + (root / "index.txt").string());
  auto emit = [&](const char* split, const std::vector<Scene>& scenes) {
    for (const auto& s : scenes) {
      write_pgm16(root / "scenes" / (s.id + ".pgm"), s.image);
      write_annotations(root / "scenes" / (s.id + ".txt"), s.points);
      index << split << ' ' << s.id << '\n';
    }
  };
  emit("labeled", ds.labeled);
  emit("unlabeled", ds.unlabeled);
  emit("val", ds.val);
  emit("test", ds.test);
}

Dataset load_dataset(const fs::path& root) {
  const fs::path index_path = root / "index.txt";
  std::ifstream index(index_path);
  if (!index) throw DataError("dataset manifest not found: " + index_path.string());
  Dataset ds;
  std::string line;
  int lineno = 0;
  while (std::getline(index, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string split, id;
    if (!(ls >> split)) continue;
    if (!(ls >> id)) throw DataError(index_path.string() + ":" + std::to_string(lineno) + ": missing scene id");
    Scene s;
    s.id = id;
    s.image = read_pgm(root / "scenes" / (id + ".pgm"));
    s.points = read_annotations(root / "scenes" / (id + ".txt"));
    validate_scene(s);
    if (split == "labeled")
      ds.labeled.push_back(std::move(s));
    else if (split == "unlabeled")
      ds.unlabeled.push_back(std::move(s));
    else if (split == "val")
      ds.val.push_back(std::move(s));
    else if (split == "test")
      ds.test.push_back(std::move(s));
    else
      throw DataError(index_path.string() + ":" + std::to_string(lineno) + ": unknown split '" + split + "'");
  }
  return ds;
}

}  // namespace uacount
