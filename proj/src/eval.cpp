#include "uacount/eval.hpp"

#include <cmath>
#include <cstdio>

#include "uacount/errors.hpp"
#include "uacount/image_io.hpp"
#include "uacount/transform.hpp"
#include "uacount/uncertainty.hpp"

namespace uacount {

namespace fs = std::filesystem;

EvalResult summarize(std::vector<ImageResult> images) {
  EvalResult r;
  r.images = std::move(images);
  if (r.images.empty()) return r;
  double abs_sum = 0.0;
  double sq_sum = 0.0;
  for (auto& img : r.images) {
    const double e = img.predicted - img.truth;
    img.abs_error = std::abs(e);
    abs_sum += img.abs_error;
    sq_sum += e * e;
  }
  const double n = static_cast<double>(r.images.size());
  r.mae = abs_sum / n;
  r.rmse = std::sqrt(sq_sum / n);
  return r;
}

Grid pad_to_stride(const Grid& image, int stride) {
  const Eigen::Index h = image.rows();
  const Eigen::Index w = image.cols();
  const Eigen::Index hp = (h + stride - 1) / stride * stride;
  const Eigen::Index wp = (w + stride - 1) / stride * stride;
  if (hp == h && wp == w) return image;
  auto reflect = [](Eigen::Index i, Eigen::Index n) {
    if (n == 1) return Eigen::Index{0};
    const Eigen::Index period = 2 * (n - 1);
    i %= period;
    return i < n ? i : period - i;
  };
  Grid out(hp, wp);
  for (Eigen::Index y = 0; y < hp; ++y)
    for (Eigen::Index x = 0; x < wp; ++x) out(y, x) = image(reflect(y, h), reflect(x, w));
  return out;
}

namespace {

ModelOutput infer_single(const Network& net, const ParamSet& params, const Grid& image) {
  Rng unused(0);
  const Grid padded = pad_to_stride(image, net.config().output_stride);
  return net.forward(params, std::span<const Grid>(&padded, 1), PerturbationConfig{}, unused).sample(0);
}

}  // namespace

ModelOutput infer(const Network& net, const ParamSet& params, const Grid& image, int max_side) {
  const int stride = net.config().output_stride;
  if (max_side < stride || max_side % stride != 0) throw ConfigError("max_side must be a positive multiple of the stride");
  const Eigen::Index h = image.rows();
  const Eigen::Index w = image.cols();
  if (h <= max_side && w <= max_side) return infer_single(net, params, image);

  const Eigen::Index oh = (h + stride - 1) / stride;
  const Eigen::Index ow = (w + stride - 1) / stride;
  ModelOutput out{{Grid(oh, ow), Grid(oh, ow)}, Grid(oh, ow)};
  for (Eigen::Index y0 = 0; y0 < h; y0 += max_side) {
    for (Eigen::Index x0 = 0; x0 < w; x0 += max_side) {
      const Eigen::Index th = std::min<Eigen::Index>(max_side, h - y0);
      const Eigen::Index tw = std::min<Eigen::Index>(max_side, w - x0);
      const ModelOutput tile = infer_single(net, params, image.block(y0, x0, th, tw));
      const Eigen::Index oy = y0 / stride;
      const Eigen::Index ox = x0 / stride;
      out.score[0].block(oy, ox, tile.density.rows(), tile.density.cols()) = tile.score[0];
      out.score[1].block(oy, ox, tile.density.rows(), tile.density.cols()) = tile.score[1];
      out.density.block(oy, ox, tile.density.rows(), tile.density.cols()) = tile.density;
    }
  }
  return out;
}

EvalResult evaluate(const Network& net, const ParamSet& params, const std::vector<Scene>& scenes, int max_side) {
  std::vector<ImageResult> rows;
  rows.reserve(scenes.size());
  for (const auto& scene : scenes) {
    const ModelOutput out = infer(net, params, scene.image, max_side);
    rows.push_back({scene.id, net.count(out.density), static_cast<double>(scene.points.size()), 0.0});
  }
  return summarize(std::move(rows));
}

std::string format_table(const EvalResult& r) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-24s %10s %10s %10s\n", "image", "predicted", "truth", "abs_err");
  out += buf;
  for (const auto& img : r.images) {
    std::snprintf(buf, sizeof(buf), "%-24s %10.3f %10.0f %10.3f\n", img.id.c_str(), img.predicted, img.truth,
                  img.abs_error);
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "MAE %.4f  RMSE %.4f  (%zu images)\n", r.mae, r.rmse, r.images.size());
  out += buf;
  return out;
}

void to_json(nlohmann::json& j, const EvalResult& r) {
  auto rows = nlohmann::json::array();
  for (const auto& img : r.images) {
    rows.push_back({{"id", img.id}, {"predicted", img.predicted}, {"truth", img.truth}, {"abs_error", img.abs_error}});
  }
  j = nlohmann::json{{"mae", r.mae}, {"rmse", r.rmse}, {"images", std::move(rows)}};
}

std::vector<fs::path> export_maps(const Network& net, const ParamSet& student, const ParamSet& teacher,
                                  const Scene& scene, const fs::path& out_dir, const ExportOptions& o) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw DataError("cannot create export directory " + out_dir.string() + ": " + ec.message());

  const int stride = net.config().output_stride;
  const ModelOutput pred = infer(net, student, scene.image, 1 << 30);
  const Grid density = pred.density / net.config().density_scale;
  const Grid approx = approx_segmentation(density, TransformConfig{o.transform_gain});

  Rng rng(derive_seed(o.seed, 0xe4));
  const Grid padded = pad_to_stride(scene.image, stride);
  const ScoreMap mean = mc_mean_score(net, teacher, padded, o.mc_passes, {o.input_noise_std, true}, rng);
  const UncertaintyBundle unc =
      estimate_uncertainty(mean, o.threshold > 0.0 ? o.threshold : kMaxEntropy, o.soft_weight);
  const Grid gt = density_from_points(scene, o.sigma).values;

  std::vector<fs::path> written;
  auto emit_grid = [&](const std::string& name, const Grid& g, double lo, double hi, int count) {
    const fs::path raw = out_dir / (name + ".f32");
    const fs::path img = out_dir / (name + ".ppm");
    write_grid_f32(raw, g, count);
    write_ppm(img, render_colormap(g, lo, hi));
    written.push_back(img);
    written.push_back(raw);
  };
  const fs::path input = out_dir / "input.pgm";
  write_pgm16(input, scene.image);
  written.push_back(input);
  emit_grid("gt_density", gt, 0.0, gt.maxCoeff(), static_cast<int>(scene.points.size()));
  emit_grid("density", density, 0.0, density.maxCoeff(), static_cast<int>(std::lround(count_from_density(density))));
  emit_grid("segmentation", pred.crowd_prob(), 0.0, 1.0, 0);
  emit_grid("approx_segmentation", approx, 0.0, 1.0, 0);
  emit_grid("entropy", unc.entropy, 0.0, kMaxEntropy, 0);
  emit_grid("soft_mask", unc.soft, 0.0, o.soft_weight, 0);
  const fs::path hard_img = out_dir / "hard_mask.ppm";
  const fs::path hard_raw = out_dir / "hard_mask.f32";
  write_ppm(hard_img, render_binary(unc.hard));
  write_grid_f32(hard_raw, unc.hard, 0);
  written.push_back(hard_img);
  written.push_back(hard_raw);
  return written;
}

}  // namespace uacount
