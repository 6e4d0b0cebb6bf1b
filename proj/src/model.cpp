#include "uacount/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "uacount/errors.hpp"

namespace uacount {

namespace fs = std::filesystem;

std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::desk_small:
      return "desk_small";
    case Backbone::vgg16_truncated:
      return "vgg16_truncated";
  }
  return "unknown";
}

Backbone parse_backbone(const std::string& s) {
  if (s == "desk_small") return Backbone::desk_small;
  if (s == "vgg16_truncated") return Backbone::vgg16_truncated;
  throw ConfigError("unknown backbone '" + s + "'");
}

NetworkConfig NetworkConfig::desk_small() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::vgg16_truncated() {
  NetworkConfig c;
  c.backbone = Backbone::vgg16_truncated;
  c.stages = {{64, 64}, {128, 128}, {256, 256, 256}, {512, 512, 512}};
  c.output_stride = 8;
  return c;
}

int NetworkConfig::pooled_stages() const { return std::countr_zero(static_cast<unsigned>(output_stride)); }

std::array<int, 2> NetworkConfig::dropout_sites() const {
  const int first = std::min(1, static_cast<int>(stages.size()) - 2);
  return {first, first + 1};
}

void NetworkConfig::validate() const {
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0, 1)");
  if (stages.size() < 2) throw ConfigError("network needs at least two stages");
  for (const auto& s : stages) {
    if (s.empty()) throw ConfigError("network stage without conv layers");
    for (int w : s)
      if (w < 1) throw ConfigError("conv width must be positive");
  }
  if (output_stride < 1 || !std::has_single_bit(static_cast<unsigned>(output_stride))) {
    throw ConfigError("output_stride must be a power of two");
  }
  if (pooled_stages() > static_cast<int>(stages.size())) throw ConfigError("output_stride needs more stages");
  if (head_kernel < 1 || head_kernel % 2 == 0) throw ConfigError("head_kernel must be odd and positive");
  if (!(density_scale > 0.0) || !std::isfinite(density_scale)) throw ConfigError("density_scale must be positive");
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"backbone", to_string(c.backbone)},
                     {"dropout_rate", c.dropout_rate},
                     {"stages", c.stages},
                     {"output_stride", c.output_stride},
                     {"head_kernel", c.head_kernel},
                     {"density_scale", c.density_scale}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  c.backbone = parse_backbone(j.at("backbone").get<std::string>());
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.stages = j.at("stages").get<std::vector<std::vector<int>>>();
  c.output_stride = j.at("output_stride").get<int>();
  c.head_kernel = j.at("head_kernel").get<int>();
  c.density_scale = j.at("density_scale").get<double>();
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values) n += static_cast<std::size_t>(v.size());
  return n;
}

bool ParamSet::same_shape(const ParamSet& other) const {
  if (values.size() != other.values.size()) return false;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].rows() != other.values[i].rows() || values[i].cols() != other.values[i].cols()) return false;
  }
  return true;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet z;
  z.names = names;
  z.values.reserve(values.size());
  for (const auto& v : values) z.values.push_back(Grid::Zero(v.rows(), v.cols()));
  return z;
}

ModelOutput BatchOutput::sample(int i) const {
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  ModelOutput out;
  for (int c = 0; c < 2; ++c) {
    out.score[c] = Eigen::Map<const Grid>(prob.data() + c * prob.cols() + i * hw, h, w);
  }
  out.density = Eigen::Map<const Grid>(density.data() + i * hw, h, w);
  return out;
}

std::vector<ModelOutput> BatchOutput::samples() const {
  std::vector<ModelOutput> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(sample(i));
  return out;
}

namespace {

// Unfolds k x k neighbourhoods (zero padding k/2) into rows of (cin*k*k) x (n*h*w).
Grid im2col(const Grid& x, int n, int h, int w, int k) {
  const int cin = static_cast<int>(x.rows());
  const int pad = k / 2;
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  Grid cols(static_cast<Eigen::Index>(cin) * k * k, n * hw);
  for (int c = 0; c < cin; ++c) {
    const double* src_c = x.data() + c * x.cols();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* dst = cols.data() + ((static_cast<Eigen::Index>(c) * k + ky) * k + kx) * cols.cols();
        const int dx = kx - pad;
        const int xlo = std::max(0, -dx);
        const int xhi = std::min(w, w - dx);
        for (int s = 0; s < n; ++s) {
          const double* src = src_c + s * hw;
          for (int y = 0; y < h; ++y, dst += w) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= h) {
              std::fill(dst, dst + w, 0.0);
              continue;
            }
            const double* srow = src + static_cast<Eigen::Index>(sy) * w + dx;
            std::fill(dst, dst + xlo, 0.0);
            std::copy(srow + xlo, srow + xhi, dst + xlo);
            std::fill(dst + xhi, dst + w, 0.0);
          }
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col.
Grid col2im(const Grid& cols, int cin, int n, int h, int w, int k) {
  const int pad = k / 2;
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  Grid x = Grid::Zero(cin, n * hw);
  for (int c = 0; c < cin; ++c) {
    double* dst_c = x.data() + c * x.cols();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* src = cols.data() + ((static_cast<Eigen::Index>(c) * k + ky) * k + kx) * cols.cols();
        const int dx = kx - pad;
        const int xlo = std::max(0, -dx);
        const int xhi = std::min(w, w - dx);
        for (int s = 0; s < n; ++s) {
          double* dst = dst_c + s * hw;
          for (int y = 0; y < h; ++y, src += w) {
            const int sy = y + ky - pad;
            if (sy < 0 || sy >= h) continue;
            double* drow = dst + static_cast<Eigen::Index>(sy) * w + dx;
            for (int xx = xlo; xx < xhi; ++xx) drow[xx] += src[xx];
          }
        }
      }
    }
  }
  return x;
}

}  // namespace

Network::Network(NetworkConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto sites = config_.dropout_sites();
  int cin = 1;
  auto add_param = [this](const std::string& base, int rows, int cols) {
    const int idx = static_cast<int>(names_.size());
    names_.push_back(base + ".weight");
    shapes_.push_back({rows, cols});
    names_.push_back(base + ".bias");
    shapes_.push_back({rows, 1});
    return idx;
  };
  for (int s = 0; s < static_cast<int>(config_.stages.size()); ++s) {
    for (int j = 0; j < static_cast<int>(config_.stages[s].size()); ++j) {
      const int cout = config_.stages[s][j];
      const std::string base = "stage" + std::to_string(s + 1) + ".conv" + std::to_string(j + 1);
      trunk_.push_back({Op::conv, add_param(base, cout, cin * 9), cin, cout, 3});
      trunk_.push_back({Op::relu});
      cin = cout;
    }
    if (s < config_.pooled_stages()) trunk_.push_back({Op::pool});
    if (s == sites[0] || s == sites[1]) trunk_.push_back({Op::dropout});
  }
  features_ = cin;
  const int kk = config_.head_kernel * config_.head_kernel;
  seg_head_ = add_param("seg_head", 2, cin * kk);
  density_head_ = add_param("density_head", 1, cin * kk);
}

ParamSet Network::init_params(std::uint64_t seed) const {
  Rng rng(derive_seed(seed, 0x1417));
  std::normal_distribution<double> normal(0.0, 1.0);
  ParamSet p;
  p.names = names_;
  for (std::size_t i = 0; i < names_.size(); i += 2) {
    const auto [rows, cols] = shapes_[i];
    double scale = std::sqrt(2.0 / cols);
    if (static_cast<int>(i) == seg_head_) scale = std::sqrt(1.0 / cols);
    if (static_cast<int>(i) == density_head_) scale = 0.01 * std::sqrt(1.0 / cols);
    Grid wgt(rows, cols);
    for (Eigen::Index k = 0; k < wgt.size(); ++k) wgt.data()[k] = scale * normal(rng);
    p.values.push_back(std::move(wgt));
    // Positive density bias keeps the clamp active at initialization.
    p.values.push_back(Grid::Constant(rows, 1, static_cast<int>(i) == density_head_ ? 0.01 : 0.0));
  }
  return p;
}

BatchOutput Network::forward(const ParamSet& params, std::span<const Grid> images, const PerturbationConfig& perturb,
                             Rng& rng, ForwardCache* cache) const {
  if (images.empty()) throw DataError("forward pass on an empty batch");
  if (params.size() != names_.size()) throw DataError("parameter set does not match the network layout");
  const int n = static_cast<int>(images.size());
  int h = static_cast<int>(images[0].rows());
  int w = static_cast<int>(images[0].cols());
  const int stride = config_.output_stride;
  if (h % stride != 0 || w % stride != 0 || h == 0 || w == 0) {
    throw DataError("input " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by output stride " +
                    std::to_string(stride));
  }
  Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  Grid x(1, n * hw);
  for (int i = 0; i < n; ++i) {
    if (images[i].rows() != h || images[i].cols() != w) throw DataError("batch images differ in shape");
    std::copy(images[i].data(), images[i].data() + hw, x.data() + i * hw);
  }
  if (perturb.input_noise_std < 0.0) throw ConfigError("input_noise_std must be non-negative");
  if (perturb.input_noise_std > 0.0) {
    std::normal_distribution<double> noise(0.0, perturb.input_noise_std);
    for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] += noise(rng);
  }

  if (cache) {
    cache->n = n;
    cache->trunk.assign(trunk_.size(), {});
  }
  const bool drop = perturb.dropout_active && config_.dropout_rate > 0.0;
  for (std::size_t li = 0; li < trunk_.size(); ++li) {
    const Layer& layer = trunk_[li];
    ForwardCache::Entry* entry = cache ? &cache->trunk[li] : nullptr;
    if (entry) {
      entry->h = h;
      entry->w = w;
    }
    switch (layer.op) {
      case Op::conv: {
        Grid cols = im2col(x, n, h, w, layer.kernel);
        x.resize(layer.cout, cols.cols());
        x.noalias() = params.values[layer.param] * cols;
        x.colwise() += params.values[layer.param + 1].col(0);
        if (entry) entry->cols = std::move(cols);
        break;
      }
      case Op::relu: {
        x = x.cwiseMax(0.0);
        if (entry) entry->mask = (x.array() > 0.0).cast<double>().matrix();
        break;
      }
      case Op::pool: {
        const int ho = h / 2;
        const int wo = w / 2;
        const Eigen::Index hwo = static_cast<Eigen::Index>(ho) * wo;
        Grid y(x.rows(), n * hwo);
        std::vector<std::int32_t> arg;
        if (entry) arg.resize(static_cast<std::size_t>(y.size()));
        for (Eigen::Index c = 0; c < x.rows(); ++c) {
          for (int s = 0; s < n; ++s) {
            const double* src = x.data() + c * x.cols() + s * hw;
            for (int yy = 0; yy < ho; ++yy) {
              for (int xx = 0; xx < wo; ++xx) {
                int best = (2 * yy) * w + 2 * xx;
                for (int off : {best + 1, best + w, best + w + 1})
                  if (src[off] > src[best]) best = off;
                const Eigen::Index o = c * y.cols() + s * hwo + yy * wo + xx;
                y.data()[o] = src[best];
                if (entry) arg[o] = static_cast<std::int32_t>(s * hw + best);
              }
            }
          }
        }
        x = std::move(y);
        h = ho;
        w = wo;
        hw = hwo;
        if (entry) entry->argmax = std::move(arg);
        break;
      }
      case Op::dropout: {
        if (!drop) break;
        const double keep = 1.0 - config_.dropout_rate;
        std::bernoulli_distribution coin(keep);
        Grid mask(x.rows(), x.cols());
        for (Eigen::Index k = 0; k < mask.size(); ++k) mask.data()[k] = coin(rng) ? 1.0 / keep : 0.0;
        x = x.cwiseProduct(mask);
        if (entry) entry->mask = std::move(mask);
        break;
      }
    }
  }

  Grid cols = im2col(x, n, h, w, config_.head_kernel);
  BatchOutput out;
  out.n = n;
  out.h = h;
  out.w = w;
  Grid logits = params.values[seg_head_] * cols;
  logits.colwise() += params.values[seg_head_ + 1].col(0);
  Grid pre = params.values[density_head_] * cols;
  pre.colwise() += params.values[density_head_ + 1].col(0);
  out.prob.resize(2, logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const double m = std::max(logits(0, j), logits(1, j));
    const double e0 = std::exp(logits(0, j) - m);
    const double e1 = std::exp(logits(1, j) - m);
    out.prob(0, j) = e0 / (e0 + e1);
    out.prob(1, j) = e1 / (e0 + e1);
  }
  out.density = pre.cwiseMax(0.0);
  if (cache) {
    cache->head_cols = std::move(cols);
    cache->prob = out.prob;
    cache->density_pre = std::move(pre);
  }
  return out;
}

ParamSet Network::backward(const ParamSet& params, const ForwardCache& cache, const Grid& d_prob,
                           const Grid& d_density) const {
  if (d_prob.rows() != 2 || d_prob.cols() != cache.prob.cols() || d_density.rows() != 1 ||
      d_density.cols() != cache.prob.cols()) {
    throw DataError("output gradient shape does not match the cached forward pass");
  }
  ParamSet grads = params.zeros_like();
  const int n = cache.n;

  Grid d_logits(2, d_prob.cols());
  for (Eigen::Index j = 0; j < d_prob.cols(); ++j) {
    const double p0 = cache.prob(0, j);
    const double p1 = cache.prob(1, j);
    const double dot = p0 * d_prob(0, j) + p1 * d_prob(1, j);
    d_logits(0, j) = p0 * (d_prob(0, j) - dot);
    d_logits(1, j) = p1 * (d_prob(1, j) - dot);
  }
  const Grid d_pre = d_density.cwiseProduct((cache.density_pre.array() > 0.0).cast<double>().matrix());

  grads.values[seg_head_].noalias() = d_logits * cache.head_cols.transpose();
  grads.values[seg_head_ + 1] = d_logits.rowwise().sum();
  grads.values[density_head_].noalias() = d_pre * cache.head_cols.transpose();
  grads.values[density_head_ + 1] = d_pre.rowwise().sum();

  // Spatial size at the heads equals the trunk output size.
  int h = cache.trunk.back().h;
  int w = cache.trunk.back().w;
  if (trunk_.back().op == Op::pool) {
    h /= 2;
    w /= 2;
  }
  if (static_cast<Eigen::Index>(h) * w * n != cache.prob.cols()) throw DataError("inconsistent forward cache");
  Grid d_cols = params.values[seg_head_].transpose() * d_logits;
  d_cols.noalias() += params.values[density_head_].transpose() * d_pre;
  Grid dx = col2im(d_cols, features_, n, h, w, config_.head_kernel);

  for (int li = static_cast<int>(trunk_.size()) - 1; li >= 0; --li) {
    const Layer& layer = trunk_[li];
    const ForwardCache::Entry& entry = cache.trunk[li];
    switch (layer.op) {
      case Op::dropout:
      case Op::relu:
        if (entry.mask.size() > 0) dx = dx.cwiseProduct(entry.mask);
        break;
      case Op::pool: {
        Grid din = Grid::Zero(dx.rows(), static_cast<Eigen::Index>(n) * entry.h * entry.w);
        for (Eigen::Index c = 0; c < dx.rows(); ++c) {
          double* dst = din.data() + c * din.cols();
          const double* src = dx.data() + c * dx.cols();
          const std::int32_t* arg = entry.argmax.data() + c * dx.cols();
          for (Eigen::Index k = 0; k < dx.cols(); ++k) dst[arg[k]] += src[k];
        }
        dx = std::move(din);
        break;
      }
      case Op::conv: {
        grads.values[layer.param].noalias() = dx * entry.cols.transpose();
        grads.values[layer.param + 1] = dx.rowwise().sum();
        if (li > 0) {
          Grid dc = params.values[layer.param].transpose() * dx;
          dx = col2im(dc, layer.cin, n, entry.h, entry.w, layer.kernel);
        }
        break;
      }
    }
  }
  return grads;
}

double Network::count(const Grid& density) const { return count_from_density(density) / config_.density_scale; }

double count_from_density(const Grid& density) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < density.size(); ++i) total += density.data()[i];
  return total;
}

namespace {

constexpr char kMagic[8] = {'U', 'A', 'C', 'K', 'P', 'T', '0', '1'};

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format"] = kCheckpointFormat;
  header["version"] = kCheckpointVersion;
  header["config"] = ckpt.config;
  header["metadata"] = ckpt.metadata;
  auto& arrays = header["params"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
    arrays.push_back({{"name", ckpt.params.names[i]},
                      {"rows", ckpt.params.values[i].rows()},
                      {"cols", ckpt.params.values[i].cols()}});
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& v : ckpt.params.values) {
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0 ||
      !in.read(reinterpret_cast<char*>(&len), sizeof(len)) || len > (1u << 26)) {
    throw DataError("not a checkpoint file: " + path.string());
  }
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw DataError("truncated checkpoint " + path.string());
  Checkpoint ckpt;
  try {
    const auto header = nlohmann::json::parse(text);
    if (header.at("format") != kCheckpointFormat || header.at("version") != kCheckpointVersion) {
      throw DataError("unsupported checkpoint format in " + path.string());
    }
    ckpt.config = header.at("config").get<NetworkConfig>();
    ckpt.metadata = header.value("metadata", nlohmann::json::object());
    for (const auto& a : header.at("params")) {
      Grid v(a.at("rows").get<Eigen::Index>(), a.at("cols").get<Eigen::Index>());
      if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)))) {
        throw DataError("truncated checkpoint payload in " + path.string());
      }
      ckpt.params.names.push_back(a.at("name").get<std::string>());
      ckpt.params.values.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  Network net(ckpt.config);
  if (!net.init_params(0).same_shape(ckpt.params)) {
    throw DataError("checkpoint parameters do not match its network config: " + path.string());
  }
  return ckpt;
}

}  // namespace uacount
