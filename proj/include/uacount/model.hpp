#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "uacount/grid.hpp"

namespace uacount {

enum class Backbone { desk_small, vgg16_truncated };

std::string to_string(Backbone b);
Backbone parse_backbone(const std::string& s);

struct NetworkConfig {
  Backbone backbone = Backbone::desk_small;
  double dropout_rate = 0.5;
  // Conv widths per stage; the first log2(output_stride) stages end in a 2x2 max-pool.
  std::vector<std::vector<int>> stages{{16}, {32}, {32}, {64}};
  int output_stride = 4;
  int head_kernel = 3;
  // The density head regresses scale * (people per output cell).
  double density_scale = 100.0;

  static NetworkConfig desk_small();
  // First ten conv layers of VGG-16.
  static NetworkConfig vgg16_truncated();

  void validate() const;
  int pooled_stages() const;
  // Stage indices followed by a dropout layer (second and third stage for >= 3 stages).
  std::array<int, 2> dropout_sites() const;
  bool operator==(const NetworkConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

struct PerturbationConfig {
  double input_noise_std = 0.0;
  bool dropout_active = false;
};

// Named parameter arrays. Student and teacher share the same layout.
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Grid> values;

  std::size_t size() const { return values.size(); }
  std::size_t scalar_count() const;
  bool same_shape(const ParamSet& other) const;
  ParamSet zeros_like() const;
};

struct ModelOutput {
  ScoreMap score;  // softmax
  // Non-negative density at output-stride resolution.
  Grid density;

  const Grid& crowd_prob() const { return score[1]; }
};

// Column j of each matrix holds pixel (j mod h*w) of sample (j / h*w).
struct BatchOutput {
  int n = 0;
  int h = 0;
  int w = 0;
  Grid prob;     // 2 x n*h*w
  Grid density;  // 1 x n*h*w

  ModelOutput sample(int i) const;
  std::vector<ModelOutput> samples() const;
};

// Activations retained by a forward pass for the backward pass.
struct ForwardCache {
  struct Entry {
    Grid cols;                        // conv: im2col input
    Grid mask;                        // relu / dropout: multiplicative mask
    std::vector<std::int32_t> argmax; // pool: source index per output
    int h = 0;
    int w = 0;
  };
  int n = 0;
  std::vector<Entry> trunk;
  Grid head_cols;
  Grid prob;
  Grid density_pre;
};

class Network {
 public:
  explicit Network(NetworkConfig config);

  const NetworkConfig& config() const { return config_; }
  // People count of a predicted density map: plain sum divided by density_scale.
  double count(const Grid& density) const;
  ParamSet init_params(std::uint64_t seed) const;

  // Images must share one size divisible by output_stride.
  BatchOutput forward(const ParamSet& params, std::span<const Grid> images, const PerturbationConfig& perturb,
                      Rng& rng, ForwardCache* cache = nullptr) const;

  // Gradients of a scalar objective w.r.t. all parameters given its gradients
  // w.r.t. the class score (2 x n*h*w) and density (1 x n*h*w) outputs.
  ParamSet backward(const ParamSet& params, const ForwardCache& cache, const Grid& d_prob,
                    const Grid& d_density) const;

 private:
  enum class Op { conv, relu, pool, dropout };
  struct Layer {
    Op op;
    int param = -1;  // weight index; bias at param + 1
    int cin = 0;
    int cout = 0;
    int kernel = 3;
  };

  NetworkConfig config_;
  std::vector<Layer> trunk_;
  int features_ = 0;
  int seg_head_ = -1;
  int density_head_ = -1;
  std::vector<std::string> names_;
  std::vector<std::array<int, 2>> shapes_;
};

// Plain sum of a stride-resolution density map. Ground truth is sum-pooled
// to that resolution, so no stride^2 rescaling is needed.
double count_from_density(const Grid& density);

struct Checkpoint {
  NetworkConfig config;
  ParamSet params;
  nlohmann::json metadata;
};

inline constexpr const char* kCheckpointFormat = "uacount-checkpoint";
inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace uacount
