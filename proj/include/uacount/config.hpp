#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "uacount/model.hpp"

namespace uacount {

enum class TrainMode { semi, label_only, fully };
enum class MaskKind { none, hard, soft };

std::string to_string(TrainMode m);
std::string to_string(MaskKind m);
TrainMode parse_mode(const std::string& s);
MaskKind parse_mask(const std::string& s);

struct TrainConfig {
  TrainMode mode = TrainMode::semi;
  NetworkConfig network;

  int epochs = 600;
  double lr = 7e-5;
  int lr_decay_every = 200;  // epochs
  double lr_decay_factor = 5.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  int batch_labeled = 8;
  int batch_unlabeled = 8;
  int patch = 128;
  double flip_p = 0.3;
  double sigma = 4.0;

  double ema_decay = 0.999;  // zeta
  int mc_passes = 8;         // T
  double input_noise_std = 0.05;
  double soft_weight = 7.0;  // M
  double transform_gain = 6000.0;
  double alpha = 0.1;
  double lambda_max = 1.0;
  double ramp_epochs = 80.0;

  // Which uncertainty map weights each consistency term.
  MaskKind seg_mask = MaskKind::hard;
  MaskKind density_mask = MaskKind::soft;

  int eval_every = 1;  // epochs
  int patience = 100;  // epochs without validation improvement
  int max_inference_side = 1024;

  std::uint64_t seed = 0;

  void validate() const;
  double lr_at(int epoch) const;
};

using KeyValues = std::map<std::string, std::string>;

// "key = value" lines; '#' starts a comment.
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);

// Applies overrides; unknown keys and malformed values raise ConfigError.
void apply_overrides(TrainConfig& cfg, const KeyValues& kv);

// Every field as "key = value", readable back by apply_overrides.
std::string dump_config(const TrainConfig& cfg);

}  // namespace uacount
