#include "uacount/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

#include "uacount/errors.hpp"

namespace uacount {

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::semi:
      return "semi";
    case TrainMode::label_only:
      return "label_only";
    case TrainMode::fully:
      return "fully";
  }
  return "unknown";
}

std::string to_string(MaskKind m) {
  switch (m) {
    case MaskKind::none:
      return "none";
    case MaskKind::hard:
      return "hard";
    case MaskKind::soft:
      return "soft";
  }
  return "unknown";
}

TrainMode parse_mode(const std::string& s) {
  if (s == "semi") return TrainMode::semi;
  if (s == "label_only") return TrainMode::label_only;
  if (s == "fully") return TrainMode::fully;
  throw ConfigError("unknown training mode '" + s + "' (expected semi, label_only or fully)");
}

MaskKind parse_mask(const std::string& s) {
  if (s == "none") return MaskKind::none;
  if (s == "hard") return MaskKind::hard;
  if (s == "soft") return MaskKind::soft;
  throw ConfigError("unknown uncertainty mask '" + s + "' (expected none, hard or soft)");
}

void TrainConfig::validate() const {
  network.validate();
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(epochs, "epochs");
  positive(lr, "lr");
  positive(lr_decay_every, "lr_decay_every");
  positive(lr_decay_factor, "lr_decay_factor");
  positive(batch_labeled, "batch_labeled");
  positive(patch, "patch");
  positive(sigma, "sigma");
  positive(mc_passes, "mc_passes");
  positive(soft_weight, "soft_weight");
  positive(transform_gain, "transform_gain");
  positive(alpha, "alpha");
  positive(ramp_epochs, "ramp_epochs");
  positive(eval_every, "eval_every");
  positive(patience, "patience");
  positive(max_inference_side, "max_inference_side");
  positive(adam_eps, "adam_eps");
  if (batch_unlabeled < 0) throw ConfigError("batch_unlabeled must be non-negative");
  if (!(flip_p >= 0.0 && flip_p <= 1.0)) throw ConfigError("flip_p must lie in [0, 1]");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in [0, 1)");
  if (!(input_noise_std >= 0.0)) throw ConfigError("input_noise_std must be non-negative");
  if (!(lambda_max >= 0.0)) throw ConfigError("lambda_max must be non-negative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("Adam moment coefficients must lie in [0, 1)");
  }
  if (patch % network.output_stride != 0) throw ConfigError("patch must be divisible by the output stride");
  if (max_inference_side % network.output_stride != 0) {
    throw ConfigError("max_inference_side must be divisible by the output stride");
  }
}

double TrainConfig::lr_at(int epoch) const {
  return lr / std::pow(lr_decay_factor, static_cast<double>(epoch / lr_decay_every));
}

KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

namespace {

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos == v.size()) return i;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// "16|32|32|64" or "64,64|128,128|..." : stages separated by '|', convs by ','.
std::vector<std::vector<int>> parse_stages(const std::string& key, const std::string& v) {
  std::vector<std::vector<int>> stages;
  std::istringstream ss(v);
  std::string stage;
  while (std::getline(ss, stage, '|')) {
    std::vector<int> widths;
    std::istringstream st(stage);
    std::string w;
    while (std::getline(st, w, ',')) widths.push_back(static_cast<int>(to_int(key, w)));
    stages.push_back(std::move(widths));
  }
  return stages;
}

std::string format_stages(const std::vector<std::vector<int>>& stages) {
  std::string out;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (s) out += '|';
    for (std::size_t j = 0; j < stages[s].size(); ++j) {
      if (j) out += ',';
      out += std::to_string(stages[s][j]);
    }
  }
  return out;
}

struct Field {
  const char* key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define UAC_DOUBLE(name)                                                                              \
  Field {                                                                                             \
    #name, [](TrainConfig& c, const std::string& v) { c.name = to_double(#name, v); },                \
        [](const TrainConfig& c) { return fmt_double(c.name); }                                       \
  }
#define UAC_INT(name)                                                                                 \
  Field {                                                                                             \
    #name, [](TrainConfig& c, const std::string& v) { c.name = static_cast<int>(to_int(#name, v)); }, \
        [](const TrainConfig& c) { return std::to_string(c.name); }                                   \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"mode", [](TrainConfig& c, const std::string& v) { c.mode = parse_mode(v); },
       [](const TrainConfig& c) { return to_string(c.mode); }},
      {"backbone",
       [](TrainConfig& c, const std::string& v) {
         const double rate = c.network.dropout_rate;
         const double scale = c.network.density_scale;
         c.network = parse_backbone(v) == Backbone::desk_small ? NetworkConfig::desk_small()
                                                               : NetworkConfig::vgg16_truncated();
         c.network.dropout_rate = rate;
         c.network.density_scale = scale;
       },
       [](const TrainConfig& c) { return to_string(c.network.backbone); }},
      {"dropout_rate", [](TrainConfig& c, const std::string& v) { c.network.dropout_rate = to_double("dropout_rate", v); },
       [](const TrainConfig& c) { return fmt_double(c.network.dropout_rate); }},
      {"stages", [](TrainConfig& c, const std::string& v) { c.network.stages = parse_stages("stages", v); },
       [](const TrainConfig& c) { return format_stages(c.network.stages); }},
      {"output_stride",
       [](TrainConfig& c, const std::string& v) { c.network.output_stride = static_cast<int>(to_int("output_stride", v)); },
       [](const TrainConfig& c) { return std::to_string(c.network.output_stride); }},
      {"head_kernel",
       [](TrainConfig& c, const std::string& v) { c.network.head_kernel = static_cast<int>(to_int("head_kernel", v)); },
       [](const TrainConfig& c) { return std::to_string(c.network.head_kernel); }},
      {"density_scale",
       [](TrainConfig& c, const std::string& v) { c.network.density_scale = to_double("density_scale", v); },
       [](const TrainConfig& c) { return fmt_double(c.network.density_scale); }},
      UAC_INT(epochs),
      UAC_DOUBLE(lr),
      UAC_INT(lr_decay_every),
      UAC_DOUBLE(lr_decay_factor),
      UAC_DOUBLE(adam_beta1),
      UAC_DOUBLE(adam_beta2),
      UAC_DOUBLE(adam_eps),
      UAC_INT(batch_labeled),
      UAC_INT(batch_unlabeled),
      UAC_INT(patch),
      UAC_DOUBLE(flip_p),
      UAC_DOUBLE(sigma),
      UAC_DOUBLE(ema_decay),
      UAC_INT(mc_passes),
      UAC_DOUBLE(input_noise_std),
      UAC_DOUBLE(soft_weight),
      UAC_DOUBLE(transform_gain),
      UAC_DOUBLE(alpha),
      UAC_DOUBLE(lambda_max),
      UAC_DOUBLE(ramp_epochs),
      {"seg_mask", [](TrainConfig& c, const std::string& v) { c.seg_mask = parse_mask(v); },
       [](const TrainConfig& c) { return to_string(c.seg_mask); }},
      {"density_mask", [](TrainConfig& c, const std::string& v) { c.density_mask = parse_mask(v); },
       [](const TrainConfig& c) { return to_string(c.density_mask); }},
      UAC_INT(eval_every),
      UAC_INT(patience),
      UAC_INT(max_inference_side),
      {"seed", [](TrainConfig& c, const std::string& v) { c.seed = static_cast<std::uint64_t>(to_int("seed", v)); },
       [](const TrainConfig& c) { return std::to_string(c.seed); }},
  };
  return table;
}

#undef UAC_DOUBLE
#undef UAC_INT

}  // namespace

void apply_overrides(TrainConfig& cfg, const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    bool known = false;
    for (const auto& f : fields()) known = known || key == f.key;
    if (!known) throw ConfigError("unknown config key '" + key + "'");
  }
  // Table order: backbone resets the network before finer network keys apply.
  for (const auto& f : fields()) {
    if (const auto it = kv.find(f.key); it != kv.end()) f.set(cfg, it->second);
  }
}

std::string dump_config(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace uacount
