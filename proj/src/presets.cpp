#include "uacount/presets.hpp"

#include <algorithm>

#include "uacount/errors.hpp"

namespace uacount {

std::vector<std::string> preset_group_names() { return {"table1", "table2", "fig4_labeled", "fig4_unlabeled"}; }

std::vector<ExperimentPreset> preset_group(const std::string& group, const Dataset& ds) {
  if (group == "table1") {
    return {{"label_only", {{"mode", "label_only"}}},
            {"semi", {{"mode", "semi"}}},
            {"fully", {{"mode", "fully"}}}};
  }
  if (group == "table2") {
    auto variant = [](const char* name, const char* seg, const char* density) {
      return ExperimentPreset{name, {{"mode", "semi"}, {"seg_mask", seg}, {"density_mask", density}}};
    };
    return {variant("no_unc", "none", "none"),     variant("hard_unc", "hard", "none"),
            variant("soft_unc", "none", "soft"),   variant("two_soft_unc", "soft", "soft"),
            variant("two_hard_unc", "hard", "hard"), variant("both_unc", "hard", "soft")};
  }
  if (group == "fig4_labeled" || group == "fig4_unlabeled") {
    const bool vary_labeled = group == "fig4_labeled";
    const int pool = static_cast<int>(vary_labeled ? ds.labeled.size() : ds.unlabeled.size());
    std::vector<ExperimentPreset> out;
    for (int step = 1; step <= 5; ++step) {
      const int n = std::max(1, pool * step / 5);
      ExperimentPreset p{std::string(vary_labeled ? "labeled_" : "unlabeled_") + std::to_string(n), {{"mode", "semi"}}};
      (vary_labeled ? p.labeled_limit : p.unlabeled_limit) = n;
      out.push_back(std::move(p));
    }
    return out;
  }
  throw ConfigError("unknown preset group '" + group + "'");
}

KeyValues desk_overrides() {
  return {
      {"epochs", "90"},         {"lr", "1e-3"},       {"lr_decay_every", "60"}, {"batch_labeled", "8"},
      {"batch_unlabeled", "8"}, {"patch", "64"},      {"ema_decay", "0.95"},    {"lambda_max", "0.3"},
      {"ramp_epochs", "20"},    {"eval_every", "2"},  {"patience", "90"},
  };
}

TrainConfig resolve(const TrainConfig& base, const ExperimentPreset& preset) {
  TrainConfig cfg = base;
  apply_overrides(cfg, preset.overrides);
  cfg.validate();
  return cfg;
}

Dataset restrict_pools(const Dataset& ds, const ExperimentPreset& preset) {
  Dataset out = ds;
  if (preset.labeled_limit >= 0 && preset.labeled_limit < static_cast<int>(out.labeled.size()))
    out.labeled.resize(preset.labeled_limit);
  if (preset.unlabeled_limit >= 0 && preset.unlabeled_limit < static_cast<int>(out.unlabeled.size()))
    out.unlabeled.resize(preset.unlabeled_limit);
  return out;
}

}  // namespace uacount
