#pragma once

#include <string>
#include <vector>

#include "uacount/config.hpp"
#include "uacount/data.hpp"

namespace uacount {

struct ExperimentPreset {
  std::string name;
  KeyValues overrides;  // applied on top of the base config
  int labeled_limit = -1;    // keep only the first N labeled scenes; -1 keeps all
  int unlabeled_limit = -1;  // keep only the first N unlabeled scenes; -1 keeps all
};

// Preset groups: "table1" (label_only / semi / fully), "table2" (uncertainty
// map ablation), "fig4_labeled" and "fig4_unlabeled" (pool-size sweeps).
std::vector<ExperimentPreset> preset_group(const std::string& group, const Dataset& dataset);
std::vector<std::string> preset_group_names();

// CPU-sized schedule for the synthetic benchmark.
KeyValues desk_overrides();

TrainConfig resolve(const TrainConfig& base, const ExperimentPreset& preset);
Dataset restrict_pools(const Dataset& dataset, const ExperimentPreset& preset);

}  // namespace uacount
