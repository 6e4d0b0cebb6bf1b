#pragma once

#include <ostream>
#include <vector>

#include "json.hpp"
#include "uacount/config.hpp"
#include "uacount/data.hpp"
#include "uacount/eval.hpp"
#include "uacount/losses.hpp"
#include "uacount/model.hpp"
#include "uacount/uncertainty.hpp"

namespace uacount {

struct AdamState {
  ParamSet first_moment;
  ParamSet second_moment;
  long long steps = 0;
};

struct TrainerState {
  ParamSet student;
  ParamSet teacher;  // updated only by ema_update
  AdamState optimizer;  // student only
  long long step = 0;
  int epoch = 0;
  long long steps_per_epoch = 1;
  Rng rng;
};

// Fresh state: teacher is an exact copy of the student.
TrainerState init_state(const Network& net, const TrainConfig& cfg, long long steps_per_epoch);

// teacher <- zeta * teacher + (1 - zeta) * student, elementwise.
void ema_update(ParamSet& teacher, const ParamSet& student, double zeta);

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, double lr, const TrainConfig& cfg);

// Teacher outputs on the unlabeled patches: ensemble targets plus uncertainty maps.
struct TeacherTargets {
  McEnsemble ensemble;
  std::vector<UncertaintyBundle> uncertainty;
};

TeacherTargets teacher_targets(const Network& net, const ParamSet& teacher, std::span<const Grid> unlabeled,
                               const TrainConfig& cfg, double threshold, Rng& rng);

// Which loss terms contribute to the returned parameter gradient.
struct TermSelection {
  bool sd = true;
  bool sb = true;
  bool inherent = true;
  bool cb = true;
  bool cd = true;
};

struct StudentObjective {
  LossReport report;
  ParamSet grads;
};

// Student forward on labeled + unlabeled patches, all loss terms, and the
// gradient w.r.t. student parameters. Teacher targets are constants here.
StudentObjective student_objective(const Network& net, const ParamSet& student, const Batch& batch,
                                   const TeacherTargets* targets, const TrainConfig& cfg, double lambda, Rng& rng,
                                   const TermSelection& terms = {});

// One optimization step: teacher passes, student losses, Adam on the student,
// then the EMA update from the new student parameters.
LossReport train_step(const Network& net, TrainerState& state, const Batch& batch, const TrainConfig& cfg);

struct FitResult {
  ParamSet best_student;
  double best_val_mae = 0.0;
  int best_epoch = -1;
  int epochs_run = 0;
  TrainerState final_state;
  std::vector<nlohmann::json> history;
};

// Runs the configured mode. Step and validation records are streamed to
// metrics_log (one JSON object per line) when given.
FitResult fit(const TrainConfig& cfg, const Dataset& dataset, std::ostream* metrics_log = nullptr);

}  // namespace uacount
