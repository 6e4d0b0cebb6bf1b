#include "uacount/trainer.hpp"

#include <cmath>
#include <limits>

#include "uacount/errors.hpp"
#include "uacount/transform.hpp"

namespace uacount {

TrainerState init_state(const Network& net, const TrainConfig& cfg, long long steps_per_epoch) {
  TrainerState s;
  s.student = net.init_params(cfg.seed);
  s.teacher = s.student;
  s.optimizer.first_moment = s.student.zeros_like();
  s.optimizer.second_moment = s.student.zeros_like();
  s.steps_per_epoch = std::max(1LL, steps_per_epoch);
  s.rng.seed(derive_seed(cfg.seed, 0x57a7e));
  return s;
}

void ema_update(ParamSet& teacher, const ParamSet& student, double zeta) {
  if (!teacher.same_shape(student)) throw DataError("EMA update: teacher and student parameter shapes differ");
  if (!(zeta >= 0.0 && zeta < 1.0)) throw ConfigError("EMA decay must lie in [0, 1)");
  const double keep = 1.0 - zeta;
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    double* t = teacher.values[i].data();
    const double* s = student.values[i].data();
    for (Eigen::Index k = 0; k < teacher.values[i].size(); ++k) t[k] = zeta * t[k] + keep * s[k];
  }
}

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& st, double lr, const TrainConfig& cfg) {
  if (!params.same_shape(grads)) throw DataError("optimizer: gradient shape mismatch");
  ++st.steps;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.steps));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params.values[i].data();
    const double* g = grads.values[i].data();
    double* m = st.first_moment.values[i].data();
    double* v = st.second_moment.values[i].data();
    for (Eigen::Index k = 0; k < params.values[i].size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.adam_eps);
    }
  }
}

TeacherTargets teacher_targets(const Network& net, const ParamSet& teacher, std::span<const Grid> unlabeled,
                               const TrainConfig& cfg, double threshold, Rng& rng) {
  TeacherTargets t;
  if (unlabeled.empty()) return t;
  const PerturbationConfig perturb{cfg.input_noise_std, true};
  t.ensemble = mc_ensemble(net, teacher, unlabeled, cfg.mc_passes, perturb, rng);
  t.uncertainty.reserve(t.ensemble.mean_score.size());
  for (const auto& score : t.ensemble.mean_score) {
    t.uncertainty.push_back(estimate_uncertainty(score, threshold, cfg.soft_weight));
  }
  return t;
}

namespace {

struct MaskWeights {
  std::vector<Grid> weights;
  double floor = 1.0;
};

MaskWeights weights_for(MaskKind kind, const std::vector<UncertaintyBundle>& unc) {
  MaskWeights mw;
  for (const auto& u : unc) {
    switch (kind) {
      case MaskKind::none:
        mw.weights.push_back(Grid::Ones(u.entropy.rows(), u.entropy.cols()));
        break;
      case MaskKind::hard:
        mw.weights.push_back(u.hard);
        break;
      case MaskKind::soft:
        mw.weights.push_back(u.soft);
        mw.floor = 1e-8;
        break;
    }
  }
  return mw;
}

// Adds a per-sample map into row `row` of a (channels x n*h*w) output-gradient matrix.
void accumulate(Grid& dst, int row, int sample, const Grid& g, double scale) {
  const Eigen::Index hw = g.size();
  Eigen::Map<Eigen::RowVectorXd>(dst.data() + row * dst.cols() + sample * hw, hw) +=
      scale * Eigen::Map<const Eigen::RowVectorXd>(g.data(), hw);
}

bool all_finite(const ParamSet& p) {
  for (const auto& v : p.values)
    if (!v.allFinite()) return false;
  return true;
}

}  // namespace

StudentObjective student_objective(const Network& net, const ParamSet& student, const Batch& batch,
                                   const TeacherTargets* targets, const TrainConfig& cfg, double lambda, Rng& rng,
                                   const TermSelection& terms) {
  const bool semi = cfg.mode == TrainMode::semi;
  const int n_l = static_cast<int>(batch.labeled.size());
  const int n_u = semi ? static_cast<int>(batch.unlabeled.size()) : 0;
  const int stride = net.config().output_stride;

  std::vector<Grid> images;
  images.reserve(n_l + n_u);
  for (const auto& lp : batch.labeled) images.push_back(lp.image);
  for (int j = 0; j < n_u; ++j) images.push_back(batch.unlabeled[j]);

  ForwardCache cache;
  const BatchOutput out = net.forward(student, images, {cfg.input_noise_std, true}, rng, &cache);
  if (!out.prob.allFinite() || !out.density.allFinite()) throw NumericError("non-finite student network output");
  const std::vector<ModelOutput> samples = out.samples();

  std::vector<Grid> pred_density, gt_density, gt_mask;
  std::vector<ScoreMap> pred_score;
  for (int i = 0; i < n_l; ++i) {
    pred_density.push_back(samples[i].density);
    pred_score.push_back(samples[i].score);
    gt_density.push_back(net.config().density_scale * sum_pool(batch.labeled[i].density, stride));
    gt_mask.push_back(max_pool(batch.labeled[i].mask, stride));
  }
  const MapLoss sd = supervised_density_loss(pred_density, gt_density);
  const ScoreLoss sb = supervised_seg_loss(pred_score, gt_mask);

  LossParts parts;
  parts.sd = sd.value;
  parts.sb = sb.value;
  Grid d_prob = Grid::Zero(2, out.prob.cols());
  Grid d_density = Grid::Zero(1, out.density.cols());
  for (int i = 0; i < n_l; ++i) {
    if (terms.sd) accumulate(d_density, 0, i, sd.grad[i], 1.0);
    if (terms.sb) {
      accumulate(d_prob, 0, i, sb.grad[i][0], cfg.alpha);
      accumulate(d_prob, 1, i, sb.grad[i][1], cfg.alpha);
    }
  }

  double kept_fraction = 0.0;
  if (semi) {
    // The transform acts on density in people per cell, not on the scaled head output.
    const TransformConfig tc{cfg.transform_gain};
    const double inv_scale = 1.0 / net.config().density_scale;
    std::vector<Grid> crowd, approx, slope;
    for (const auto& s : samples) {
      const Grid physical = s.density * inv_scale;
      crowd.push_back(s.crowd_prob());
      approx.push_back(approx_segmentation(physical, tc));
      slope.push_back(inv_scale * transform_gradient(physical, tc));
    }
    const InherentLoss inh = inherent_consistency_loss(crowd, approx);
    parts.inherent = inh.value;
    if (terms.inherent) {
      for (std::size_t i = 0; i < samples.size(); ++i) {
        accumulate(d_prob, 1, static_cast<int>(i), inh.grad_crowd[i], 1.0);
        accumulate(d_density, 0, static_cast<int>(i), inh.grad_approx[i].cwiseProduct(slope[i]), 1.0);
      }
    }

    if (n_u > 0) {
      if (!targets || static_cast<int>(targets->uncertainty.size()) != n_u) {
        throw DataError("teacher targets do not match the unlabeled sub-batch");
      }
      std::vector<ScoreMap> s_score;
      std::vector<Grid> s_density;
      for (int j = 0; j < n_u; ++j) {
        s_score.push_back(samples[n_l + j].score);
        s_density.push_back(samples[n_l + j].density);
      }
      const MaskWeights seg_w = weights_for(cfg.seg_mask, targets->uncertainty);
      const MaskWeights den_w = weights_for(cfg.density_mask, targets->uncertainty);
      const ScoreLoss cb = consistency_seg_loss(s_score, targets->ensemble.mean_score, seg_w.weights, seg_w.floor);
      const MapLoss cd = consistency_density_loss(s_density, targets->ensemble.mean_density, den_w.weights, den_w.floor);
      parts.cb = cb.value;
      parts.cd = cd.value;
      double kept = 0.0;
      double total = 0.0;
      for (const auto& u : targets->uncertainty) {
        kept += u.hard.sum();
        total += static_cast<double>(u.hard.size());
      }
      kept_fraction = kept / total;
      for (int j = 0; j < n_u; ++j) {
        if (terms.cb) {
          accumulate(d_prob, 0, n_l + j, cb.grad[j][0], lambda * cfg.alpha);
          accumulate(d_prob, 1, n_l + j, cb.grad[j][1], lambda * cfg.alpha);
        }
        if (terms.cd) accumulate(d_density, 0, n_l + j, cd.grad[j], lambda);
      }
    }
  }

  StudentObjective obj;
  obj.report = total_loss(parts, cfg.alpha, lambda);
  obj.report.kept_fraction = kept_fraction;
  obj.grads = net.backward(student, cache, d_prob, d_density);
  return obj;
}

LossReport train_step(const Network& net, TrainerState& state, const Batch& batch, const TrainConfig& cfg) {
  if (!state.student.same_shape(state.teacher)) throw DataError("teacher and student parameter shapes differ");
  const bool semi = cfg.mode == TrainMode::semi;
  const double t = static_cast<double>(state.step);
  const double ramp_steps = cfg.ramp_epochs * static_cast<double>(state.steps_per_epoch);
  const LossWeights weights{cfg.alpha, cfg.lambda_max, ramp_steps};
  const double lambda = semi ? ramp_lambda(t, weights) : 0.0;

  TeacherTargets targets;
  if (semi && !batch.unlabeled.empty()) {
    const double threshold = ThresholdSchedule{ramp_steps}.threshold(t);
    targets = teacher_targets(net, state.teacher, batch.unlabeled, cfg, threshold, state.rng);
  }
  StudentObjective obj = student_objective(net, state.student, batch, &targets, cfg, lambda, state.rng);

  const auto& p = obj.report.parts;
  if (!std::isfinite(obj.report.total) || !all_finite(obj.grads)) {
    throw NumericError("non-finite loss at step " + std::to_string(state.step) + ": L_Sd=" + std::to_string(p.sd) +
                       " L_Sb=" + std::to_string(p.sb) + " L_c=" + std::to_string(p.inherent) +
                       " L_Cb=" + std::to_string(p.cb) + " L_Cd=" + std::to_string(p.cd));
  }
  adam_step(state.student, obj.grads, state.optimizer, cfg.lr_at(state.epoch), cfg);
  if (semi) ema_update(state.teacher, state.student, cfg.ema_decay);
  ++state.step;
  return obj.report;
}

FitResult fit(const TrainConfig& cfg, const Dataset& dataset, std::ostream* metrics_log) {
  cfg.validate();
  const bool semi = cfg.mode == TrainMode::semi;
  std::vector<const Scene*> labeled;
  for (const auto& s : dataset.labeled) labeled.push_back(&s);
  if (cfg.mode == TrainMode::fully)
    for (const auto& s : dataset.unlabeled) labeled.push_back(&s);
  if (labeled.empty()) throw ConfigError("training requires a non-empty labeled pool");

  std::vector<LabeledSample> labeled_pool;
  labeled_pool.reserve(labeled.size());
  for (const Scene* s : labeled) labeled_pool.push_back(make_labeled_sample(*s, cfg.sigma));
  std::vector<Grid> unlabeled_pool;
  if (semi)
    for (const auto& s : dataset.unlabeled) unlabeled_pool.push_back(s.image);

  const Network net(cfg.network);
  const long long steps_per_epoch = (static_cast<long long>(labeled_pool.size()) + cfg.batch_labeled - 1) / cfg.batch_labeled;
  FitResult result;
  result.final_state = init_state(net, cfg, steps_per_epoch);
  TrainerState& state = result.final_state;
  result.best_student = state.student;
  result.best_val_mae = std::numeric_limits<double>::infinity();

  const BatchSpec spec{cfg.batch_labeled, semi ? cfg.batch_unlabeled : 0, cfg.patch, cfg.flip_p};
  auto emit = [&](nlohmann::json record) {
    if (metrics_log) *metrics_log << record.dump() << '\n';
    result.history.push_back(std::move(record));
  };

  int since_best = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    const double lr = cfg.lr_at(epoch);
    for (long long s = 0; s < steps_per_epoch; ++s) {
      // Batch assembly draws from its own stream keyed by (seed, worker 0, step).
      Rng batch_rng(derive_seed(cfg.seed, 0, static_cast<std::uint64_t>(state.step)));
      const Batch batch = make_batch(labeled_pool, unlabeled_pool, batch_rng, spec);
      const long long step = state.step;
      const LossReport r = train_step(net, state, batch, cfg);
      nlohmann::json rec{{"type", "step"}, {"step", step}, {"epoch", epoch}, {"lr", lr}};
      rec["L_Sd"] = r.parts.sd;
      rec["L_Sb"] = r.parts.sb;
      if (semi) {
        rec["L_c"] = r.parts.inherent;
        rec["L_Cb"] = r.parts.cb;
        rec["L_Cd"] = r.parts.cd;
        rec["lambda"] = r.lambda;
        rec["kept_fraction"] = r.kept_fraction;
      }
      rec["L_total"] = r.total;
      emit(std::move(rec));
    }
    result.epochs_run = epoch + 1;

    const bool eval_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
    if (!eval_now || dataset.val.empty()) continue;
    const EvalResult val = evaluate(net, state.student, dataset.val, cfg.max_inference_side);
    emit({{"type", "val"}, {"step", state.step}, {"epoch", epoch}, {"val_mae", val.mae}, {"val_rmse", val.rmse}});
    if (val.mae < result.best_val_mae) {
      result.best_val_mae = val.mae;
      result.best_epoch = epoch;
      result.best_student = state.student;
      since_best = 0;
    } else {
      since_best += cfg.eval_every;
      if (since_best >= cfg.patience) break;
    }
  }
  if (dataset.val.empty()) {
    result.best_student = state.student;
    result.best_epoch = result.epochs_run - 1;
  }
  return result;
}

}  // namespace uacount
