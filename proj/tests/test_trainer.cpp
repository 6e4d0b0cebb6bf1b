#include <cmath>
#include <sstream>

#include "doctest.h"
#include "uacount/errors.hpp"
#include "uacount/trainer.hpp"
#include "uacount/transform.hpp"

using namespace uacount;

namespace {

TrainConfig tiny_train_config() {
  TrainConfig c;
  c.network.stages = {{2}, {3}, {3}};
  c.batch_labeled = 2;
  c.batch_unlabeled = 2;
  c.patch = 16;
  c.mc_passes = 2;
  c.epochs = 2;
  c.lr = 1e-3;
  c.ramp_epochs = 1;
  c.seed = 3;
  return c;
}

Batch tiny_batch(int n_unlabeled, std::uint64_t seed) {
  Batch b;
  b.patch_size = 16;
  for (int i = 0; i < 2; ++i) {
    const Scene s = generate_synthetic_scene(derive_seed(seed, i), 32, 32, {2, 4}, 0.3);
    const LabeledSample full = make_labeled_sample(s, 4.0);
    b.labeled.push_back({full.image.topLeftCorner(16, 16), full.density.values.topLeftCorner(16, 16),
                         full.mask.values.topLeftCorner(16, 16)});
  }
  for (int j = 0; j < n_unlabeled; ++j)
    b.unlabeled.push_back(generate_synthetic_scene(derive_seed(seed, 10 + j), 32, 32, {1, 3}, 0.3).image.topLeftCorner(16, 16));
  return b;
}

Dataset tiny_dataset(std::uint64_t seed) {
  GenerateOptions g;
  g.count = 20;
  g.height = 32;
  g.width = 32;
  g.count_range = {1, 5};
  g.seed = seed;
  return generate_dataset(g);
}

ParamSet random_params(const ParamSet& like, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  ParamSet p = like;
  for (auto& v : p.values)
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] = n(rng);
  return p;
}

bool identical(const ParamSet& a, const ParamSet& b) {
  if (!a.same_shape(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a.values[i] != b.values[i]) return false;
  return true;
}

}  // namespace

TEST_CASE("ema: worked examples and scalar oracle") {
  ParamSet t{{"w"}, {Grid::Zero(1, 1)}};
  const ParamSet s{{"w"}, {Grid::Ones(1, 1)}};
  ema_update(t, s, 0.999);
  CHECK(t.values[0](0, 0) == doctest::Approx(0.001).epsilon(1e-12));

  ParamSet same = s;
  ema_update(same, s, 0.999);
  CHECK(identical(same, s));

  const Network net(tiny_train_config().network);
  Rng rng(1);
  const ParamSet a = random_params(net.init_params(0), rng);
  const ParamSet b = random_params(a, rng);
  ParamSet out = a;
  ema_update(out, b, 0.9);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (Eigen::Index k = 0; k < a.values[i].size(); ++k)
      CHECK(out.values[i].data()[k] == 0.9 * a.values[i].data()[k] + (1.0 - 0.9) * b.values[i].data()[k]);

  ParamSet wrong{{"w"}, {Grid::Zero(2, 1)}};
  CHECK_THROWS_AS(ema_update(wrong, s, 0.5), DataError);
  CHECK_THROWS_AS(ema_update(t, s, 1.0), ConfigError);
}

TEST_CASE("ema: geometric contraction toward a constant student") {
  Rng rng(2);
  const Network net(tiny_train_config().network);
  const ParamSet student = random_params(net.init_params(0), rng);
  ParamSet teacher = random_params(student, rng);
  const ParamSet start = teacher;
  const double zeta = 0.97;
  for (int n = 0; n < 100; ++n) ema_update(teacher, student, zeta);
  const double factor = std::pow(zeta, 100);
  for (std::size_t i = 0; i < student.size(); ++i)
    for (Eigen::Index k = 0; k < student.values[i].size(); ++k) {
      const double gap0 = start.values[i].data()[k] - student.values[i].data()[k];
      const double gap = teacher.values[i].data()[k] - student.values[i].data()[k];
      CHECK(std::abs(gap - factor * gap0) <= 1e-12 * std::abs(gap0) + 1e-15);
    }
}

TEST_CASE("train_step: teacher is exactly the EMA of the updated student") {
  TrainConfig cfg = tiny_train_config();
  const Network net(cfg.network);
  TrainerState st = init_state(net, cfg, 4);
  CHECK(identical(st.teacher, st.student));
  const Batch batch = tiny_batch(2, 5);
  for (int k = 0; k < 3; ++k) {
    const ParamSet teacher_before = st.teacher;
    const ParamSet student_before = st.student;
    train_step(net, st, batch, cfg);
    CHECK_FALSE(identical(st.student, student_before));
    ParamSet predicted = teacher_before;
    ema_update(predicted, st.student, cfg.ema_decay);
    for (std::size_t i = 0; i < predicted.size(); ++i) CHECK((st.teacher.values[i] - predicted.values[i]).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK(st.step == 3);
  CHECK(st.optimizer.steps == 3);
}

TEST_CASE("train_step: zero decay makes the teacher track the student") {
  TrainConfig cfg = tiny_train_config();
  cfg.ema_decay = 0.0;
  const Network net(cfg.network);
  TrainerState st = init_state(net, cfg, 4);
  const Batch batch = tiny_batch(2, 6);
  for (int k = 0; k < 2; ++k) {
    train_step(net, st, batch, cfg);
    CHECK(identical(st.teacher, st.student));
  }
}

TEST_CASE("train_step: supervised step against a finite-difference Adam oracle") {
  TrainConfig cfg = tiny_train_config();
  cfg.lambda_max = 0.0;
  const Network net(cfg.network);
  TrainerState st = init_state(net, cfg, 1);
  const Batch batch = tiny_batch(0, 7);
  const ParamSet before = st.student;
  const Rng rng_before = st.rng;

  std::vector<Grid> images;
  for (const auto& p : batch.labeled) images.push_back(p.image);
  const double scale = cfg.network.density_scale;
  // Independent evaluation of L_Sd + alpha L_Sb + L_c' on the labeled batch.
  auto objective = [&](const ParamSet& q) {
    Rng r = rng_before;
    const BatchOutput o = net.forward(q, images, {cfg.input_noise_std, true}, r);
    double sd = 0.0, sb = 0.0, lc = 0.0, n = 0.0;
    for (int i = 0; i < o.n; ++i) {
      const ModelOutput m = o.sample(i);
      const Grid gt = scale * sum_pool(batch.labeled[i].density, 4);
      const Grid mask = max_pool(batch.labeled[i].mask, 4);
      for (Eigen::Index k = 0; k < gt.size(); ++k) {
        const double d = m.density.data()[k];
        sd += (d - gt.data()[k]) * (d - gt.data()[k]);
        sb -= std::log(mask.data()[k] > 0.5 ? m.score[1].data()[k] : m.score[0].data()[k]);
        const double approx = 2.0 / (1.0 + std::exp(-cfg.transform_gain * d / scale)) - 1.0;
        lc += (m.score[1].data()[k] - approx) * (m.score[1].data()[k] - approx);
        n += 1.0;
      }
    }
    return sd / n + cfg.alpha * sb / n + lc / n;
  };

  const LossReport r = train_step(net, st, batch, cfg);
  CHECK(r.lambda == 0.0);
  CHECK(r.parts.cb == 0.0);
  CHECK(r.parts.cd == 0.0);
  CHECK(r.total == doctest::Approx(objective(before)).epsilon(1e-10));

  ParamSet probe = before;
  const double h = 1e-6;
  for (std::size_t t = 0; t < probe.size(); ++t)
    for (Eigen::Index k = 0; k < probe.values[t].size(); ++k) {
      const double keep = probe.values[t].data()[k];
      probe.values[t].data()[k] = keep + h;
      const double up = objective(probe);
      probe.values[t].data()[k] = keep - h;
      const double down = objective(probe);
      probe.values[t].data()[k] = keep;
      const double g = (up - down) / (2 * h);
      // First bias-corrected Adam step: lr * g / (|g| + eps).
      const double expect = keep - cfg.lr * g / (std::abs(g) + cfg.adam_eps);
      INFO(before.names[t], "[", k, "] g=", g);
      if (std::abs(g) > 1e-6) CHECK(std::abs(st.student.values[t].data()[k] - expect) <= 1e-3 * cfg.lr);
    }
  ParamSet teacher = before;
  ema_update(teacher, st.student, cfg.ema_decay);
  CHECK(identical(teacher, st.teacher));
}

TEST_CASE("student objective: forced-zero hard mask removes the segmentation consistency term") {
  TrainConfig cfg = tiny_train_config();
  const Network net(cfg.network);
  const ParamSet student = net.init_params(1);
  const Batch batch = tiny_batch(2, 8);
  Rng rng(9);
  TeacherTargets targets = teacher_targets(net, net.init_params(2), batch.unlabeled, cfg, 0.6, rng);
  for (auto& u : targets.uncertainty) u.hard.setZero();

  TermSelection only_cb{false, false, false, true, false};
  Rng r1(10);
  const StudentObjective obj = student_objective(net, student, batch, &targets, cfg, 1.0, r1, only_cb);
  CHECK(obj.report.parts.cb == 0.0);
  for (const auto& g : obj.grads.values) CHECK(g.cwiseAbs().maxCoeff() == 0.0);

  TermSelection all;
  Rng r2(10);
  const StudentObjective full = student_objective(net, student, batch, &targets, cfg, 1.0, r2, all);
  const auto& p = full.report.parts;
  CHECK(full.report.total == doctest::Approx(p.sd + cfg.alpha * p.sb + p.inherent + p.cd).epsilon(1e-12));
}

TEST_CASE("student objective: uniform soft mask gives plain MSE density consistency") {
  TrainConfig cfg = tiny_train_config();
  cfg.density_mask = MaskKind::soft;
  const Network net(cfg.network);
  const ParamSet student = net.init_params(1);
  const Batch batch = tiny_batch(2, 11);
  Rng rng(12);
  TeacherTargets targets = teacher_targets(net, student, batch.unlabeled, cfg, 0.6, rng);
  for (auto& u : targets.uncertainty) u.soft.setConstant(3.5);

  Rng r1(13), r2(13);
  const StudentObjective obj = student_objective(net, student, batch, &targets, cfg, 1.0, r1);
  const BatchOutput out = net.forward(student, [&] {
    std::vector<Grid> imgs;
    for (const auto& l : batch.labeled) imgs.push_back(l.image);
    for (const auto& u : batch.unlabeled) imgs.push_back(u);
    return imgs;
  }(), {cfg.input_noise_std, true}, r2);
  double acc = 0.0, n = 0.0;
  for (int j = 0; j < 2; ++j) {
    const Grid diff = out.sample(2 + j).density - targets.ensemble.mean_density[j];
    acc += diff.squaredNorm();
    n += static_cast<double>(diff.size());
  }
  CHECK(std::abs(obj.report.parts.cd - acc / n) <= 1e-9);
}

TEST_CASE("train_step: non-finite loss is reported") {
  TrainConfig cfg = tiny_train_config();
  const Network net(cfg.network);
  TrainerState st = init_state(net, cfg, 1);
  st.student.values.back()(0, 0) = std::nan("");
  CHECK_THROWS_AS(train_step(net, st, tiny_batch(2, 1), cfg), NumericError);
}

TEST_CASE("learning-rate schedule") {
  const TrainConfig c;
  CHECK(c.lr_at(0) == 7e-5);
  CHECK(c.lr_at(199) == 7e-5);
  CHECK(c.lr_at(200) == 7e-5 / 5.0);
  CHECK(c.lr_at(399) == 7e-5 / 5.0);
  CHECK(c.lr_at(400) == 7e-5 / 25.0);
  CHECK(c.lr_at(599) == 7e-5 / 25.0);
}

TEST_CASE("fit: label_only logs only supervised terms") {
  TrainConfig cfg = tiny_train_config();
  cfg.mode = TrainMode::label_only;
  const FitResult r = fit(cfg, tiny_dataset(1));
  int steps = 0;
  for (const auto& rec : r.history) {
    if (rec["type"] != "step") continue;
    ++steps;
    CHECK_FALSE(rec.contains("L_Cb"));
    CHECK_FALSE(rec.contains("L_Cd"));
    CHECK_FALSE(rec.contains("lambda"));
    CHECK_FALSE(rec.contains("L_c"));
    CHECK(rec.contains("L_Sd"));
    CHECK(rec.contains("L_Sb"));
  }
  CHECK(steps == 2 * r.final_state.steps_per_epoch);
  // No EMA in label_only: the teacher never moves.
  CHECK(identical(r.final_state.teacher, Network(cfg.network).init_params(cfg.seed)));
}

TEST_CASE("fit: identical seeds give identical logs and parameters") {
  TrainConfig cfg = tiny_train_config();
  const Dataset ds = tiny_dataset(2);
  std::ostringstream a, b;
  const FitResult ra = fit(cfg, ds, &a);
  const FitResult rb = fit(cfg, ds, &b);
  CHECK(a.str() == b.str());
  CHECK(identical(ra.final_state.student, rb.final_state.student));
  CHECK(identical(ra.final_state.teacher, rb.final_state.teacher));
  CHECK(identical(ra.best_student, rb.best_student));

  cfg.seed = 4;
  std::ostringstream c;
  fit(cfg, ds, &c);
  CHECK(a.str() != c.str());
}

TEST_CASE("fit: fully mode uses the unlabeled pool as labeled data") {
  TrainConfig cfg = tiny_train_config();
  cfg.mode = TrainMode::fully;
  cfg.epochs = 1;
  const Dataset ds = tiny_dataset(3);
  const FitResult r = fit(cfg, ds);
  const long long n = static_cast<long long>(ds.labeled.size() + ds.unlabeled.size());
  CHECK(r.final_state.steps_per_epoch == (n + 1) / 2);
}

TEST_CASE("fit: empty labeled pool is a configuration error") {
  Dataset ds = tiny_dataset(4);
  ds.labeled.clear();
  CHECK_THROWS_AS(fit(tiny_train_config(), ds), ConfigError);
}

TEST_CASE("config: dump/parse round trip and rejected keys") {
  TrainConfig c = tiny_train_config();
  c.mode = TrainMode::label_only;
  c.seg_mask = MaskKind::soft;
  c.lr = 0.1 + 0.2;
  const std::string text = dump_config(c);
  TrainConfig back;
  apply_overrides(back, parse_key_values(text));
  CHECK(dump_config(back) == text);
  CHECK(back.lr == c.lr);
  CHECK(back.network == c.network);

  TrainConfig d;
  CHECK_THROWS_AS(apply_overrides(d, {{"learning_rate", "1"}}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(d, {{"lr", "fast"}}), ConfigError);
  CHECK_THROWS_AS(apply_overrides(d, {{"mode", "weak"}}), ConfigError);
  CHECK_THROWS_AS(parse_key_values("lr 1"), ConfigError);
  const KeyValues kv = parse_key_values("# comment\n  lr = 0.5  # trailing\n\nbackbone = vgg16_truncated\n");
  apply_overrides(d, kv);
  CHECK(d.lr == 0.5);
  CHECK(d.network.output_stride == 8);

  TrainConfig e;
  e.patch = 30;
  CHECK_THROWS_AS(e.validate(), ConfigError);
}
