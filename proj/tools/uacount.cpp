#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "uacount/config.hpp"
#include "uacount/data.hpp"
#include "uacount/errors.hpp"
#include "uacount/eval.hpp"
#include "uacount/model.hpp"
#include "uacount/presets.hpp"
#include "uacount/runtime.hpp"
#include "uacount/trainer.hpp"

namespace fs = std::filesystem;
using namespace uacount;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  std::vector<std::string> set;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value configuration file")->check(CLI::ExistingFile);
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&c](const std::uint64_t& s) {
        c.seed = s;
        c.seed_set = true;
      },
      "seed for all randomness");
  cmd->add_option("--out", c.out, "output directory (default: $UACOUNT_OUT/<command>)");
}

fs::path out_dir(const Common& c, const std::string& command) {
  if (!c.out.empty()) return c.out;
  const char* root = std::getenv("UACOUNT_OUT");
  return fs::path(root && *root ? root : "runs") / command;
}

void make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw DataError("cannot create output directory " + p.string() + ": " + ec.message());
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out || !(out << text)) throw DataError("cannot write " + p.string());
}

KeyValues parse_sets(const std::vector<std::string>& sets) {
  KeyValues kv;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv[s.substr(0, eq)] = s.substr(eq + 1);
  }
  return kv;
}

// Defaults, then the profile, then the config file, then --set and dedicated flags.
TrainConfig build_config(const Common& c, const std::string& profile) {
  TrainConfig cfg;
  if (profile == "desk") apply_overrides(cfg, desk_overrides());
  else if (profile != "full") throw ConfigError("unknown profile '" + profile + "' (expected desk or full)");
  if (!c.config.empty()) apply_overrides(cfg, read_key_values(c.config));
  apply_overrides(cfg, parse_sets(c.set));
  if (c.seed_set) cfg.seed = c.seed;
  return cfg;
}

nlohmann::json checkpoint_metadata(const TrainConfig& cfg, const std::string& role, int epoch) {
  return {{"role", role}, {"mode", to_string(cfg.mode)}, {"seed", cfg.seed}, {"epoch", epoch},
          {"config", dump_config(cfg)}};
}

const std::vector<Scene>& pick_split(const Dataset& ds, const std::string& split) {
  if (split == "test") return ds.test;
  if (split == "val") return ds.val;
  if (split == "labeled") return ds.labeled;
  if (split == "unlabeled") return ds.unlabeled;
  throw ConfigError("unknown split '" + split + "'");
}

// Trains one configuration into dir; returns the evaluation of the best student.
EvalResult train_run(const TrainConfig& cfg, const Dataset& ds, const fs::path& dir, bool verbose) {
  make_dir(dir);
  write_text(dir / "config.cfg", dump_config(cfg));
  std::ofstream log(dir / "metrics.jsonl");
  if (!log) throw DataError("cannot write " + (dir / "metrics.jsonl").string());
  const FitResult r = fit(cfg, ds, &log);
  save_checkpoint(dir / "best.ckpt", {cfg.network, r.best_student, checkpoint_metadata(cfg, "student", r.best_epoch)});
  save_checkpoint(dir / "final.ckpt",
                  {cfg.network, r.final_state.student, checkpoint_metadata(cfg, "student", r.epochs_run - 1)});
  save_checkpoint(dir / "teacher.ckpt",
                  {cfg.network, r.final_state.teacher, checkpoint_metadata(cfg, "teacher", r.epochs_run - 1)});

  const Network net(cfg.network);
  const bool has_test = !ds.test.empty();
  const EvalResult ev = evaluate(net, r.best_student, has_test ? ds.test : ds.val, cfg.max_inference_side);
  nlohmann::json summary{{"mode", to_string(cfg.mode)},
                         {"seed", cfg.seed},
                         {"epochs_run", r.epochs_run},
                         {"best_epoch", r.best_epoch},
                         {"best_val_mae", r.best_val_mae},
                         {"eval_split", has_test ? "test" : "val"},
                         {"mae", ev.mae},
                         {"rmse", ev.rmse}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  if (verbose) {
    std::cout << "trained " << r.epochs_run << " epochs, best validation MAE " << r.best_val_mae << " at epoch "
              << r.best_epoch << "\n"
              << (has_test ? "test" : "val") << " MAE " << ev.mae << "  RMSE " << ev.rmse << "\n"
              << "outputs in " << dir.string() << "\n";
  }
  return ev;
}

int cmd_generate(const Common& c, int n, double split, int test, int size, int min_count, int max_count,
                 double clutter) {
  GenerateOptions g;
  g.count = n;
  g.labeled_fraction = split;
  g.test_count = test;
  g.height = g.width = size;
  g.count_range = {min_count, max_count};
  g.clutter_level = clutter;
  if (!c.config.empty()) {
    for (const auto& [k, v] : read_key_values(c.config)) {
      try {
        if (k == "n") g.count = std::stoi(v);
        else if (k == "split") g.labeled_fraction = std::stod(v);
        else if (k == "test") g.test_count = std::stoi(v);
        else if (k == "size") g.height = g.width = std::stoi(v);
        else if (k == "min_count") g.count_range.min = std::stoi(v);
        else if (k == "max_count") g.count_range.max = std::stoi(v);
        else if (k == "clutter") g.clutter_level = std::stod(v);
        else throw ConfigError("unknown generate key '" + k + "'");
      } catch (const std::logic_error&) {
        throw ConfigError("generate key '" + k + "': bad value '" + v + "'");
      }
    }
  }
  if (g.count < 1) throw ConfigError("--n must be at least 1");
  g.seed = c.seed;
  const fs::path dir = out_dir(c, "generate");
  const Dataset ds = generate_dataset(g);
  save_dataset(ds, dir);
  const std::string frozen = "n = " + std::to_string(g.count) + "\nsplit = " + std::to_string(g.labeled_fraction) +
                             "\ntest = " + std::to_string(g.test_count) + "\nsize = " + std::to_string(g.height) +
                             "\nmin_count = " + std::to_string(g.count_range.min) +
                             "\nmax_count = " + std::to_string(g.count_range.max) +
                             "\nclutter = " + std::to_string(g.clutter_level) + "\nseed = " + std::to_string(g.seed) +
                             "\n";
  write_text(dir / "generate.cfg", frozen);
  std::cout << ds.labeled.size() << " labeled / " << ds.unlabeled.size() << " unlabeled / " << ds.val.size()
            << " val / " << ds.test.size() << " test scenes written to " << dir.string() << "\n";
  return kOk;
}

int cmd_train(const Common& c, const std::string& profile, const std::string& data, const std::string& mode,
              int epochs) {
  TrainConfig cfg = build_config(c, profile);
  if (!mode.empty()) cfg.mode = parse_mode(mode);
  if (epochs > 0) cfg.epochs = epochs;
  cfg.validate();
  const Dataset ds = load_dataset(data);
  train_run(cfg, ds, out_dir(c, "train"), true);
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data, const std::string& split,
             int max_side) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data);
  const std::vector<Scene>& scenes = pick_split(ds, split);
  if (scenes.empty()) throw DataError("split '" + split + "' of " + data + " is empty");
  const Network net(ck.config);
  const EvalResult r = evaluate(net, ck.params, scenes, max_side);
  const fs::path dir = out_dir(c, "eval");
  make_dir(dir);
  nlohmann::json j = r;
  j["checkpoint"] = checkpoint;
  j["split"] = split;
  write_text(dir / "eval.json", j.dump(2) + "\n");
  write_text(dir / "eval.txt", format_table(r));
  std::cout << format_table(r);
  return kOk;
}

int cmd_export(const Common& c, const std::string& checkpoint, const std::string& teacher_path,
               const std::string& data, const std::string& scene_id, ExportOptions o) {
  const Checkpoint student = load_checkpoint(checkpoint);
  const Checkpoint teacher = teacher_path.empty() ? student : load_checkpoint(teacher_path);
  if (!(teacher.config == student.config)) throw DataError("teacher and student checkpoints use different networks");
  const Dataset ds = load_dataset(data);
  const Scene* scene = nullptr;
  for (const auto* split : {&ds.test, &ds.val, &ds.labeled, &ds.unlabeled})
    for (const auto& s : *split)
      if (!scene && (scene_id.empty() || s.id == scene_id)) scene = &s;
  if (!scene) throw DataError("scene '" + scene_id + "' not found in " + data);
  if (!student.metadata.is_null() && student.metadata.contains("config")) {
    TrainConfig cfg;
    apply_overrides(cfg, parse_key_values(student.metadata["config"].get<std::string>()));
    o.transform_gain = cfg.transform_gain;
    o.soft_weight = cfg.soft_weight;
    o.input_noise_std = cfg.input_noise_std;
    o.sigma = cfg.sigma;
  }
  if (c.seed_set) o.seed = c.seed;
  const fs::path dir = out_dir(c, "export") / scene->id;
  const Network net(student.config);
  for (const auto& f : export_maps(net, student.params, teacher.params, *scene, dir, o)) std::cout << f.string() << "\n";
  return kOk;
}

int cmd_ablate(const Common& c, const std::string& profile, const std::string& data, const std::string& group) {
  const TrainConfig base = build_config(c, profile);
  const Dataset ds = load_dataset(data);
  const auto presets = preset_group(group, ds);
  const fs::path dir = out_dir(c, "ablate") / group;
  make_dir(dir);
  std::string table = "variant                  MAE       RMSE\n";
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& p : presets) {
    const TrainConfig cfg = resolve(base, p);
    const EvalResult ev = train_run(cfg, restrict_pools(ds, p), dir / p.name, false);
    char line[128];
    std::snprintf(line, sizeof(line), "%-22s %8.4f  %8.4f\n", p.name.c_str(), ev.mae, ev.rmse);
    table += line;
    std::cout << line << std::flush;
    rows.push_back({{"variant", p.name}, {"mae", ev.mae}, {"rmse", ev.rmse}});
  }
  write_text(dir / "results.txt", table);
  write_text(dir / "results.json", rows.dump(2) + "\n");
  std::cout << "\n" << table;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Semi-supervised crowd counting with spatial uncertainty"};
  app.require_subcommand(1);

  Common gen_c, train_c, eval_c, export_c, ablate_c;

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  add_common(gen, gen_c);
  int n = 120, test = 30, size = 64, min_count = 4, max_count = 24;
  double split = 0.5, clutter = 0.8;
  gen->add_option("--n", n, "training scenes (labeled + unlabeled + val)")->check(CLI::PositiveNumber);
  gen->add_option("--split", split, "labeled fraction of the non-validation scenes")->check(CLI::Range(0.0, 1.0));
  gen->add_option("--test", test, "held-out test scenes")->check(CLI::NonNegativeNumber);
  gen->add_option("--size", size, "scene side length in pixels")->check(CLI::Range(32, 4096));
  gen->add_option("--min-count", min_count, "fewest people per scene")->check(CLI::NonNegativeNumber);
  gen->add_option("--max-count", max_count, "most people per scene")->check(CLI::NonNegativeNumber);
  gen->add_option("--clutter", clutter, "background clutter level")->check(CLI::Range(0.0, 1.0));

  std::string profile = "desk", data, mode, checkpoint, teacher, split_name = "test", scene_id, group;
  int epochs = 0, max_side = 1024;
  ExportOptions xo;

  auto* train = app.add_subcommand("train", "train a model on a dataset");
  add_common(train, train_c);
  train->add_option("--data", data, "dataset directory")->required();
  train->add_option("--mode", mode, "semi, label_only or fully");
  train->add_option("--epochs", epochs, "override the epoch count")->check(CLI::PositiveNumber);
  train->add_option("--profile", profile, "base schedule: desk (CPU scale) or full");
  train->add_option("--set", train_c.set, "extra key=value overrides");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, eval_c);
  ev->add_option("--checkpoint", checkpoint, "student checkpoint")->required();
  ev->add_option("--data", data, "dataset directory")->required();
  ev->add_option("--split", split_name, "test, val, labeled or unlabeled");
  ev->add_option("--max-side", max_side, "tile images with a longer side")->check(CLI::PositiveNumber);

  auto* ex = app.add_subcommand("export", "write density, segmentation and uncertainty maps");
  add_common(ex, export_c);
  ex->add_option("--checkpoint", checkpoint, "student checkpoint")->required();
  ex->add_option("--teacher", teacher, "teacher checkpoint for the uncertainty maps (default: the student)");
  ex->add_option("--data", data, "dataset directory")->required();
  ex->add_option("--scene", scene_id, "scene id (default: first test scene)");
  ex->add_option("--passes", xo.mc_passes, "stochastic passes T")->check(CLI::PositiveNumber);
  ex->add_option("--threshold", xo.threshold, "hard-mask entropy threshold (default ln 2)");

  auto* ab = app.add_subcommand("ablate", "train every variant of a preset group");
  add_common(ab, ablate_c);
  ab->add_option("--preset", group, "table1, table2, fig4_labeled or fig4_unlabeled")->required();
  ab->add_option("--data", data, "dataset directory")->required();
  ab->add_option("--profile", profile, "base schedule: desk (CPU scale) or full");
  ab->add_option("--set", ablate_c.set, "extra key=value overrides");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) return cmd_generate(gen_c, n, split, test, size, min_count, max_count, clutter);
    if (*train) return cmd_train(train_c, profile, data, mode, epochs);
    if (*ev) return cmd_eval(eval_c, checkpoint, data, split_name, max_side);
    if (*ex) return cmd_export(export_c, checkpoint, teacher, data, scene_id, xo);
    if (*ab) return cmd_ablate(ablate_c, profile, data, group);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
