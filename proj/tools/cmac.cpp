#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>

#include "cmac/checkpoint.hpp"
#include "cmac/log.hpp"
#include "cmac/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cmac;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kCheck = 3 };

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> sets;
  bool verbose = false;
};

RunConfig resolve(const CommonArgs& a) {
  RunConfig cfg;
  if (!a.config_path.empty()) cfg = load_config(a.config_path);
  for (const std::string& s : a.sets) apply_override(cfg, s);
  if (a.seed) cfg.seed = *a.seed;
  if (!a.out.empty()) cfg.out_dir = a.out;
  cfg.validate();
  return cfg;
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  return os;
}

fs::path checkpoint_path(const RunConfig& cfg, const std::string& member) {
  if (!cfg.checkpoint.empty()) {
    fs::path p = cfg.checkpoint;
    if (member == "both" || member.empty()) return p;
    return p.parent_path() / (p.stem().string() + "_" + member + p.extension().string());
  }
  return fs::path(cfg.out_dir) / ("model_" + member + ".ckpt");
}

std::vector<DetectionSample> load_split(const fs::path& dir) {
  if (!fs::exists(dir / "manifest")) throw FormatError("dataset split missing: " + dir.string() + " (run synth first)");
  return load_dataset(dir);
}

int cmd_synth(const RunConfig& cfg) {
  auto [train, test] = synthesize(cfg);
  const SplitPaths paths = split_paths(cfg);
  save_dataset(train, paths.train);
  save_dataset(test, paths.test);
  std::size_t train_boxes = 0, test_boxes = 0;
  for (const auto& s : train) train_boxes += s.gts.size();
  for (const auto& s : test) test_boxes += s.gts.size();
  std::cout << "train " << train.size() << " scenes " << train_boxes << " boxes -> " << paths.train.string() << '\n'
            << "test " << test.size() << " scenes " << test_boxes << " boxes -> " << paths.test.string() << '\n';
  return kOk;
}

int cmd_train(const RunConfig& cfg) {
  const auto train = load_split(split_paths(cfg).train);
  fs::create_directories(cfg.out_dir);
  {
    auto os = open_out(fs::path(cfg.out_dir) / "config.txt");
    write_config(os, cfg);
  }
  Detector det = make_detector(cfg, cfg.seed);
  for (CmacModel& m : det.members) {
    const std::string name = member_name(m);
    auto log = open_out(fs::path(cfg.out_dir) / ("train_" + name + ".log"));
    TrainHooks hooks;
    hooks.log = &log;
    hooks.on_epoch_end = [&](int epoch, CmacModel& model) {
      auto params = model.parameters();
      save_checkpoint(fs::path(cfg.out_dir) / ("model_" + name + "_epoch" + std::to_string(epoch + 1) + ".ckpt"),
                      params);
      save_checkpoint(checkpoint_path(cfg, name), params);
    };
    const TrainResult r = train_model(m, cfg, train, cfg.seed, hooks);
    std::cout << name << ": " << r.steps.size() << " iterations, epoch-mean loss " << std::setprecision(5)
              << r.epoch_mean_loss.front() << " -> " << r.epoch_mean_loss.back() << '\n';
  }
  return kOk;
}

int cmd_eval(const RunConfig& cfg, bool export_maps) {
  const auto test = load_split(split_paths(cfg).test);
  Detector det = make_detector(cfg, cfg.seed);
  for (CmacModel& m : det.members) {
    auto params = m.parameters();
    load_checkpoint(checkpoint_path(cfg, member_name(m)), params);
  }
  const EvalResult r =
      evaluate([&](const DetectionSample& s, std::span<const Box> b) { return det.score(s, b); }, test, cfg);
  fs::create_directories(cfg.out_dir);
  {
    auto os = open_out(fs::path(cfg.out_dir) / "detections.txt");
    write_detections(os, r.detections);
  }
  {
    auto os = open_out(fs::path(cfg.out_dir) / "metrics.txt");
    write_metrics_report(os, r.ap);
  }
  write_metrics_report(std::cout, r.ap);
  if (export_maps) {
    CmacModel* with_global = nullptr;
    for (CmacModel& m : det.members) {
      if (m.config().use_global && !with_global) with_global = &m;
    }
    if (!with_global) {
      std::cerr << "--export-attention needs use_global_attention = true\n";
      return kUsage;
    }
    const auto n = export_attention(*with_global, test, cfg, fs::path(cfg.out_dir) / "attention");
    std::cout << "exported " << n << " attention maps\n";
  }
  return kOk;
}

int cmd_ablate(const RunConfig& cfg) {
  const SplitPaths paths = split_paths(cfg);
  const auto train = load_split(paths.train);
  const auto test = load_split(paths.test);
  const AblationTable table = run_ablation(cfg, train, test, &std::cerr, fs::path(cfg.out_dir) / "logs");
  fs::create_directories(cfg.out_dir);
  auto os = open_out(fs::path(cfg.out_dir) / "ablation.txt");
  write_ablation_table(os, table);
  write_ablation_table(std::cout, table);
  return kOk;
}

int cmd_sweep(const RunConfig& cfg, const std::string& key) {
  std::vector<int> values;
  if (key == "T_steps") {
    values = {2, 3, 4, 5};
  } else if (key == "N_stn") {
    values = {1, 2, 3};
  } else {
    std::cerr << "sweep: key must be T_steps or N_stn\n";
    return kUsage;
  }
  const SplitPaths paths = split_paths(cfg);
  const auto train = load_split(paths.train);
  const auto test = load_split(paths.test);
  const auto rows = run_sweep(cfg, key, values, train, test, &std::cerr);
  fs::create_directories(cfg.out_dir);
  auto os = open_out(fs::path(cfg.out_dir) / ("sweep_" + key + ".txt"));
  write_sweep_report(os, key, rows, cfg.C);
  write_sweep_report(std::cout, key, rows, cfg.C);
  return kOk;
}

int cmd_gradcheck(const RunConfig& cfg) {
  const auto reports = run_gradcheck(cfg, cfg.seed);
  write_gradcheck_report(std::cout, reports);
  const bool ok = std::all_of(reports.begin(), reports.end(), [](const GroupReport& g) { return g.passed(); });
  std::cout << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return ok ? kOk : kCheck;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal attentional context detector on synthetic RGB-D scenes"};
  app.require_subcommand(1);
  CommonArgs common;
  bool export_maps = false;
  std::string sweep_key;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "key = value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "base seed");
    sub->add_option("--out", common.out, "output directory");
    sub->add_option("--set", common.sets, "override one configuration key (key=value), repeatable");
    sub->add_flag("-v,--verbose", common.verbose, "log progress to stderr");
  };
  auto* synth = app.add_subcommand("synth", "write the synthetic train/test splits");
  auto* train = app.add_subcommand("train", "train a detector and write checkpoints and logs");
  auto* eval = app.add_subcommand("eval", "evaluate a trained detector on the test split");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate the five attention/fusion variants");
  auto* gradcheck = app.add_subcommand("gradcheck", "compare analytic and numeric gradients per parameter group");
  auto* sweep = app.add_subcommand("sweep", "vary T_steps or N_stn for the full model");
  for (auto* s : {synth, train, eval, ablate, gradcheck, sweep}) add_common(s);
  eval->add_flag("--export-attention", export_maps, "write attention graymaps and part windows");
  sweep->add_option("key", sweep_key, "T_steps or N_stn")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }
  if (common.verbose) log::set_level(log::Level::info);

  try {
    const RunConfig cfg = resolve(common);
    if (*synth) return cmd_synth(cfg);
    if (*train) return cmd_train(cfg);
    if (*eval) return cmd_eval(cfg, export_maps);
    if (*ablate) return cmd_ablate(cfg);
    if (*sweep) return cmd_sweep(cfg, sweep_key);
    if (*gradcheck) return cmd_gradcheck(cfg);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
