#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cmac/config.hpp"
#include "cmac/eval.hpp"
#include "cmac/gradcheck.hpp"
#include "cmac/model.hpp"
#include "cmac/synth.hpp"

// Training, evaluation and the experiment drivers behind the command line.
namespace cmac {

// Stable 64-bit hash of a string (FNV-1a).
std::uint64_t stable_hash(const std::string& s);

struct SplitPaths {
  std::filesystem::path train;
  std::filesystem::path test;
};
SplitPaths split_paths(const RunConfig& cfg);

// Generates both splits from cfg.seed. Scene i of a split uses its own stream.
std::pair<std::vector<DetectionSample>, std::vector<DetectionSample>> synthesize(const RunConfig& cfg);

// Proposal sets are tied to the image, not to the model seed.
std::vector<Box> train_proposals(const DetectionSample& sample, const RunConfig& cfg);
std::vector<Box> test_proposals(const DetectionSample& sample, const RunConfig& cfg);

struct TrainStep {
  int iter = 0;
  int epoch = 0;  // 0-based
  double loss = 0.0;
  double loss_cls = 0.0;
  double loss_loc = 0.0;
  double lr = 0.0;
  int fg = 0;
  int bg = 0;
  int images = 0;
  int flips = 0;
};

struct TrainResult {
  std::vector<TrainStep> steps;
  std::vector<double> epoch_mean_loss;
};

struct TrainHooks {
  std::ostream* log = nullptr;                                  // header + one line per iteration
  std::function<void(int epoch, CmacModel& model)> on_epoch_end;  // e.g. checkpointing
};

// `iter epoch loss loss_cls loss_loc lr fg bg images flips`
void write_train_header(std::ostream& os, const RunConfig& cfg);
void write_train_step(std::ostream& os, const TrainStep& s);
// Parses a log written by the two functions above (comment lines start with '#').
std::vector<TrainStep> read_train_log(std::istream& is);

TrainResult train_model(CmacModel& model, const RunConfig& cfg, std::span<const DetectionSample> train,
                        std::uint64_t seed, const TrainHooks& hooks = {});

// One fused model, or two single-modality members whose scores are averaged.
struct Detector {
  std::vector<CmacModel> members;
  bool late_fusion() const { return members.size() > 1; }
  Scores score(const DetectionSample& sample, std::span<const Box> rois);
};

Detector make_detector(const RunConfig& cfg, std::uint64_t seed);
std::string member_name(const CmacModel& m);

struct EvalResult {
  std::vector<Detection> detections;
  std::map<int, std::optional<double>> ap;
  double map = 0.0;
};

using Scorer = std::function<Scores(const DetectionSample&, std::span<const Box>)>;

// Per proposal: the box is refined with the offsets of the most likely object
// class and reported once per class with that class's probability as score;
// then per-class NMS and AP against the ground truth.
EvalResult evaluate(const Scorer& scorer, std::span<const DetectionSample> test, const RunConfig& cfg);

// Writes one graymap per evaluated proposal (plus part-window sidecars) into
// `dir`; returns the number written. Needs a model with global attention.
std::size_t export_attention(CmacModel& model, std::span<const DetectionSample> test, const RunConfig& cfg,
                             const std::filesystem::path& dir);

struct AblationVariant {
  std::string name;
  bool global = false;
  bool part = false;
  bool fusion = false;
};
const std::vector<AblationVariant>& ablation_variants();

struct AblationTable {
  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds;
  std::vector<std::vector<double>> map;  // [variant][seed]
  std::vector<std::uint64_t> attention_calls;  // attention-module runs per variant, training and evaluation
  double mean(std::size_t variant) const;
};

// With a nonempty `log_dir`, every trained member writes
// `train_<variant>_seed<seed>_<member>.log` there.
AblationTable run_ablation(const RunConfig& cfg, std::span<const DetectionSample> train,
                           std::span<const DetectionSample> test, std::ostream* progress = nullptr,
                           const std::filesystem::path& log_dir = {});
std::string ablation_log_name(const std::string& variant, std::uint64_t seed, const std::string& member);
void write_ablation_table(std::ostream& os, const AblationTable& table);

struct SweepRow {
  int value = 0;
  EvalResult result;
};

// Trains and evaluates the full model once per value of `key` (T_steps or N_stn).
std::vector<SweepRow> run_sweep(const RunConfig& cfg, const std::string& key, const std::vector<int>& values,
                                std::span<const DetectionSample> train, std::span<const DetectionSample> test,
                                std::ostream* progress = nullptr);
void write_sweep_report(std::ostream& os, const std::string& key, std::span<const SweepRow> rows, int classes);

// Full fused model with both attention modules on one synthetic image.
std::vector<GroupReport> run_gradcheck(const RunConfig& cfg, std::uint64_t seed);

}  // namespace cmac
