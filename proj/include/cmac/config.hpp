#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "cmac/model.hpp"
#include "cmac/synth.hpp"

namespace cmac {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  // Model dimensions.
  int K = 8;
  int S = 4;
  int D = 32;
  int d = 32;
  int d_fc = 64;
  int T_steps = 4;
  int N_stn = 2;
  int C = 3;
  int backbone_channels = 16;
  bool fan_in_init = true;  // false: fixed deviations fc_std / conv_std
  double fc_std = 0.01;
  double conv_std = 0.001;
  double modality_gain = 1.0;  // 0 disables per-stream normalization
  double context_gain = 3.0;   // 0 feeds the raw context vector to the projection
  double part_gain = 3.0;

  // Training schedule.
  int batch_size = 128;
  double fg_fraction = 0.25;
  int images_per_batch = 2;
  double lr = 0.001;
  double momentum = 0.9;
  double lr_decay_factor = 0.1;
  int decay_every_epochs = 4;
  int epochs = 10;
  double flip_prob = 0.5;
  std::uint64_t seed = 0;

  // Ablation switches.
  bool use_global_attention = true;
  bool use_part_attention = true;
  bool use_depth_stream = true;
  bool use_cross_modal_fusion = true;

  // Data.
  int image_size = 64;
  int train_scenes = 200;
  int test_scenes = 50;
  double occlusion_prob = 0.5;
  double room_class_bias = 0.9;
  int train_per_gt = 16;
  int train_background = 48;
  int test_per_gt = 8;
  int test_background = 24;
  double jitter_shift = 0.25;
  double jitter_scale = 1.4;

  // Evaluation and harness.
  double nms_thresh = 0.3;
  double score_floor = 0.001;
  bool normalize_targets = false;  // divide regression targets by (0.1, 0.1, 0.2, 0.2)
  int ablate_seeds = 3;
  int gradcheck_rois = 6;
  int gradcheck_coords = 24;
  double gradcheck_tolerance = 1e-4;

  // Paths (empty = derived from --out).
  std::string data_dir;
  std::string out_dir = "run";
  std::string checkpoint;

  // Throws ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  void validate() const;

  ModelConfig model_config(Modality modality) const;
  SceneSpec scene_spec() const;
  ProposalJitter jitter() const;

  std::filesystem::path data_path() const;
};

// `key = value` lines; blank lines and text after '#' are ignored.
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
// Applies one `key=value` override.
void apply_override(RunConfig& cfg, const std::string& assignment);
// Every field as `key = value` lines, loadable by load_config.
void write_config(std::ostream& os, const RunConfig& cfg);

}  // namespace cmac
