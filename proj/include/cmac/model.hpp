#pragma once

#include <optional>
#include <span>
#include <vector>

#include "cmac/detection_head.hpp"
#include "cmac/global_context.hpp"
#include "cmac/part_attention.hpp"
#include "cmac/roi_fusion.hpp"

namespace cmac {

enum class Modality { rgb, depth, both };

const char* modality_name(Modality m);

struct ModelConfig {
  std::size_t classes = 3;
  std::size_t K = 8;
  std::size_t S = 4;
  std::size_t D = 32;
  std::size_t d = 32;
  std::size_t d_fc = 64;
  std::size_t steps = 4;
  std::size_t transformers = 2;
  std::size_t backbone_channels = 16;
  double modality_gain = 1.0;  // > 0: pooled cubes of each stream normalized to this RMS
  double context_gain = 3.0;   // see GlobalContextConfig
  double part_gain = 3.0;      // see PartAttentionConfig::block_gain
  bool use_global = true;
  bool use_part = true;
  Modality modality = Modality::both;
  InitScheme init;

  void validate() const;
};

// Two convolutions (5x5 stride 2, 3x3 stride 2) with relu: [3 x H x W] -> [c x H/4 x W/4].
struct Backbone {
  Conv conv1;
  Conv conv2;

  Backbone() = default;
  Backbone(const std::string& prefix, const std::string& group, std::size_t channels);
  void init(Rng& rng);
  Var forward(Tape& tape, const Tensor& image);
  void collect(std::vector<Parameter*>& out);
};

inline constexpr double kFeatureStride = 4.0;

struct ImageOutput {
  Var probs;    // [R x C+1]
  Var offsets;  // [R x 4C]
  std::optional<GlobalContextResult> global;
  std::optional<PartAttentionResult> parts;
};

class CmacModel {
 public:
  CmacModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Forward pass for the proposals of one image.
  ImageOutput forward(Tape& tape, const Tensor& rgb, const Tensor& geo, std::span<const Box> rois);

  std::vector<Parameter*> parameters();
  // Names of parameter groups in reporting order.
  std::vector<std::string> groups();

 private:
  ModelConfig config_;
  std::optional<Backbone> rgb_;
  std::optional<Backbone> depth_;
  FusionEmbedParams embed_;
  GlobalContextParams global_;
  PartAttentionParams part_;
  HeadParams head_;
};

// Class probabilities and offsets as plain tensors for evaluation.
struct Scores {
  Tensor probs;
  Tensor offsets;
};

Scores predict(CmacModel& model, const Tensor& rgb, const Tensor& geo, std::span<const Box> rois);

// Late fusion of independently trained single-modality models: probabilities
// and offsets are averaged.
Scores average_scores(std::span<const Scores> members);

}  // namespace cmac
