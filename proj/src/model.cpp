#include "cmac/model.hpp"

#include <algorithm>
#include <cstdlib>

namespace cmac {

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::rgb:
      return "rgb";
    case Modality::depth:
      return "depth";
    case Modality::both:
      return "both";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (classes < 1 || K == 0 || S == 0 || D == 0 || d == 0 || d_fc == 0 || backbone_channels == 0) {
    throw ContractError("model config: all dimensions must be positive");
  }
  if (use_global && steps == 0) throw ContractError("model config: global attention needs at least one step");
  if (use_part && transformers == 0) throw ContractError("model config: part attention needs a transformer");
  if (modality_gain < 0 || context_gain < 0 || part_gain <= 0) throw ContractError("model config: gains must be >= 0 and part_gain > 0");
}

Backbone::Backbone(const std::string& prefix, const std::string& group, std::size_t channels)
    : conv1(prefix + ".conv1", group, 3, channels, 5, 2, 2), conv2(prefix + ".conv2", group, channels, channels, 3, 2, 1) {}

void Backbone::init(Rng& rng) {
  init_he(conv1.weight, conv1.fan_in(), rng);
  init_he(conv2.weight, conv2.fan_in(), rng);
}

Var Backbone::forward(Tape& tape, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("backbone: expected a [3 x H x W] image, got " + shape_str(image.shape()));
  }
  Tensor centered = image;
  for (double& v : centered.storage()) v -= 0.5;
  Var x = activation(conv1.forward(tape, tape.constant(std::move(centered))), Activation::relu);
  return activation(conv2.forward(tape, x), Activation::relu);
}

void Backbone::collect(std::vector<Parameter*>& out) {
  conv1.collect(out);
  conv2.collect(out);
}

CmacModel::CmacModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const std::size_t c = config_.backbone_channels;
  std::size_t fused = 0;
  if (config_.modality != Modality::depth) {
    rgb_.emplace("backbone.rgb", "backbone_rgb", c);
    fused += c;
  }
  if (config_.modality != Modality::rgb) {
    depth_.emplace("backbone.depth", "backbone_depth", c);
    fused += c;
  }
  embed_ = FusionEmbedParams(fused, config_.D);
  if (config_.use_global) {
    global_ = GlobalContextParams(
        {config_.K, config_.D, config_.d, config_.d_fc, config_.steps, config_.context_gain});
  }
  part_ = PartAttentionParams(
      {config_.D, config_.S, config_.d, config_.d_fc, config_.use_part ? config_.transformers : 0, config_.part_gain});
  head_ = HeadParams(config_.d_fc, config_.use_global ? config_.d_fc : 0, config_.classes);

  Rng rng(seed);
  if (rgb_) rgb_->init(rng);
  if (depth_) depth_->init(rng);
  embed_.init(config_.init, rng);
  if (config_.use_global) global_.init(config_.init, rng);
  part_.init(config_.init, rng);
  head_.init(config_.init, rng);
}

ImageOutput CmacModel::forward(Tape& tape, const Tensor& rgb, const Tensor& geo, std::span<const Box> rois) {
  if (rois.empty()) throw ContractError("model forward: no proposals");
  const double scale = 1.0 / kFeatureStride;
  std::optional<Var> rgb_map, depth_map;
  if (rgb_) rgb_map = rgb_->forward(tape, rgb);
  if (depth_) depth_map = depth_->forward(tape, geo);

  // The two backbones can differ in activation scale by several times, which
  // lets one stream swamp the other in the fused embedding. Each pooled cube
  // (the global one, and every ROI's local one) is brought to a fixed RMS.
  const double gain = config_.modality_gain;
  auto balance = [&](Var rows) {
    const std::size_t n = rows.value().numel() / rows.dim(0);
    return cmac::scale(l2_normalize(rows), gain * std::sqrt(static_cast<double>(n)));
  };
  auto global_of = [&](const std::optional<Var>& m) -> std::optional<Var> {
    if (!m) return std::nullopt;
    Var g = pool_global(*m, config_.K);
    if (gain <= 0) return g;
    const Shape shape = g.shape();
    return reshape(balance(reshape(g, {1, g.value().numel()})), shape);
  };
  auto local_of = [&](const std::optional<Var>& m) -> std::optional<Var> {
    if (!m) return std::nullopt;
    Var l = roi_pool(*m, rois, scale, config_.S);
    return gain > 0 ? balance(l) : l;
  };
  FusedFeatures f = embed_context(tape, embed_, fuse(global_of(rgb_map), global_of(depth_map)),
                                  fuse(local_of(rgb_map), local_of(depth_map)));

  ImageOutput out;
  std::optional<Var> global_feature;
  if (config_.use_global) {
    out.global = run_global_context(tape, global_, f.global_slices, f.z, config_.steps);
    global_feature = project_global(tape, global_, out.global->context);
  }
  out.parts = run_part_attention(tape, part_, f.local_embedded, config_.use_part);
  out.probs = classify(tape, head_, out.parts->local_feature, global_feature);
  out.offsets = regress(tape, head_, out.parts->local_feature);
  return out;
}

std::vector<Parameter*> CmacModel::parameters() {
  std::vector<Parameter*> out;
  if (rgb_) rgb_->collect(out);
  if (depth_) depth_->collect(out);
  embed_.collect(out);
  if (config_.use_global) global_.collect(out);
  part_.collect(out);
  head_.collect(out);
  return out;
}

std::vector<std::string> CmacModel::groups() {
  std::vector<std::string> out;
  for (Parameter* p : parameters()) {
    if (std::find(out.begin(), out.end(), p->group) == out.end()) out.push_back(p->group);
  }
  return out;
}

Scores predict(CmacModel& model, const Tensor& rgb, const Tensor& geo, std::span<const Box> rois) {
  Tape tape(false);
  ImageOutput out = model.forward(tape, rgb, geo, rois);
  return Scores{out.probs.value(), out.offsets.value()};
}

Scores average_scores(std::span<const Scores> members) {
  if (members.empty()) throw ContractError("average_scores: no members");
  Scores avg = members[0];
  for (std::size_t m = 1; m < members.size(); ++m) {
    if (members[m].probs.shape() != avg.probs.shape() || members[m].offsets.shape() != avg.offsets.shape()) {
      throw DimensionError("average_scores: member outputs differ in shape");
    }
    for (std::size_t i = 0; i < avg.probs.numel(); ++i) avg.probs[i] += members[m].probs[i];
    for (std::size_t i = 0; i < avg.offsets.numel(); ++i) avg.offsets[i] += members[m].offsets[i];
  }
  const double k = static_cast<double>(members.size());
  for (double& v : avg.probs.storage()) v /= k;
  for (double& v : avg.offsets.storage()) v /= k;
  return avg;
}

}  // namespace cmac
