#include "cmac/detection_head.hpp"

#include <cmath>
#include <cstdlib>

#include "cmac/eval.hpp"
#include "cmac/log.hpp"

namespace cmac {

HeadParams::HeadParams(std::size_t local_width, std::size_t global_width, std::size_t classes)
    : cls("head.cls", "heads", local_width + global_width, classes + 1),
      loc("head.loc", "heads", local_width, 4 * classes) {}

void HeadParams::init(const InitScheme& scheme, Rng& rng) {
  // Output layers always start small so early offsets stay near identity,
  // whatever scheme the hidden layers use.
  init_gaussian(cls.weight, scheme.fc_std, rng);
  init_gaussian(loc.weight, scheme.fc_std, rng);
}

void HeadParams::collect(std::vector<Parameter*>& out) {
  cls.collect(out);
  loc.collect(out);
}

Var classify(Tape& tape, HeadParams& params, Var local_feature, std::optional<Var> global_feature) {
  Var input = local_feature;
  if (global_feature) {
    const Var parts[] = {local_feature, *global_feature};
    input = concat_cols(parts);
  }
  return softmax(params.cls.forward(tape, input));
}

Var regress(Tape& tape, HeadParams& params, Var local_feature) {
  return params.loc.forward(tape, local_feature);
}

Offsets encode_targets(const Box& proposal, const Box& gt) {
  const double pw = proposal.width(), ph = proposal.height();
  const double gw = gt.width(), gh = gt.height();
  if (!(pw > 0 && ph > 0 && gw > 0 && gh > 0)) {
    throw ContractError("encode_targets: boxes need positive width and height");
  }
  const double px = proposal.x1 + 0.5 * pw, py = proposal.y1 + 0.5 * ph;
  const double gx = gt.x1 + 0.5 * gw, gy = gt.y1 + 0.5 * gh;
  return {(gx - px) / pw, (gy - py) / ph, std::log(gw / pw), std::log(gh / ph)};
}

Box decode_box(const Box& proposal, const Offsets& o) {
  const double pw = proposal.width(), ph = proposal.height();
  const double px = proposal.x1 + 0.5 * pw, py = proposal.y1 + 0.5 * ph;
  const double cx = px + o[0] * pw, cy = py + o[1] * ph;
  const double w = pw * std::exp(o[2]), h = ph * std::exp(o[3]);
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

double cross_entropy(std::span<const double> probs, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs.size()) {
    throw ContractError("cross_entropy: label out of range");
  }
  double p = probs[static_cast<std::size_t>(label)];
  if (p < 1e-12) {
    log::warn("classification probability below 1e-12 clamped before log");
    p = 1e-12;
  }
  return -std::log(p);
}

double multitask_loss(std::span<const double> probs, int label, const Offsets& t_u, const Offsets& v) {
  double loss = cross_entropy(probs, label);
  if (label >= 1) {
    double loc = 0.0;
    for (std::size_t k = 0; k < 4; ++k) loc += smooth_l1(t_u[k] - v[k]);
    loss += loc;
  }
  return loss;
}

LossTerms multitask_loss(Var probs, Var offsets, std::span<const int> labels, const Tensor& targets) {
  Var cls = mean(nll_of_probs(probs, labels));
  Var loc = mean(localization_loss(offsets, labels, targets));
  return LossTerms{add(cls, loc), cls, loc};
}

std::pair<double, int> max_iou(const Box& box, std::span<const LabeledBox> gts) {
  double best = 0.0;
  int idx = -1;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    const double o = iou(box, gts[g].box);
    if (idx < 0 || o > best) {
      best = o;
      idx = static_cast<int>(g);
    }
  }
  return {best, idx};
}

namespace {

// Draws `quota` indices from `pool`: a without-replacement prefix of a
// Fisher-Yates shuffle, topped up with uniform repeats when the pool is short.
std::vector<std::size_t> draw(std::vector<std::size_t> pool, std::size_t quota, Rng& rng) {
  std::vector<std::size_t> out;
  if (pool.empty() || quota == 0) return out;
  for (std::size_t i = pool.size(); i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(pool[i - 1], pool[j]);
  }
  const std::size_t take = std::min(quota, pool.size());
  out.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
  while (out.size() < quota) out.push_back(pool[rng.below(pool.size())]);
  return out;
}

}  // namespace

std::vector<RoiSample> sample_rois(std::span<const Box> proposals, std::span<const LabeledBox> gts,
                                   std::size_t batch_size, double fg_fraction, Rng& rng,
                                   const std::string& image_id) {
  std::vector<std::size_t> fg_pool, bg_pool;
  std::vector<int> best_gt(proposals.size(), -1);
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const auto [overlap, g] = max_iou(proposals[i], gts);
    best_gt[i] = g;
    if (g >= 0 && overlap >= kForegroundIou) {
      fg_pool.push_back(i);
    } else if (g >= 0 && overlap >= kBackgroundIouLow) {
      bg_pool.push_back(i);
    }
  }
  if (fg_pool.empty() && bg_pool.empty()) {
    throw SamplingError("sample_rois: image '" + image_id + "' has no foreground or background proposals");
  }
  const auto fg_quota = static_cast<std::size_t>(std::llround(static_cast<double>(batch_size) * fg_fraction));
  const std::size_t bg_quota = batch_size - std::min(fg_quota, batch_size);
  if (bg_pool.empty() && bg_quota > 0) {
    log::info("sample_rois: image '" + image_id + "' has no background proposals; batch shrinks");
  }
  std::vector<RoiSample> out;
  for (std::size_t i : draw(fg_pool, fg_quota, rng)) {
    const LabeledBox& gt = gts[static_cast<std::size_t>(best_gt[i])];
    out.push_back(RoiSample{proposals[i], gt.label, encode_targets(proposals[i], gt.box), true});
  }
  for (std::size_t i : draw(bg_pool, bg_quota, rng)) {
    out.push_back(RoiSample{proposals[i], 0, Offsets{}, false});
  }
  return out;
}

}  // namespace cmac
