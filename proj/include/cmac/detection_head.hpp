#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmac/box.hpp"
#include "cmac/layers.hpp"
#include "cmac/rng.hpp"

namespace cmac {

using Offsets = std::array<double, 4>;  // (dx, dy, dw, dh)

struct LabeledBox {
  Box box;
  int label = 0;  // 1..C
};

struct RoiSample {
  Box box;
  int label = 0;       // 0 = background
  Offsets target{};    // regression target, meaningful when label >= 1
  bool is_foreground = false;
};

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct HeadParams {
  Linear cls;  // (d_fc [+ d_fc]) -> C+1
  Linear loc;  // d_fc -> 4C

  HeadParams() = default;
  HeadParams(std::size_t local_width, std::size_t global_width, std::size_t classes);
  void init(const InitScheme& scheme, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

// p = softmax(f_cls([F_L, F_G])); F_G omitted when the global module is off.
Var classify(Tape& tape, HeadParams& params, Var local_feature, std::optional<Var> global_feature);
// t* = f_loc(F_L); the global feature never reaches the regressor.
Var regress(Tape& tape, HeadParams& params, Var local_feature);

// Center/size parameterization: ((gx-px)/pw, (gy-py)/ph, ln(gw/pw), ln(gh/ph)).
Offsets encode_targets(const Box& proposal, const Box& gt);
Box decode_box(const Box& proposal, const Offsets& offsets);

// -ln p_u with p_u clamped to 1e-12.
double cross_entropy(std::span<const double> probs, int label);
// L_cls + [u >= 1] * sum_k smooth_l1(t_u[k] - v[k]).
double multitask_loss(std::span<const double> probs, int label, const Offsets& t_u, const Offsets& v);

struct LossTerms {
  Var total;
  Var cls;
  Var loc;
};

// Mean over proposals of the multitask loss. targets: [R x 4].
LossTerms multitask_loss(Var probs, Var offsets, std::span<const int> labels, const Tensor& targets);

// Max IoU of `box` against the ground truths and the index attaining it (-1 if none).
std::pair<double, int> max_iou(const Box& box, std::span<const LabeledBox> gts);

// Minibatch sampling for one image: foreground (max IoU >= 0.5) and background
// (max IoU in [0.1, 0.5)) pools, each drawn without replacement up to its quota
// and with repetition when non-empty but short. An empty background pool
// shrinks the batch. Throws SamplingError when both pools are empty.
std::vector<RoiSample> sample_rois(std::span<const Box> proposals, std::span<const LabeledBox> gts,
                                   std::size_t batch_size, double fg_fraction, Rng& rng,
                                   const std::string& image_id = "");

inline constexpr double kForegroundIou = 0.5;
inline constexpr double kBackgroundIouLow = 0.1;

}  // namespace cmac
