#include "cmac/part_attention.hpp"
#include <cstdlib>

#include <cmath>

#include "cmac/global_context.hpp"

namespace cmac {

PartAttentionParams::PartAttentionParams(const PartAttentionConfig& cfg)
    : config(cfg),
      reduce("local.reduce", "local_proj", (cfg.transformers + 1) * cfg.D, cfg.D, 1, 1, 0),
      fc1("local.fc1", "local_proj", cfg.D * cfg.S * cfg.S, cfg.d_fc),
      fc2("local.fc2", "local_proj", cfg.d_fc, cfg.d_fc) {
  for (std::size_t n = 0; n < cfg.transformers; ++n) {
    const std::string id = std::to_string(n);
    localizers.emplace_back("stn" + id + ".loc", "stn_" + id, cfg.D, cfg.d, 2);
  }
}

void PartAttentionParams::init(const InitScheme& scheme, Rng& rng) {
  for (Mlp& m : localizers) {
    scheme.fc(m.hidden.weight, rng);
    scheme.fc(m.output.weight, rng);
  }
  scheme.conv(reduce.weight, rng);
  scheme.fc(fc1.weight, rng);
  scheme.fc(fc2.weight, rng);
}

void PartAttentionParams::collect(std::vector<Parameter*>& out) {
  for (Mlp& m : localizers) m.collect(out);
  reduce.collect(out);
  fc1.collect(out);
  fc2.collect(out);
}

Var localize(Tape& tape, PartAttentionParams& params, Var local_embedded, std::size_t index) {
  if (index >= params.localizers.size()) {
    throw ContractError("localize: transformer " + std::to_string(index) + " of " +
                        std::to_string(params.localizers.size()));
  }
  Var v = global_avg_pool(local_embedded);
  Var raw = params.localizers[index].forward(tape, v);
  return scale(activation(raw, Activation::tanh), 0.5);
}

Var build_affine_grid(Var theta, std::size_t S) { return affine_grid(theta, S, kPartWindowScale); }

Tensor build_affine_grid(double t_x, double t_y, std::size_t S) {
  Tape tape(false);
  Var grid = build_affine_grid(tape.constant(Tensor({1, 2}, {t_x, t_y})), S);
  return grid.value().reshaped({S, S, 2});
}

std::vector<Var> normalize_parts(std::span<const Var> cubes) {
  std::vector<Var> out;
  out.reserve(cubes.size());
  for (const Var& c : cubes) out.push_back(l2_normalize(c, kPartNormEps));
  return out;
}

Var assemble_local(Tape& tape, PartAttentionParams& params, Var local_embedded, std::span<const Var> parts) {
  const auto& cfg = params.config;
  const Tensor& L = local_embedded.value();
  if (L.rank() != 4 || L.dim(1) != cfg.D || L.dim(2) != cfg.S || L.dim(3) != cfg.S) {
    throw DimensionError("assemble_local: local feature " + shape_str(L.shape()) + " is not [R x " +
                         std::to_string(cfg.D) + " x " + std::to_string(cfg.S) + " x " +
                         std::to_string(cfg.S) + "]");
  }
  if (parts.size() + 1 != params.reduce.weight.value.dim(1) / cfg.D) {
    throw DimensionError("assemble_local: " + std::to_string(parts.size()) +
                         " parts do not match the reduction layer");
  }
  std::vector<Var> blocks{local_embedded};
  for (const Var& p : parts) {
    if (p.shape() != L.shape()) {
      throw DimensionError("assemble_local: part " + shape_str(p.shape()) + " vs local " + shape_str(L.shape()));
    }
    blocks.push_back(p);
  }
  std::vector<Var> normed = normalize_parts(blocks);
  const double rescale = params.config.block_gain * std::sqrt(static_cast<double>(cfg.D * cfg.S * cfg.S));
  Var mid = scale(normed[0], rescale);
  for (std::size_t k = 1; k < normed.size(); ++k) mid = concat_channels(mid, scale(normed[k], rescale));
  Var reduced = params.reduce.forward(tape, mid);
  const std::size_t R = L.dim(0);
  Var flat = reshape(reduced, {R, cfg.D * cfg.S * cfg.S});
  Var hidden = activation(params.fc1.forward(tape, flat), Activation::relu);
  return activation(params.fc2.forward(tape, hidden), Activation::relu);
}

PartAttentionResult run_part_attention(Tape& tape, PartAttentionParams& params, Var local_embedded,
                                       bool use_parts) {
  PartAttentionResult result;
  if (use_parts && !params.localizers.empty()) {
    note_attention_module_call();
    for (std::size_t n = 0; n < params.localizers.size(); ++n) {
      Var theta = localize(tape, params, local_embedded, n);
      Var grid = build_affine_grid(theta, params.config.S);
      result.thetas.push_back(theta);
      result.parts.push_back(bilinear_sample(local_embedded, grid));
    }
  }
  result.local_feature = assemble_local(tape, params, local_embedded, result.parts);
  return result;
}

Box part_window(const Box& proposal, double t_x, double t_y) {
  // Normalized [-1, 1] spans the proposal; the window is centered at t with half the extent.
  const double hw = 0.5 * proposal.width(), hh = 0.5 * proposal.height();
  const double cx = proposal.x1 + hw + t_x * hw;
  const double cy = proposal.y1 + hh + t_y * hh;
  return Box{cx - kPartWindowScale * hw, cy - kPartWindowScale * hh, cx + kPartWindowScale * hw,
             cy + kPartWindowScale * hh};
}

}  // namespace cmac
