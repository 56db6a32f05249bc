#pragma once

#include <array>
#include <vector>

#include "cmac/box.hpp"
#include "cmac/layers.hpp"

// Parallel restricted spatial transformers over the embedded local feature.
// Each transformer predicts a translation (t_x, t_y); the sampling matrix is
//   [[0.5, 0, t_x], [0, 0.5, t_y]]
// so every transformer reads a half-size window of the proposal.
namespace cmac {

inline constexpr double kPartWindowScale = 0.5;
inline constexpr double kPartNormEps = 1e-8;

struct PartAttentionConfig {
  std::size_t D = 32;
  std::size_t S = 4;
  std::size_t d = 32;      // localizer hidden width
  std::size_t d_fc = 64;
  std::size_t transformers = 2;
  double block_gain = 1.0;  // RMS of every normalized block entering the 1x1 reduction
};

struct PartAttentionParams {
  PartAttentionConfig config;
  std::vector<Mlp> localizers;  // D -> d -> 2, one per transformer (groups stn_0, stn_1, ...)
  Conv reduce;                  // (N+1)D -> D, 1x1
  Linear fc1;                   // D*S*S -> d_fc
  Linear fc2;                   // d_fc -> d_fc

  PartAttentionParams() = default;
  explicit PartAttentionParams(const PartAttentionConfig& cfg);
  void init(const InitScheme& scheme, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

// (t_x, t_y) = 0.5 * tanh(MLP_index(avgpool(local_embedded))), one row per proposal.
Var localize(Tape& tape, PartAttentionParams& params, Var local_embedded, std::size_t index);

// Sampling grid for the fixed half-scale window: [R x S x S x 2].
Var build_affine_grid(Var theta, std::size_t S);
// Plain evaluation of the same grid for a single translation; [S x S x 2].
Tensor build_affine_grid(double t_x, double t_y, std::size_t S);

// Whole-tensor L2 normalization of each proposal's cube.
std::vector<Var> normalize_parts(std::span<const Var> cubes);

// Normalizes the local cube and every part, concatenates them along channels,
// reduces with the 1x1 conv, flattens and applies two affine+relu layers.
Var assemble_local(Tape& tape, PartAttentionParams& params, Var local_embedded, std::span<const Var> parts);

struct PartAttentionResult {
  Var local_feature;            // F_L, [R x d_fc]
  std::vector<Var> thetas;      // per transformer, [R x 2]
  std::vector<Var> parts;       // per transformer, [R x D x S x S]
};

// Runs all configured transformers (none when `use_parts` is false) and assembles F_L.
PartAttentionResult run_part_attention(Tape& tape, PartAttentionParams& params, Var local_embedded,
                                       bool use_parts);

// Image-space rectangle read by a transformer with translation t inside `proposal`.
Box part_window(const Box& proposal, double t_x, double t_y);

}  // namespace cmac
