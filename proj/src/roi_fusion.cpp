#include "cmac/roi_fusion.hpp"

namespace cmac {

Var pool_global(Var feature, std::size_t K) {
  const Tensor& F = feature.value();
  if (F.rank() != 3 || K == 0 || K > std::min(F.dim(1), F.dim(2))) {
    throw DimensionError("pool_global: grid " + std::to_string(K) + " does not fit feature map " +
                         shape_str(F.shape()));
  }
  return adaptive_max_pool(feature, K, K);
}

Var fuse(std::optional<Var> rgb, std::optional<Var> depth) {
  if (rgb && depth) return concat_channels(*rgb, *depth);
  if (rgb) return *rgb;
  if (depth) return *depth;
  throw ContractError("fuse: both modality streams are disabled");
}

Var slice_features(Var cube) { return cube_to_slices(cube); }

FusionEmbedParams::FusionEmbedParams(std::size_t fused_channels, std::size_t D)
    : global_embed("embed.global", "fusion_embed", fused_channels, D, 1, 1, 0),
      local_embed("embed.local", "fusion_embed", fused_channels, D, 1, 1, 0) {}

void FusionEmbedParams::init(const InitScheme& scheme, Rng& rng) {
  scheme.conv(global_embed.weight, rng);
  scheme.conv(local_embed.weight, rng);
}

void FusionEmbedParams::collect(std::vector<Parameter*>& out) {
  global_embed.collect(out);
  local_embed.collect(out);
}

FusedFeatures embed_context(Tape& tape, FusionEmbedParams& params, Var global_fused, Var local_fused) {
  FusedFeatures f;
  f.global_fused = global_fused;
  f.local_fused = local_fused;
  f.global_embedded = params.global_embed.forward(tape, global_fused);
  f.local_embedded = params.local_embed.forward(tape, local_fused);
  f.global_slices = slice_features(f.global_embedded);
  f.z = global_avg_pool(f.local_embedded);
  return f;
}

}  // namespace cmac
