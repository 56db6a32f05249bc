#pragma once

#include <optional>
#include <vector>

#include "cmac/layers.hpp"

// Local/global feature extraction from the two modality streams, channel-wise
// fusion and the 1x1 embeddings consumed by the attention modules.
// roi_pool itself lives in ops.hpp.
namespace cmac {

// adaptive_max_pool of a whole-image feature map onto a K x K grid.
Var pool_global(Var feature, std::size_t K);

// Channel concatenation, RGB channels first. A missing stream contributes no
// channels; at least one stream must be present.
Var fuse(std::optional<Var> rgb, std::optional<Var> depth);

// Unrolls a [D x K x K] cube into K*K row slices of dimension D.
Var slice_features(Var cube);

struct FusionEmbedParams {
  Conv global_embed;  // fused channels -> D, 1x1
  Conv local_embed;   // fused channels -> D, 1x1

  FusionEmbedParams() = default;
  FusionEmbedParams(std::size_t fused_channels, std::size_t D);
  void init(const InitScheme& scheme, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

struct FusedFeatures {
  Var global_fused;     // [2D' x K x K]
  Var local_fused;      // [R x 2D' x S x S]
  Var global_embedded;  // [D x K x K]
  Var local_embedded;   // [R x D x S x S]
  Var global_slices;    // [K*K x D]
  Var z;                // [R x D], average-pooled local embedding
};

FusedFeatures embed_context(Tape& tape, FusionEmbedParams& params, Var global_fused, Var local_fused);

}  // namespace cmac
