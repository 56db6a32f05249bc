#include <gtest/gtest.h>

#include <cmath>

#include "cmac/roi_fusion.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace cmac;
using cmac::testing::adaptive_pool_oracle;
using cmac::testing::random_tensor;
using cmac::testing::roi_pool_oracle;

namespace {

Tensor pooled_row(const Tensor& batch, std::size_t r) {
  const std::size_t n = batch.numel() / batch.dim(0);
  std::vector<double> v(batch.data().begin() + static_cast<std::ptrdiff_t>(r * n),
                        batch.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
  return Tensor({batch.dim(1), batch.dim(2), batch.dim(3)}, std::move(v));
}

}  // namespace

TEST(RoiPool, FullMapIsIdentity) {
  Rng rng(1);
  Tensor f = random_tensor({3, 4, 4}, rng);
  Tape tape(false);
  const Box roi{0, 0, 16, 16};
  Var out = roi_pool(tape.constant(f), std::span(&roi, 1), 0.25, 4);
  EXPECT_TRUE(bitwise_equal(pooled_row(out.value(), 0), f));
}

TEST(RoiPool, ConstantMapGivesConstantOutput) {
  Rng rng(2);
  Tensor f({2, 8, 8}, -0.3);
  Tape tape(false);
  for (int k = 0; k < 20; ++k) {
    const double x1 = rng.uniform(0, 30), y1 = rng.uniform(0, 30);
    const Box roi{x1, y1, x1 + rng.uniform(0, 20), y1 + rng.uniform(0, 20)};
    Var out = roi_pool(tape.constant(f), std::span(&roi, 1), 0.25, 3);
    for (double v : out.value().storage()) EXPECT_EQ(v, -0.3);
  }
}

TEST(RoiPool, RampFullMapGivesWindowMaxima) {
  Tensor f({1, 6, 6});
  for (std::size_t i = 0; i < 36; ++i) f[i] = static_cast<double>(i);
  Tape tape(false);
  const Box roi{0, 0, 6, 6};
  Var out = roi_pool(tape.constant(f), std::span(&roi, 1), 1.0, 3);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      // max of the 2x2 window is its bottom-right cell on an increasing ramp
      EXPECT_EQ(out.value()[i * 3 + j], f.at(0, 2 * i + 1, 2 * j + 1));
    }
}

TEST(RoiPool, MatchesBruteForceOracleBitExactly) {
  Rng rng(3);
  for (int map = 0; map < 5; ++map) {
    Tensor f = random_tensor({4, 8, 8}, rng);
    std::vector<Box> rois;
    for (int k = 0; k < 100; ++k) {
      const double x1 = rng.uniform(-4, 36), y1 = rng.uniform(-4, 36);
      rois.push_back({x1, y1, x1 + rng.uniform(0, 30), y1 + rng.uniform(0, 30)});
    }
    for (int S : {1, 2, 3, 4}) {
      Tape tape(false);
      Var out = roi_pool(tape.constant(f), rois, 0.25, static_cast<std::size_t>(S));
      for (std::size_t r = 0; r < rois.size(); ++r) {
        EXPECT_TRUE(bitwise_equal(pooled_row(out.value(), r), roi_pool_oracle(f, rois[r], 0.25, S)))
            << "roi " << r << " S " << S;
      }
    }
  }
}

TEST(RoiPool, DegenerateRoiCollapsesToCenterCell) {
  Rng rng(4);
  Tensor f = random_tensor({2, 8, 8}, rng);
  Tape tape(false);
  const Box roi{13.0, 21.0, 13.0, 21.0};
  Var out = roi_pool(tape.constant(f), std::span(&roi, 1), 0.25, 2);
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(out.value()[c * 4 + k], f.at(c, 5, 3));
}

TEST(RoiPool, NestedAlignedRoisAreMonotone) {
  Rng rng(5);
  Tensor f = random_tensor({3, 8, 8}, rng);
  Tape tape(false);
  // Inner 2x2 cells sit inside the outer 4x4 cells' 2x2 blocks, one per bin.
  const Box outer{0, 0, 32, 32};
  for (int by = 0; by < 2; ++by) {
    for (int bx = 0; bx < 2; ++bx) {
      const Box inner{16.0 * bx, 16.0 * by, 16.0 * bx + 8, 16.0 * by + 8};
      const Box pair[] = {outer, inner};
      Var out = roi_pool(tape.constant(f), pair, 0.25, 2);
      Tensor o = pooled_row(out.value(), 0), in = pooled_row(out.value(), 1);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 2; ++i)
          for (std::size_t j = 0; j < 2; ++j) EXPECT_LE(in.at(c, i, j), o.at(c, by, bx));
    }
  }
}

TEST(AdaptiveMaxPool, MatchesBruteForceOracleBitExactly) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t H = 1 + rng.below(12), W = 1 + rng.below(12);
    Tensor f = random_tensor({2, H, W}, rng);
    const int oh = 1 + static_cast<int>(rng.below(H)), ow = 1 + static_cast<int>(rng.below(W));
    Tape tape(false);
    Var out = adaptive_max_pool(tape.constant(f), oh, ow);
    EXPECT_TRUE(bitwise_equal(out.value(), adaptive_pool_oracle(f, oh, ow)));
  }
}

TEST(PoolGlobal, IdentityQuadrantsAndTooLarge) {
  Rng rng(7);
  Tensor f = random_tensor({2, 4, 4}, rng);
  Tape tape(false);
  EXPECT_TRUE(bitwise_equal(pool_global(tape.constant(f), 4).value(), f));
  EXPECT_TRUE(bitwise_equal(pool_global(tape.constant(f), 2).value(), adaptive_pool_oracle(f, 2, 2)));
  EXPECT_THROW(pool_global(tape.constant(f), 5), DimensionError);
}

TEST(PoolGlobal, FullScaleGridSide) {
  // The published configuration pools the global map to 20 x 20.
  Rng rng(8);
  Tensor f = random_tensor({2, 40, 40}, rng);
  Tape tape(false);
  EXPECT_EQ(pool_global(tape.constant(f), 20).shape(), (Shape{2, 20, 20}));
}

TEST(Fuse, DepthDisabledIsIdentity) {
  Rng rng(9);
  Tensor a = random_tensor({16, 4, 4}, rng);
  Tape tape(false);
  EXPECT_TRUE(bitwise_equal(fuse(tape.constant(a), std::nullopt).value(), a));
  EXPECT_THROW(fuse(std::nullopt, std::nullopt), ContractError);
}

TEST(Fuse, ShapeAndDepthRoundTrip) {
  Rng rng(10);
  Tensor a = random_tensor({16, 4, 4}, rng);
  Tensor b = random_tensor({16, 4, 4}, rng);
  Tape tape(false);
  Var f = fuse(tape.constant(a), tape.constant(b));
  EXPECT_EQ(f.shape(), (Shape{32, 4, 4}));
  EXPECT_TRUE(bitwise_equal(slice_channels(f, 16, 32).value(), b));
  // every output cell equals exactly one input cell, RGB first
  for (std::size_t c = 0; c < 32; ++c)
    for (std::size_t k = 0; k < 16; ++k)
      EXPECT_EQ(f.value()[c * 16 + k], c < 16 ? a[c * 16 + k] : b[(c - 16) * 16 + k]);
  EXPECT_THROW(fuse(tape.constant(a), tape.constant(Tensor({16, 4, 5}))), DimensionError);
}

TEST(Fuse, BatchedLocalCubes) {
  Rng rng(11);
  Tensor a = random_tensor({3, 2, 4, 4}, rng);
  Tensor b = random_tensor({3, 5, 4, 4}, rng);
  Tape tape(false);
  Var f = fuse(tape.constant(a), tape.constant(b));
  EXPECT_EQ(f.shape(), (Shape{3, 7, 4, 4}));
  EXPECT_TRUE(bitwise_equal(slice_channels(f, 2, 7).value(), b));
}

TEST(SliceFeatures, OrderingAndRoundTrip) {
  Tensor cube({3, 2, 2});
  for (std::size_t i = 0; i < 12; ++i) cube[i] = static_cast<double>(i);
  Tape tape(false);
  Tensor s = slice_features(tape.constant(cube)).value();
  ASSERT_EQ(s.shape(), (Shape{4, 3}));
  // row i is cell (i / 2, i % 2): (0,0), (0,1), (1,0), (1,1)
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(s.at(i, c), cube.at(c, i / 2, i % 2));
  Tensor back({3, 2, 2});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) back.at(c, i / 2, i % 2) = s.at(i, c);
  EXPECT_TRUE(bitwise_equal(back, cube));

  Rng rng(12);
  Tensor one = random_tensor({5, 1, 1}, rng);
  Tensor s1 = slice_features(tape.constant(one)).value();
  EXPECT_EQ(s1.shape(), (Shape{1, 5}));
  for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(s1[c], one[c]);
}

TEST(EmbedContext, IdentitySelectionWeights) {
  Rng rng(13);
  const std::size_t fused = 6, D = 4;
  FusionEmbedParams params(fused, D);
  // select channels 1, 3, 4, 5
  const std::size_t pick[] = {1, 3, 4, 5};
  for (Conv* c : {&params.global_embed, &params.local_embed}) {
    c->weight.value.fill(0.0);
    for (std::size_t o = 0; o < D; ++o) c->weight.value[o * fused + pick[o]] = 1.0;
  }
  Tensor g = random_tensor({fused, 3, 3}, rng);
  Tensor l = random_tensor({2, fused, 2, 2}, rng);
  Tape tape(false);
  FusedFeatures f = embed_context(tape, params, tape.constant(g), tape.constant(l));
  ASSERT_EQ(f.global_embedded.shape(), (Shape{D, 3, 3}));
  ASSERT_EQ(f.local_embedded.shape(), (Shape{2, D, 2, 2}));
  for (std::size_t o = 0; o < D; ++o) {
    for (std::size_t k = 0; k < 9; ++k) EXPECT_EQ(f.global_embedded.value()[o * 9 + k], g[pick[o] * 9 + k]);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t k = 0; k < 4; ++k)
        EXPECT_EQ(f.local_embedded.value()[(r * D + o) * 4 + k], l[(r * fused + pick[o]) * 4 + k]);
  }
  // z is the spatial mean of the local embedding
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t o = 0; o < D; ++o) {
      double m = 0.0;
      for (std::size_t k = 0; k < 4; ++k) m += l[(r * fused + pick[o]) * 4 + k];
      EXPECT_NEAR(f.z.value().at(r, o), m / 4.0, 1e-15);
    }
}

TEST(EmbedContext, DeskDefaultSliceShape) {
  Rng rng(14);
  FusionEmbedParams params(32, 32);
  params.init(InitScheme{}, rng);
  Tape tape(false);
  FusedFeatures f = embed_context(tape, params, tape.constant(random_tensor({32, 8, 8}, rng)),
                                  tape.constant(random_tensor({3, 32, 4, 4}, rng)));
  EXPECT_EQ(f.global_slices.shape(), (Shape{64, 32}));
  EXPECT_EQ(f.z.shape(), (Shape{3, 32}));
}

TEST(EmbedContext, SeparateGlobalAndLocalParameters) {
  FusionEmbedParams params(8, 4);
  std::vector<Parameter*> ps;
  params.collect(ps);
  ASSERT_EQ(ps.size(), 4u);
  EXPECT_NE(&params.global_embed.weight, &params.local_embed.weight);
  for (Parameter* p : ps) EXPECT_EQ(p->group, "fusion_embed");
}
