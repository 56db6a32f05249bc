#include <gtest/gtest.h>

#include <cmath>
#include <bit>
#include <set>
#include <tuple>

#include "cmac/detection_head.hpp"
#include "cmac/eval.hpp"
#include "test_support.hpp"

using namespace cmac;
using cmac::testing::random_tensor;

namespace {

Tensor classify_values(HeadParams& head, const Tensor& local, std::optional<Tensor> global) {
  Tape tape(false);
  std::optional<Var> g;
  if (global) g = tape.constant(*global);
  return classify(tape, head, tape.constant(local), g).value();
}

Box random_box(Rng& rng, double lo = 0.0, double hi = 100.0) {
  const double x = rng.uniform(lo, hi), y = rng.uniform(lo, hi);
  return Box{x, y, x + rng.uniform(1.0, 50.0), y + rng.uniform(1.0, 50.0)};
}

}  // namespace

TEST(Classify, ZeroWeightsGiveUniform) {
  HeadParams head(6, 4, 3);
  Rng rng(1);
  Tensor p = classify_values(head, random_tensor({5, 6}, rng), random_tensor({5, 4}, rng));
  for (double v : p.storage()) EXPECT_EQ(v, 0.25);
}

TEST(Classify, BiasOnlyHandValue) {
  HeadParams head(3, 0, 1);
  head.cls.bias.value = Tensor({2}, {std::log(2.0), 0.0});
  Tensor p = classify_values(head, Tensor({1, 3}, 0.7), std::nullopt);
  EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
}

TEST(Classify, RowsAreDistributions) {
  HeadParams head(8, 8, 3);
  Rng rng(2);
  head.init(InitScheme{true, 0.5}, rng);
  Tensor p = classify_values(head, random_tensor({20, 8}, rng, -3, 3), random_tensor({20, 8}, rng, -3, 3));
  ASSERT_EQ(p.shape(), (Shape{20, 4}));
  for (std::size_t r = 0; r < 20; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_GE(p.at(r, c), 0.0);
      s += p.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(Regress, ZeroParametersKeepProposal) {
  HeadParams head(6, 0, 3);
  Rng rng(3);
  Tape tape(false);
  Tensor t = regress(tape, head, tape.constant(random_tensor({4, 6}, rng))).value();
  ASSERT_EQ(t.shape(), (Shape{4, 12}));
  EXPECT_EQ(t, Tensor({4, 12}));
  const Box p{3, 4, 17, 30};
  EXPECT_EQ(decode_box(p, Offsets{}), p);
}

TEST(Regress, GlobalFeatureGetsNoGradientThroughRegression) {
  HeadParams head(5, 5, 3);
  Rng rng(4);
  head.init(InitScheme{true}, rng);
  Parameter fl("fl", "x", random_tensor({3, 5}, rng));
  Parameter fg("fg", "x", random_tensor({3, 5}, rng));
  Tape tape;
  Var l = tape.param(fl);
  Var g = tape.param(fg);
  (void)classify(tape, head, l, g);  // g is on the tape, but only the classifier reads it
  tape.backward(sum(regress(tape, head, l)));
  tape.accumulate_param_grads();
  EXPECT_EQ(fg.grad, Tensor({3, 5}));
  EXPECT_NE(fl.grad, Tensor({3, 5}));
}

TEST(EncodeTargets, IdentityAndHandCase) {
  const Box p{0, 0, 10, 10};
  const Offsets zero = encode_targets(p, p);
  for (double v : zero) EXPECT_EQ(v, 0.0);
  const Offsets v = encode_targets(p, Box{0, 0, 10, 20});
  EXPECT_EQ(v[0], 0.0);
  EXPECT_EQ(v[1], 0.5);
  EXPECT_EQ(v[2], 0.0);
  EXPECT_DOUBLE_EQ(v[3], std::log(2.0));
}

TEST(EncodeTargets, DegenerateProposalThrows) {
  EXPECT_THROW(encode_targets(Box{0, 0, 0, 5}, Box{0, 0, 3, 3}), ContractError);
  EXPECT_THROW(encode_targets(Box{0, 0, 5, 5}, Box{2, 2, 2, 9}), ContractError);
}

TEST(DecodeBox, DoublesWidthAroundCenter) {
  const Box b = decode_box(Box{0, 0, 10, 6}, Offsets{0, 0, std::log(2.0), 0});
  EXPECT_NEAR(b.x1, -5.0, 1e-12);
  EXPECT_NEAR(b.x2, 15.0, 1e-12);
  EXPECT_NEAR(b.y1, 0.0, 1e-12);
  EXPECT_NEAR(b.y2, 6.0, 1e-12);
}

TEST(EncodeDecode, RoundTripOverRandomPairs) {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const Box p = random_box(rng), g = random_box(rng);
    const Box back = decode_box(p, encode_targets(p, g));
    EXPECT_NEAR(back.x1, g.x1, 1e-9);
    EXPECT_NEAR(back.y1, g.y1, 1e-9);
    EXPECT_NEAR(back.x2, g.x2, 1e-9);
    EXPECT_NEAR(back.y2, g.y2, 1e-9);
  }
}

TEST(SmoothL1, PiecewiseValues) {
  EXPECT_EQ(smooth_l1(0.0), 0.0);
  EXPECT_EQ(smooth_l1(0.5), 0.125);
  EXPECT_EQ(smooth_l1(2.0), 1.5);
  EXPECT_EQ(smooth_l1(-2.0), 1.5);
}

TEST(SmoothL1, ValueAndSlopeContinuousAtOne) {
  for (double s : {1.0, -1.0}) {
    const double inner = 0.5 * s * s, outer = std::abs(s) - 0.5;
    EXPECT_EQ(inner, 0.5);
    EXPECT_EQ(outer, 0.5);
    EXPECT_EQ(smooth_l1(s), 0.5);
    EXPECT_NEAR(smooth_l1(s * (1 - 1e-9)), 0.5, 1e-8);
    EXPECT_NEAR(smooth_l1(s * (1 + 1e-9)), 0.5, 1e-8);
    EXPECT_EQ(smooth_l1_grad(s), s);
    EXPECT_NEAR(smooth_l1_grad(s * (1 - 1e-9)), s, 1e-8);
  }
}

TEST(MultitaskLoss, HandEvaluatedForeground) {
  const double probs[] = {0.25, 0.5, 0.25};
  EXPECT_NEAR(multitask_loss(probs, 1, Offsets{0.5, 0, 0, 0}, Offsets{}), std::log(2.0) + 0.125, 1e-15);
}

TEST(MultitaskLoss, PerfectPredictionIsZero) {
  const double probs[] = {0.0, 1.0};
  const Offsets v{0.1, -0.3, 0.2, 0.05};
  EXPECT_EQ(multitask_loss(probs, 1, v, v), 0.0);
}

TEST(MultitaskLoss, BackgroundEqualsCrossEntropyBitwise) {
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    Tensor logits = random_tensor({4}, rng, -3, 3);
    double z = 0.0;
    for (double v : logits.storage()) z += std::exp(v);
    std::vector<double> p;
    for (double v : logits.storage()) p.push_back(std::exp(v) / z);
    const Offsets t{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
    const double full = multitask_loss(p, 0, t, Offsets{});
    const double ce = cross_entropy(p, 0);
    EXPECT_EQ(std::bit_cast<std::uint64_t>(full), std::bit_cast<std::uint64_t>(ce));
  }
}

TEST(MultitaskLoss, TapeVersionMatchesScalarVersionAndIgnoresBackgroundOffsets) {
  Rng rng(7);
  Tensor logits = random_tensor({4, 3}, rng, -2, 2);
  Tensor offsets = random_tensor({4, 8}, rng);
  Tensor targets = random_tensor({4, 4}, rng);
  const int labels[] = {0, 1, 2, 0};
  Tape tape;
  Var probs = softmax(tape.constant(logits));
  LossTerms terms = multitask_loss(probs, tape.constant(offsets), labels, targets);
  double expected = 0.0;
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> p(probs.value().data().begin() + r * 3, probs.value().data().begin() + r * 3 + 3);
    Offsets t{}, v{};
    if (labels[r] > 0) {
      for (std::size_t k = 0; k < 4; ++k) {
        t[k] = offsets.at(r, 4 * (labels[r] - 1) + k);
        v[k] = targets.at(r, k);
      }
    }
    expected += multitask_loss(p, labels[r], t, v);
  }
  EXPECT_NEAR(terms.total.value()[0], expected / 4.0, 1e-12);

  // Background rows: changing their offsets or targets leaves the loss untouched.
  Tensor o2 = offsets, t2 = targets;
  for (std::size_t k = 0; k < 8; ++k) o2.at(0, k) += 10.0;
  for (std::size_t k = 0; k < 4; ++k) t2.at(3, k) -= 7.0;
  LossTerms again = multitask_loss(probs, tape.constant(o2), labels, t2);
  EXPECT_TRUE(bitwise_equal(again.total.value(), terms.total.value()));
}

TEST(CrossEntropy, ClampsZeroProbability) {
  const double probs[] = {1.0, 0.0};
  EXPECT_NEAR(cross_entropy(probs, 1), -std::log(1e-12), 1e-9);
  EXPECT_THROW(cross_entropy(probs, 2), ContractError);
}

namespace {

struct RoiFixture {
  std::vector<LabeledBox> gts{{Box{10, 10, 30, 30}, 2}, {Box{40, 35, 60, 60}, 1}};
  std::vector<Box> proposals;
  RoiFixture() {
    Rng rng(8);
    for (int i = 0; i < 200; ++i) {
      const LabeledBox& g = gts[i % 2];
      const double s = rng.uniform(-8.0, 8.0), t = rng.uniform(-8.0, 8.0);
      proposals.push_back(Box{g.box.x1 + s, g.box.y1 + t, g.box.x2 + s, g.box.y2 + t});
    }
  }
};

}  // namespace

TEST(SampleRois, QuotasAndPoolMembership) {
  RoiFixture fx;
  Rng rng(9);
  auto rois = sample_rois(fx.proposals, fx.gts, 128, 0.25, rng, "img");
  ASSERT_EQ(rois.size(), 128u);
  int fg = 0;
  for (const RoiSample& r : rois) {
    const auto [o, g] = max_iou(r.box, fx.gts);
    EXPECT_EQ(r.is_foreground, r.label >= 1);
    if (r.is_foreground) {
      ++fg;
      EXPECT_GE(o, 0.5);
      EXPECT_EQ(r.label, fx.gts[static_cast<std::size_t>(g)].label);
      const Offsets v = encode_targets(r.box, fx.gts[static_cast<std::size_t>(g)].box);
      for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(r.target[k], v[k]);
    } else {
      EXPECT_GE(o, 0.1);
      EXPECT_LT(o, 0.5);
    }
  }
  EXPECT_EQ(fg, 32);
}

TEST(SampleRois, ForegroundOnlyPoolShrinksBatch) {
  const std::vector<LabeledBox> gts{{Box{5, 5, 25, 25}, 3}};
  const std::vector<Box> proposals(10, gts[0].box);
  Rng rng(10);
  auto rois = sample_rois(proposals, gts, 128, 0.25, rng);
  ASSERT_EQ(rois.size(), 32u);  // repeat-sampled foreground, no background quota filled
  for (const RoiSample& r : rois) EXPECT_EQ(r.label, 3);
}

TEST(SampleRois, LowOverlapIsExcludedAndEmptyPoolsThrow) {
  const std::vector<LabeledBox> gts{{Box{0, 0, 10, 10}, 1}};
  // IoU 5/100 = 0.05 with the ground truth
  const Box weak{0, 0, 10, 0.5};
  EXPECT_NEAR(iou(weak, gts[0].box), 0.05, 1e-12);
  const std::vector<Box> proposals{weak, Box{50, 50, 60, 60}};
  Rng rng(11);
  try {
    sample_rois(proposals, gts, 8, 0.25, rng, "scene_42");
    FAIL() << "expected SamplingError";
  } catch (const SamplingError& e) {
    EXPECT_NE(std::string(e.what()).find("scene_42"), std::string::npos) << e.what();
  }
  const std::vector<Box> with_bg{weak, Box{0, 0, 10, 3}};  // IoU 0.3
  auto rois = sample_rois(with_bg, gts, 8, 0.25, rng);
  for (const RoiSample& r : rois) EXPECT_EQ(r.box, with_bg[1]);
}

TEST(SampleRois, DeterministicUnderSeed) {
  RoiFixture fx;
  Rng a(12), b(12);
  auto ra = sample_rois(fx.proposals, fx.gts, 64, 0.25, a);
  auto rb = sample_rois(fx.proposals, fx.gts, 64, 0.25, b);
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    EXPECT_EQ(ra[i].box, rb[i].box);
    EXPECT_EQ(ra[i].label, rb[i].label);
  }
}

TEST(SampleRois, WithoutReplacementWhenPoolIsLargeEnough) {
  RoiFixture fx;
  Rng rng(13);
  auto rois = sample_rois(fx.proposals, fx.gts, 16, 0.25, rng);
  std::set<std::tuple<double, double, double, double>> seen;
  for (const RoiSample& r : rois) seen.insert({r.box.x1, r.box.y1, r.box.x2, r.box.y2});
  EXPECT_EQ(seen.size(), rois.size());
}
