#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cmac/eval.hpp"
#include "cmac/synth.hpp"

using namespace cmac;
namespace fs = std::filesystem;

namespace {

bool same_sample(const DetectionSample& a, const DetectionSample& b) {
  if (a.id != b.id || a.gts.size() != b.gts.size()) return false;
  for (std::size_t i = 0; i < a.gts.size(); ++i) {
    if (a.gts[i].box != b.gts[i].box || a.gts[i].label != b.gts[i].label) return false;
  }
  return bitwise_equal(a.rgb, b.rgb) && bitwise_equal(a.geo, b.geo);
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("cmac_synth_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST(GenerateScene, SameSeedIsBitIdentical) {
  SceneSpec spec;
  for (std::uint64_t seed : {0u, 7u, 12345u}) {
    EXPECT_TRUE(same_sample(generate_scene(spec, seed), generate_scene(spec, seed))) << seed;
  }
  EXPECT_FALSE(same_sample(generate_scene(spec, 1), generate_scene(spec, 2)));
}

TEST(GenerateScene, RangesAndBoxValidity) {
  SceneSpec spec;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    DetectionSample s = generate_scene(spec, seed);
    ASSERT_EQ(s.rgb.shape(), (Shape{3, 64, 64}));
    ASSERT_EQ(s.geo.shape(), (Shape{3, 64, 64}));
    for (double v : s.rgb.storage()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    for (double v : s.geo.storage()) ASSERT_TRUE(std::isfinite(v) && v >= 0.0 && v <= 1.0);
    EXPECT_LE(s.gts.size(), 6u);
    for (const LabeledBox& g : s.gts) {
      EXPECT_GE(g.box.area(), 4.0);
      EXPECT_GE(g.label, 1);
      EXPECT_LE(g.label, 3);
      EXPECT_GE(g.box.x1, 0.0);
      EXPECT_LE(g.box.x2, 64.0);
    }
  }
}

TEST(GenerateScene, NoOcclusionKeepsBoxesApart) {
  SceneSpec spec;
  spec.occlusion_prob = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    DetectionSample s = generate_scene(spec, seed);
    for (std::size_t i = 0; i < s.gts.size(); ++i)
      for (std::size_t j = i + 1; j < s.gts.size(); ++j) EXPECT_LT(iou(s.gts[i].box, s.gts[j].box), 0.3);
  }
}

TEST(GenerateScene, FullOcclusionProducesOverlappingPairs) {
  SceneSpec spec;
  spec.occlusion_prob = 1.0;
  int with_pair = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    DetectionSample s = generate_scene(spec, seed);
    bool found = false;
    for (std::size_t i = 0; i < s.gts.size(); ++i)
      for (std::size_t j = i + 1; j < s.gts.size(); ++j) found = found || iou(s.gts[i].box, s.gts[j].box) >= 0.2;
    with_pair += found;
  }
  // Scenes with a single object, or whose occluded partner fell under the
  // visibility floor, have no pair; most scenes should.
  EXPECT_GE(with_pair, 60);
  RecordProperty("scenes_with_overlap", with_pair);
}

TEST(GenerateScene, ArchetypesIncludeTextureTwinsDifferingInRelief) {
  const auto a = default_archetypes(3);
  ASSERT_EQ(a.size(), 3u);
  EXPECT_EQ(a[0].shape, a[1].shape);
  EXPECT_EQ(a[0].texture, a[1].texture);
  EXPECT_EQ(a[0].color, a[1].color);
  EXPECT_NE(a[0].relief, a[1].relief);
  EXPECT_TRUE(a[2].shape != a[0].shape || a[2].texture != a[0].texture);
}

TEST(GenerateScene, RoomBiasOneKeepsTwinsApart) {
  SceneSpec spec;
  spec.room_class_bias = 1.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    DetectionSample s = generate_scene(spec, seed);
    bool has1 = false, has2 = false;
    for (const LabeledBox& g : s.gts) {
      has1 = has1 || g.label == 1;
      has2 = has2 || g.label == 2;
    }
    EXPECT_FALSE(has1 && has2) << seed;
  }
  spec.room_class_bias = 1.5;
  EXPECT_THROW(spec.validate(), ContractError);
}

TEST(Geocentric, FrontoParallelWallIsConstant) {
  SceneSpec spec;
  Tensor wall({1, 16, 16}, 3.0);
  Tensor raw = geocentric_raw(wall, spec);
  for (std::size_t v = 0; v < 16; ++v)
    for (std::size_t u = 0; u < 16; ++u) {
      EXPECT_NEAR(raw.at(0, v, u), 1.0 / 3.0, 1e-15);
      EXPECT_NEAR(raw.at(2, v, u), std::acos(0.0), 1e-12);
    }
  Tensor enc = geocentric_encode(wall, spec);
  for (std::size_t k = 0; k < 256; ++k) {
    EXPECT_EQ(enc[k], 0.0);
    EXPECT_EQ(enc[512 + k], 0.0);
  }
}

TEST(Geocentric, RoomHeightMatchesClosedForm) {
  SceneSpec spec;
  Tensor depth = room_depth(spec);
  Tensor raw = geocentric_raw(depth, spec);
  const std::size_t n = static_cast<std::size_t>(spec.image_size);
  int floor_pixels = 0;
  for (std::size_t v = 0; v < n; ++v) {
    // Ray through the pixel centre; the floor is y = camera_height, the wall z = wall_depth.
    const double ry = (static_cast<double>(v) + 0.5 - spec.cy) / spec.fy;
    const bool on_floor = ry > 0.0 && spec.camera_height / ry < spec.wall_depth;
    const double z = on_floor ? spec.camera_height / ry : spec.wall_depth;
    const double height = spec.camera_height - ry * z;
    for (std::size_t u = 0; u < n; ++u) {
      EXPECT_NEAR(raw.at(1, v, u), height, 1e-6);
      EXPECT_NEAR(raw.at(0, v, u), 1.0 / z, 1e-12);
      if (on_floor) {
        EXPECT_NEAR(raw.at(1, v, u), 0.0, 1e-6);
        ++floor_pixels;
      }
    }
  }
  EXPECT_GT(floor_pixels, 0);
}

TEST(Geocentric, NonpositiveDepthThrows) {
  SceneSpec spec;
  Tensor d({1, 4, 4}, 2.0);
  d.at(0, 2, 1) = 0.0;
  EXPECT_THROW(geocentric_encode(d, spec), ContractError);
  d.at(0, 2, 1) = -1.0;
  EXPECT_THROW(geocentric_raw(d, spec), ContractError);
}

TEST(Proposals, ZeroJitterReproducesGroundTruth) {
  const std::vector<LabeledBox> gts{{Box{3, 4, 20, 30}, 1}, {Box{30, 30, 50, 44}, 2}};
  auto props = make_proposals(gts, 3, ProposalJitter{0.0, 1.0}, 0, 64, 9);
  ASSERT_EQ(props.size(), 6u);
  for (std::size_t i = 0; i < props.size(); ++i) EXPECT_EQ(props[i], gts[i / 3].box);
}

TEST(Proposals, CountsAndForegroundCoverage) {
  SceneSpec spec;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    DetectionSample s = generate_scene(spec, seed);
    EXPECT_EQ(make_proposals(s.gts, 1, ProposalJitter{}, 0, 64, seed).size(), s.gts.size());
    auto props = make_proposals(s.gts, 8, ProposalJitter{}, 24, 64, seed);
    EXPECT_EQ(props.size(), s.gts.size() * 8 + 24);
    for (const LabeledBox& g : s.gts) {
      double best = 0.0;
      for (const Box& p : props) best = std::max(best, iou(p, g.box));
      EXPECT_GE(best, 0.5) << seed;
    }
  }
  const std::vector<LabeledBox> one{{Box{1, 1, 9, 9}, 1}};
  EXPECT_THROW(make_proposals(one, 0, ProposalJitter{}, 0, 64, 1), ContractError);
}

TEST(Flip, ProbabilityZeroIsIdentity) {
  DetectionSample s = generate_scene(SceneSpec{}, 3);
  const DetectionSample before = s;
  std::vector<Box> props{{1, 2, 10, 12}};
  Rng rng(4);
  for (int i = 0; i < 20; ++i) EXPECT_FALSE(flip_augment(s, props, 0.0, rng));
  EXPECT_TRUE(same_sample(s, before));
  EXPECT_EQ(props[0], (Box{1, 2, 10, 12}));
}

TEST(Flip, DoubleFlipRestoresEverything) {
  DetectionSample s = generate_scene(SceneSpec{}, 5);
  const DetectionSample before = s;
  std::vector<Box> props{{1, 2, 10, 12}, {0, 0, 64, 64}};
  const auto props_before = props;
  flip_horizontal(s, props);
  EXPECT_FALSE(bitwise_equal(s.rgb, before.rgb));
  flip_horizontal(s, props);
  EXPECT_TRUE(same_sample(s, before));
  EXPECT_EQ(props, props_before);
}

TEST(Flip, BoxCoordinates) {
  EXPECT_EQ(flip_box(Box{2, 3, 5, 7}, 10.0), (Box{5, 3, 8, 7}));
  DetectionSample s = generate_scene(SceneSpec{}, 6);
  std::vector<Box> none;
  const DetectionSample before = s;
  flip_horizontal(s, none);
  for (std::size_t i = 0; i < s.gts.size(); ++i) EXPECT_EQ(s.gts[i].box, flip_box(before.gts[i].box, 64.0));
  EXPECT_EQ(s.rgb.at(1, 7, 0), before.rgb.at(1, 7, 63));
  EXPECT_EQ(s.geo.at(2, 40, 10), before.geo.at(2, 40, 53));
}

TEST(Flip, FrequencyNearHalf) {
  DetectionSample s = generate_scene(SceneSpec{}, 7);
  std::vector<Box> props;
  Rng rng(8);
  int flips = 0;
  for (int i = 0; i < 2000; ++i) flips += flip_augment(s, props, 0.5, rng);
  EXPECT_NEAR(flips / 2000.0, 0.5, 0.05);
  EXPECT_THROW(flip_augment(s, props, 1.5, rng), ContractError);
}

TEST(Dataset, RoundTripIsBitExact) {
  const fs::path dir = scratch("roundtrip");
  std::vector<DetectionSample> samples;
  for (std::uint64_t seed = 0; seed < 4; ++seed) samples.push_back(generate_scene(SceneSpec{}, seed));
  save_dataset(samples, dir);
  auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) EXPECT_TRUE(same_sample(back[i], samples[i])) << i;
  fs::remove_all(dir);
}

TEST(Dataset, EmptyDatasetHasEmptyManifest) {
  const fs::path dir = scratch("empty");
  save_dataset({}, dir);
  EXPECT_TRUE(fs::exists(dir / "manifest"));
  EXPECT_EQ(fs::file_size(dir / "manifest"), 0u);
  EXPECT_TRUE(load_dataset(dir).empty());
  fs::remove_all(dir);
}

TEST(Dataset, CorruptionIsReported) {
  const fs::path dir = scratch("corrupt");
  const std::vector<DetectionSample> samples{generate_scene(SceneSpec{}, 11)};
  save_dataset(samples, dir);
  const std::string id = samples[0].id;
  {
    std::ofstream m(dir / "manifest");
    m << id << ' ' << samples[0].gts.size() + 1 << '\n';
  }
  EXPECT_THROW(load_dataset(dir), FormatError);

  save_dataset(samples, dir);
  {
    std::ofstream b(dir / (id + ".boxes"), std::ios::app);
    b << "1 2 oops\n";
  }
  try {
    load_dataset(dir);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("byte"), std::string::npos) << e.what();
  }

  save_dataset(samples, dir);
  const fs::path rgb = dir / (id + ".rgb");
  fs::resize_file(rgb, fs::file_size(rgb) - 10);
  EXPECT_THROW(load_dataset(dir), FormatError);
  fs::remove_all(dir / "manifest");
  EXPECT_THROW(load_dataset(dir), FormatError);
  fs::remove_all(dir);
}
