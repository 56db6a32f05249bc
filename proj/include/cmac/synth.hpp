#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cmac/detection_head.hpp"
#include "cmac/rng.hpp"
#include "cmac/tensor.hpp"

// Synthetic RGB-D scenes: a floor and a fronto-parallel wall seen by a level
// pinhole camera, populated with textured objects at distinct depths.
namespace cmac {

enum class ShapeKind { rectangle, ellipse, triangle };
enum class TextureKind { checker, stripes, dots };
enum class Relief { flat, dome };

struct Archetype {
  ShapeKind shape = ShapeKind::rectangle;
  TextureKind texture = TextureKind::checker;
  Relief relief = Relief::flat;
  std::array<double, 3> color{0.8, 0.3, 0.2};
  std::array<double, 3> color2{0.2, 0.2, 0.2};
};

struct SceneSpec {
  int image_size = 64;
  int classes = 3;
  std::vector<Archetype> archetypes;  // one per class; filled by default_archetypes() when empty
  int min_objects = 2;
  int max_objects = 6;
  double occlusion_prob = 0.5;
  double min_object_px = 12.0;
  double max_object_px = 24.0;
  double near_depth = 2.0;   // meters
  double far_depth = 5.0;
  double wall_depth = 6.0;
  double camera_height = 1.2;  // above the floor plane
  double dome_height = 0.35;   // relief of dome archetypes, meters
  double fx = 64.0, fy = 64.0, cx = 32.0, cy = 32.0;
  std::array<double, 3> gravity{0.0, 1.0, 0.0};  // unit, camera frame (y down)
  double rgb_noise = 0.02;
  double min_visible_fraction = 0.35;
  double room_class_bias = 0.9;  // chance a look-alike object takes its room's usual class; 0.5 = no cue

  void validate() const;
  Archetype archetype(int label) const;
};

// Class archetypes. Classes 1 and 2 share shape, texture and color and differ
// only in relief, so RGB alone cannot separate them.
std::vector<Archetype> default_archetypes(int classes);

struct DetectionSample {
  std::string id;
  Tensor rgb;  // [3 x H x W] in [0, 1]
  Tensor geo;  // [3 x H x W]: disparity, height, gravity angle; each in [0, 1]
  std::vector<LabeledBox> gts;
};

// Renders a scene; also returns the metric depth map when `depth_out` is non-null.
DetectionSample generate_scene(const SceneSpec& spec, std::uint64_t seed, Tensor* depth_out = nullptr);

// Depth of the empty room (floor + wall) at every pixel: [1 x H x W].
Tensor room_depth(const SceneSpec& spec);

// Un-normalized geocentric channels: 1/depth, height above the floor, and the
// angle (radians) between the surface normal and gravity.
Tensor geocentric_raw(const Tensor& depth, const SceneSpec& spec);
// geocentric_raw with each channel min-max scaled to [0, 1] (constant channels map to 0).
Tensor geocentric_encode(const Tensor& depth, const SceneSpec& spec);

struct ProposalJitter {
  double max_shift = 0.25;  // center shift as a fraction of the box size
  double max_scale = 1.4;   // width/height scaled by a factor in [1/max_scale, max_scale]
};

// Jittered copies of every ground truth (the first copy of each has IoU >= 0.5
// with its source) followed by uniformly placed background boxes.
std::vector<Box> make_proposals(std::span<const LabeledBox> gts, int n_per_gt, const ProposalJitter& jitter,
                                int n_background, int image_size, std::uint64_t seed);

// Mirrors image channels and boxes horizontally with probability `prob`.
// Returns whether the flip happened.
bool flip_augment(DetectionSample& sample, std::vector<Box>& proposals, double prob, Rng& rng);
void flip_horizontal(DetectionSample& sample, std::vector<Box>& proposals);
Box flip_box(const Box& b, double width);

// Directory layout: `manifest` (lines "<id> <gt count>"), `<id>.rgb` and
// `<id>.geo` tensor-record files, `<id>.boxes` lines "class x1 y1 x2 y2".
void save_dataset(std::span<const DetectionSample> samples, const std::filesystem::path& dir);
std::vector<DetectionSample> load_dataset(const std::filesystem::path& dir);

}  // namespace cmac
