#include "cmac/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cmac/checkpoint.hpp"
#include "cmac/eval.hpp"
#include "cmac/log.hpp"

// Only +, -, *, /, std::sqrt and std::acos are used on rendered values; the
// first five are correctly rounded under IEEE-754, acos is the one libm call.
namespace cmac {

void SceneSpec::validate() const {
  if (classes < 2) throw ContractError("scene spec: need at least 2 classes");
  if (image_size < 16) throw ContractError("scene spec: image size below 16");
  if (min_objects < 1 || max_objects < min_objects) throw ContractError("scene spec: bad object count range");
  if (!(occlusion_prob >= 0.0 && occlusion_prob <= 1.0)) throw ContractError("scene spec: occlusion prob");
  if (!(room_class_bias >= 0.0 && room_class_bias <= 1.0)) throw ContractError("scene spec: room class bias");
  if (!(near_depth > 0.0 && far_depth > near_depth && wall_depth > far_depth)) {
    throw ContractError("scene spec: depth planes must satisfy 0 < near < far < wall");
  }
  if (!(camera_height > 0.0) || !(fx > 0.0) || !(fy > 0.0)) throw ContractError("scene spec: camera");
  if (!(min_object_px >= 4.0 && max_object_px >= min_object_px && max_object_px <= image_size)) {
    throw ContractError("scene spec: object size range");
  }
  const double g = std::sqrt(gravity[0] * gravity[0] + gravity[1] * gravity[1] + gravity[2] * gravity[2]);
  if (std::abs(g - 1.0) > 1e-9) throw ContractError("scene spec: gravity must be a unit vector");
  if (!archetypes.empty() && archetypes.size() != static_cast<std::size_t>(classes)) {
    throw ContractError("scene spec: archetype count differs from class count");
  }
}

Archetype SceneSpec::archetype(int label) const {
  if (label < 1 || label > classes) throw ContractError("scene spec: label out of range");
  if (archetypes.empty()) return default_archetypes(classes)[static_cast<std::size_t>(label - 1)];
  return archetypes[static_cast<std::size_t>(label - 1)];
}

std::vector<Archetype> default_archetypes(int classes) {
  std::vector<Archetype> out;
  // 1 and 2 look the same in RGB; only the relief tells them apart.
  out.push_back({ShapeKind::rectangle, TextureKind::checker, Relief::flat, {0.85, 0.55, 0.2}, {0.35, 0.2, 0.1}});
  out.push_back({ShapeKind::rectangle, TextureKind::checker, Relief::dome, {0.85, 0.55, 0.2}, {0.35, 0.2, 0.1}});
  const ShapeKind shapes[] = {ShapeKind::ellipse, ShapeKind::triangle, ShapeKind::rectangle};
  const TextureKind textures[] = {TextureKind::stripes, TextureKind::dots, TextureKind::stripes};
  for (int k = 2; k < classes; ++k) {
    const int j = k - 2;
    const double hue = 0.15 + 0.7 * static_cast<double>(j % 5) / 5.0;
    out.push_back({shapes[j % 3], textures[(j / 3) % 3], j % 2 == 0 ? Relief::dome : Relief::flat,
                   {0.2, hue, 0.9 - 0.5 * hue}, {0.9, 0.9, 0.9 - 0.3 * hue}});
  }
  out.resize(static_cast<std::size_t>(classes));
  return out;
}

namespace {

struct Placed {
  Box box;
  int label;
  double depth;
};

double centered_noise(Rng& rng) { return rng.uniform() + rng.uniform() - 1.0; }

// Vertical ray direction component for pixel row v.
double ray_y(const SceneSpec& s, int v) { return (v + 0.5 - s.cy) / s.fy; }

Box random_box(const SceneSpec& spec, Rng& rng) {
  const double w = rng.uniform(spec.min_object_px, spec.max_object_px);
  const double h = rng.uniform(spec.min_object_px, spec.max_object_px);
  const double n = spec.image_size;
  const double x = rng.uniform(0.0, n - w), y = rng.uniform(0.0, n - h);
  return Box{std::floor(x), std::floor(y), std::floor(x) + std::round(w), std::floor(y) + std::round(h)};
}

// A box of similar size overlapping `anchor` with IoU >= 0.2; nullopt if the
// image border gets in the way too often.
std::optional<Box> overlapping_box(const SceneSpec& spec, const Box& anchor, Rng& rng) {
  for (int attempt = 0; attempt < 50; ++attempt) {
    const double w = std::round(anchor.width() * rng.uniform(0.85, 1.15));
    const double h = std::round(anchor.height() * rng.uniform(0.85, 1.15));
    const double sx = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.2, 0.4) * w;
    const double sy = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.2, 0.4) * h;
    const Box b{std::round(anchor.x1 + sx), std::round(anchor.y1 + sy), std::round(anchor.x1 + sx) + w,
                std::round(anchor.y1 + sy) + h};
    if (b.x1 < 0 || b.y1 < 0 || b.x2 > spec.image_size || b.y2 > spec.image_size) continue;
    if (iou(b, anchor) >= 0.2) return b;
  }
  return std::nullopt;
}

bool inside_shape(ShapeKind shape, const Box& b, double px, double py) {
  const double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2);
  const double hw = 0.5 * b.width(), hh = 0.5 * b.height();
  switch (shape) {
    case ShapeKind::rectangle:
      return px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2;
    case ShapeKind::ellipse: {
      const double dx = (px - cx) / hw, dy = (py - cy) / hh;
      return dx * dx + dy * dy <= 1.0;
    }
    case ShapeKind::triangle: {
      if (py < b.y1 || py >= b.y2) return false;
      const double frac = (py - b.y1) / b.height();  // 0 at apex, 1 at base
      return std::abs(px - cx) <= frac * hw;
    }
  }
  return false;
}

bool texture_dark(TextureKind tex, int u, int v, const Box& b) {
  const int lu = u - static_cast<int>(b.x1), lv = v - static_cast<int>(b.y1);
  switch (tex) {
    case TextureKind::checker:
      return ((lu / 3) + (lv / 3)) % 2 == 1;
    case TextureKind::stripes:
      return (lu / 2) % 2 == 1;
    case TextureKind::dots:
      return lu % 4 == 1 && lv % 4 == 1;
  }
  return false;
}

// Depth of the object surface along the optical axis at pixel (px, py).
double surface_depth(const Archetype& a, const Placed& o, double px, double py, double dome_height) {
  if (a.relief == Relief::flat) return o.depth;
  const double dx = (px - 0.5 * (o.box.x1 + o.box.x2)) / (0.5 * o.box.width());
  const double dy = (py - 0.5 * (o.box.y1 + o.box.y2)) / (0.5 * o.box.height());
  const double r2 = std::min(1.0, dx * dx + dy * dy);
  return o.depth - dome_height * std::sqrt(1.0 - r2);
}

}  // namespace

Tensor room_depth(const SceneSpec& spec) {
  const std::size_t n = static_cast<std::size_t>(spec.image_size);
  Tensor depth({1, n, n}, 0.0);
  for (int v = 0; v < spec.image_size; ++v) {
    const double yn = ray_y(spec, v);
    for (int u = 0; u < spec.image_size; ++u) {
      // Floor: y = camera_height (gravity points along +y).
      double z = spec.wall_depth;
      if (yn > 0.0) z = std::min(z, spec.camera_height / yn);
      depth.at(0, static_cast<std::size_t>(v), static_cast<std::size_t>(u)) = z;
    }
  }
  return depth;
}

DetectionSample generate_scene(const SceneSpec& spec, std::uint64_t seed, Tensor* depth_out) {
  spec.validate();
  Rng rng(seed);
  const int n = spec.image_size;
  const std::size_t N = static_cast<std::size_t>(n);

  // Layout.
  const int count = rng.range(spec.min_objects, spec.max_objects);
  // Room type: sets the wall tint and which of the look-alike pair (1, 2)
  // usually shows up, so the scene around a proposal carries class evidence.
  const int room = static_cast<int>(rng.below(2));
  std::vector<Placed> objects;
  for (int k = 0; k < count; ++k) {
    int label = rng.range(1, spec.classes);
    if (label <= 2) label = (rng.bernoulli(spec.room_class_bias) ? room : 1 - room) + 1;
    const bool occlude = !objects.empty() && rng.bernoulli(spec.occlusion_prob);
    std::optional<Box> box;
    if (occlude) {
      box = overlapping_box(spec, objects[rng.below(objects.size())].box, rng);
    } else {
      for (int attempt = 0; attempt < 100 && !box; ++attempt) {
        const Box b = random_box(spec, rng);
        bool clear = true;
        for (const Placed& o : objects) clear = clear && iou(b, o.box) < 0.3;
        if (clear) box = b;
      }
    }
    if (!box) continue;
    objects.push_back({*box, label, 0.0});
  }
  // Distinct depth planes, evenly spread then shuffled.
  std::vector<double> planes(objects.size());
  for (std::size_t k = 0; k < planes.size(); ++k) {
    const double step = (spec.far_depth - spec.near_depth) / static_cast<double>(std::max<std::size_t>(1, planes.size()));
    planes[k] = spec.near_depth + step * (static_cast<double>(k) + rng.uniform(0.2, 0.8));
  }
  for (std::size_t k = planes.size(); k > 1; --k) std::swap(planes[k - 1], planes[rng.below(k)]);
  for (std::size_t k = 0; k < objects.size(); ++k) objects[k].depth = planes[k];

  // Background.
  Tensor depth = room_depth(spec);
  Tensor rgb({3, N, N}, 0.0);
  const double warm = room == 0 ? 0.12 : -0.12;
  const std::array<double, 3> wall{0.6 + warm + 0.1 * rng.uniform(), 0.62 + 0.1 * rng.uniform(),
                                   0.6 - warm + 0.1 * rng.uniform()};
  const std::array<double, 3> floor{0.38 + 0.1 * rng.uniform(), 0.33 + 0.1 * rng.uniform(), 0.3 + 0.1 * rng.uniform()};
  for (std::size_t v = 0; v < N; ++v) {
    for (std::size_t u = 0; u < N; ++u) {
      const bool is_wall = depth.at(0, v, u) >= spec.wall_depth;
      for (std::size_t c = 0; c < 3; ++c) rgb.at(c, v, u) = is_wall ? wall[c] : floor[c];
    }
  }

  // Objects, z-buffered; visible pixel counts decide which become ground truth.
  std::vector<int> owner(N * N, -1);
  for (std::size_t k = 0; k < objects.size(); ++k) {
    const Placed& o = objects[k];
    const Archetype a = spec.archetype(o.label);
    for (int v = static_cast<int>(o.box.y1); v < static_cast<int>(o.box.y2); ++v) {
      for (int u = static_cast<int>(o.box.x1); u < static_cast<int>(o.box.x2); ++u) {
        const double px = u + 0.5, py = v + 0.5;
        if (!inside_shape(a.shape, o.box, px, py)) continue;
        const double z = surface_depth(a, o, px, py, spec.dome_height);
        double& cur = depth.at(0, static_cast<std::size_t>(v), static_cast<std::size_t>(u));
        if (z >= cur) continue;
        cur = z;
        owner[static_cast<std::size_t>(v) * N + static_cast<std::size_t>(u)] = static_cast<int>(k);
        const auto& col = texture_dark(a.texture, u, v, o.box) ? a.color2 : a.color;
        for (std::size_t c = 0; c < 3; ++c) rgb.at(c, static_cast<std::size_t>(v), static_cast<std::size_t>(u)) = col[c];
      }
    }
  }
  for (double& x : rgb.storage()) x = std::clamp(x + spec.rgb_noise * centered_noise(rng), 0.0, 1.0);

  DetectionSample sample;
  std::ostringstream id;
  id << std::hex << std::setw(16) << std::setfill('0') << seed;
  sample.id = id.str();
  std::vector<std::size_t> full(objects.size(), 0), seen(objects.size(), 0);
  for (std::size_t k = 0; k < objects.size(); ++k) {
    const Archetype a = spec.archetype(objects[k].label);
    for (int v = static_cast<int>(objects[k].box.y1); v < static_cast<int>(objects[k].box.y2); ++v) {
      for (int u = static_cast<int>(objects[k].box.x1); u < static_cast<int>(objects[k].box.x2); ++u) {
        if (inside_shape(a.shape, objects[k].box, u + 0.5, v + 0.5)) ++full[k];
      }
    }
  }
  for (int w : owner) {
    if (w >= 0) ++seen[static_cast<std::size_t>(w)];
  }
  for (std::size_t k = 0; k < objects.size(); ++k) {
    const double frac = full[k] ? static_cast<double>(seen[k]) / static_cast<double>(full[k]) : 0.0;
    if (frac >= spec.min_visible_fraction) sample.gts.push_back({objects[k].box, objects[k].label});
  }
  sample.rgb = std::move(rgb);
  sample.geo = geocentric_encode(depth, spec);
  if (depth_out) *depth_out = std::move(depth);
  return sample;
}

Tensor geocentric_raw(const Tensor& depth, const SceneSpec& spec) {
  if (depth.rank() != 3 || depth.dim(0) != 1) {
    throw DimensionError("geocentric_encode: depth must be [1 x H x W], got " + shape_str(depth.shape()));
  }
  const std::size_t H = depth.dim(1), W = depth.dim(2);
  for (double z : depth.data()) {
    if (!(z > 0.0)) throw ContractError("geocentric_encode: nonpositive depth");
  }
  const auto& g = spec.gravity;
  // Back-projected camera-frame points.
  std::vector<std::array<double, 3>> P(H * W);
  for (std::size_t v = 0; v < H; ++v) {
    for (std::size_t u = 0; u < W; ++u) {
      const double z = depth.at(0, v, u);
      P[v * W + u] = {(u + 0.5 - spec.cx) / spec.fx * z, (v + 0.5 - spec.cy) / spec.fy * z, z};
    }
  }
  Tensor out({3, H, W}, 0.0);
  for (std::size_t v = 0; v < H; ++v) {
    for (std::size_t u = 0; u < W; ++u) {
      const auto& p = P[v * W + u];
      out.at(0, v, u) = 1.0 / p[2];
      out.at(1, v, u) = spec.camera_height - (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]);
      // Central differences, one-sided at the border.
      const std::size_t ul = u > 0 ? u - 1 : u, ur = u + 1 < W ? u + 1 : u;
      const std::size_t vu = v > 0 ? v - 1 : v, vd = v + 1 < H ? v + 1 : v;
      const auto& a0 = P[v * W + ul];
      const auto& a1 = P[v * W + ur];
      const auto& b0 = P[vu * W + u];
      const auto& b1 = P[vd * W + u];
      const double du[3] = {a1[0] - a0[0], a1[1] - a0[1], a1[2] - a0[2]};
      const double dv[3] = {b1[0] - b0[0], b1[1] - b0[1], b1[2] - b0[2]};
      const double nx = du[1] * dv[2] - du[2] * dv[1];
      const double ny = du[2] * dv[0] - du[0] * dv[2];
      const double nz = du[0] * dv[1] - du[1] * dv[0];
      const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
      double cosang = len > 0.0 ? std::abs(nx * g[0] + ny * g[1] + nz * g[2]) / len : 0.0;
      out.at(2, v, u) = std::acos(std::min(1.0, cosang));
    }
  }
  return out;
}

Tensor geocentric_encode(const Tensor& depth, const SceneSpec& spec) {
  Tensor out = geocentric_raw(depth, spec);
  const std::size_t plane = out.dim(1) * out.dim(2);
  auto data = out.data();
  for (std::size_t c = 0; c < 3; ++c) {
    auto ch = data.subspan(c * plane, plane);
    const auto [lo, hi] = std::minmax_element(ch.begin(), ch.end());
    const double a = *lo, b = *hi;
    for (double& x : ch) x = b > a ? (x - a) / (b - a) : 0.0;
  }
  return out;
}

std::vector<Box> make_proposals(std::span<const LabeledBox> gts, int n_per_gt, const ProposalJitter& jitter,
                                int n_background, int image_size, std::uint64_t seed) {
  if (n_per_gt < 1) throw ContractError("make_proposals: n_per_gt must be at least 1");
  if (n_background < 0) throw ContractError("make_proposals: negative background count");
  if (!(jitter.max_shift >= 0.0) || !(jitter.max_scale >= 1.0)) throw ContractError("make_proposals: bad jitter");
  Rng rng(seed);
  const double n = image_size;
  auto jittered = [&](const Box& g) {
    const double w = g.width(), h = g.height();
    const double cx = g.x1 + 0.5 * w + rng.uniform(-1.0, 1.0) * jitter.max_shift * w;
    const double cy = g.y1 + 0.5 * h + rng.uniform(-1.0, 1.0) * jitter.max_shift * h;
    // Factors in [1/m, m], equally likely to shrink or grow.
    auto factor = [&] {
      const double f = 1.0 + rng.uniform() * (jitter.max_scale - 1.0);
      return rng.bernoulli(0.5) ? f : 1.0 / f;
    };
    const double nw = w * factor(), nh = h * factor();
    Box b{cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh};
    b = b.clipped(n, n);
    if (b.width() < 2.0 || b.height() < 2.0) return g;
    return b;
  };
  std::vector<Box> out;
  out.reserve(gts.size() * static_cast<std::size_t>(n_per_gt) + static_cast<std::size_t>(n_background));
  for (const LabeledBox& g : gts) {
    Box first = g.box;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const Box b = jittered(g.box);
      if (iou(b, g.box) >= 0.5) {
        first = b;
        break;
      }
    }
    out.push_back(first);
    for (int k = 1; k < n_per_gt; ++k) out.push_back(jittered(g.box));
  }
  for (int k = 0; k < n_background; ++k) {
    const double w = rng.uniform(8.0, std::max(8.0, n / 2.0)), h = rng.uniform(8.0, std::max(8.0, n / 2.0));
    const double x = rng.uniform(0.0, n - w), y = rng.uniform(0.0, n - h);
    out.push_back(Box{x, y, x + w, y + h});
  }
  return out;
}

Box flip_box(const Box& b, double width) { return Box{width - b.x2, b.y1, width - b.x1, b.y2}; }

void flip_horizontal(DetectionSample& sample, std::vector<Box>& proposals) {
  const double W = static_cast<double>(sample.rgb.dim(2));
  for (Tensor* t : {&sample.rgb, &sample.geo}) {
    const std::size_t C = t->dim(0), H = t->dim(1), Wd = t->dim(2);
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < Wd / 2; ++x) std::swap(t->at(c, y, x), t->at(c, y, Wd - 1 - x));
      }
    }
  }
  for (LabeledBox& g : sample.gts) g.box = flip_box(g.box, W);
  for (Box& b : proposals) b = flip_box(b, W);
}

bool flip_augment(DetectionSample& sample, std::vector<Box>& proposals, double prob, Rng& rng) {
  if (!(prob >= 0.0 && prob <= 1.0)) throw ContractError("flip_augment: probability outside [0, 1]");
  if (!rng.bernoulli(prob)) return false;
  flip_horizontal(sample, proposals);
  return true;
}

void save_dataset(std::span<const DetectionSample> samples, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest");
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest").string());
  for (const DetectionSample& s : samples) {
    manifest << s.id << ' ' << s.gts.size() << '\n';
    save_tensor_file(dir / (s.id + ".rgb"), std::vector<NamedTensor>{{"rgb", s.rgb}});
    save_tensor_file(dir / (s.id + ".geo"), std::vector<NamedTensor>{{"geo", s.geo}});
    std::ofstream boxes(dir / (s.id + ".boxes"));
    boxes << std::setprecision(17);
    for (const LabeledBox& g : s.gts) {
      boxes << g.label << ' ' << g.box.x1 << ' ' << g.box.y1 << ' ' << g.box.x2 << ' ' << g.box.y2 << '\n';
    }
    if (!boxes) throw std::runtime_error("cannot write boxes for " + s.id);
  }
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest").string());
}

namespace {

Tensor single_tensor(const std::filesystem::path& path, const std::string& name) {
  auto records = load_tensor_file(path);
  if (records.size() != 1 || records[0].name != name) {
    throw FormatError(path.string() + ": expected a single '" + name + "' record");
  }
  return std::move(records[0].tensor);
}

}  // namespace

std::vector<DetectionSample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest");
  if (!manifest) throw FormatError("dataset " + dir.string() + ": missing manifest");
  std::vector<DetectionSample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    DetectionSample s;
    long long count = -1;
    if (!(ls >> s.id >> count) || count < 0) {
      throw FormatError("dataset manifest line " + std::to_string(line_no) + ": expected '<id> <gt count>'");
    }
    s.rgb = single_tensor(dir / (s.id + ".rgb"), "rgb");
    s.geo = single_tensor(dir / (s.id + ".geo"), "geo");
    if (s.rgb.rank() != 3 || s.rgb.dim(0) != 3 || s.geo.shape() != s.rgb.shape()) {
      throw FormatError("dataset sample " + s.id + ": image tensors are not matching [3 x H x W]");
    }
    const auto boxes_path = dir / (s.id + ".boxes");
    std::ifstream bs(boxes_path, std::ios::binary);
    if (!bs) throw FormatError("dataset sample " + s.id + ": missing " + boxes_path.filename().string());
    std::string bl;
    while (true) {
      const auto offset = bs.tellg();
      if (!std::getline(bs, bl)) break;
      if (bl.empty()) continue;
      std::istringstream bls(bl);
      LabeledBox g;
      if (!(bls >> g.label >> g.box.x1 >> g.box.y1 >> g.box.x2 >> g.box.y2)) {
        throw FormatError(boxes_path.string() + ": malformed box at byte " + std::to_string(static_cast<long long>(offset)));
      }
      s.gts.push_back(g);
    }
    if (static_cast<long long>(s.gts.size()) != count) {
      throw FormatError("dataset sample " + s.id + ": manifest lists " + std::to_string(count) + " boxes, file has " +
                        std::to_string(s.gts.size()));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace cmac
