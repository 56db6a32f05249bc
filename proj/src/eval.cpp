#include "cmac/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "cmac/log.hpp"

namespace cmac {

double iou(const Box& a, const Box& b) {
  const double area_a = a.area(), area_b = b.area();
  if (area_a <= 0.0 || area_b <= 0.0) {
    log::debug("iou: zero-area box");
    return 0.0;
  }
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (area_a + area_b - inter);
}

namespace {

std::vector<std::size_t> order_by_score(std::span<const Detection> dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return order;
}

}  // namespace

std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh) {
  if (!(iou_thresh > 0.0 && iou_thresh < 1.0)) throw ContractError("nms: threshold must lie in (0, 1)");
  const auto order = order_by_score(dets);
  std::vector<bool> suppressed(dets.size(), false);
  std::vector<Detection> keep;
  for (std::size_t a = 0; a < order.size(); ++a) {
    const std::size_t i = order[a];
    if (suppressed[i]) continue;
    keep.push_back(dets[i]);
    for (std::size_t b = a + 1; b < order.size(); ++b) {
      const std::size_t j = order[b];
      if (suppressed[j] || dets[j].label != dets[i].label || dets[j].image != dets[i].image) continue;
      if (iou(dets[i].box, dets[j].box) > iou_thresh) suppressed[j] = true;
    }
  }
  return keep;
}

std::optional<double> average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                                        int label, double iou_thresh, ApInterpolation mode) {
  std::vector<const GroundTruth*> class_gts;
  for (const GroundTruth& g : gts) {
    if (g.label == label) class_gts.push_back(&g);
  }
  if (class_gts.empty()) {
    log::info("average_precision: class " + std::to_string(label) + " has no ground truth; AP undefined");
    return std::nullopt;
  }
  std::vector<Detection> class_dets;
  for (const Detection& d : dets) {
    if (d.label == label) class_dets.push_back(d);
  }
  const auto order = order_by_score(class_dets);
  std::vector<bool> claimed(class_gts.size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i : order) {
    const Detection& d = class_dets[i];
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < class_gts.size(); ++g) {
      if (class_gts[g]->image != d.image) continue;
      const double o = iou(d.box, class_gts[g]->box);
      if (o > best) {
        best = o;
        best_g = g;
      }
    }
    if (best >= iou_thresh && !claimed[best_g]) {
      claimed[best_g] = true;
      ++tp;
    } else {
      ++fp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(class_gts.size()));
  }

  if (mode == ApInterpolation::voc07) {
    double ap = 0.0;
    for (int k = 0; k <= 10; ++k) {
      const double r = k / 10.0;
      double p = 0.0;
      for (std::size_t i = 0; i < recall.size(); ++i) {
        if (recall[i] >= r - 1e-12) p = std::max(p, precision[i]);
      }
      ap += p / 11.0;
    }
    return ap;
  }

  std::vector<double> mrec{0.0}, mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i-- > 0;) mpre[i] = std::max(mpre[i], mpre[i + 1]);
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) {
    if (mrec[i] != mrec[i - 1]) ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  }
  return ap;
}

double mean_ap(const std::map<int, std::optional<double>>& per_class) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& [label, ap] : per_class) {
    if (ap) {
      s += *ap;
      ++n;
    }
  }
  if (n == 0) throw EvaluationError("mean_ap: no class has a defined AP");
  return s / static_cast<double>(n);
}

void write_detections(std::ostream& os, std::span<const Detection> dets) {
  std::ostringstream line;
  for (const Detection& d : dets) {
    line.str("");
    line << d.image << ' ' << d.label << ' ' << std::setprecision(6) << std::fixed << d.score << ' '
         << std::setprecision(2) << d.box.x1 << ' ' << d.box.y1 << ' ' << d.box.x2 << ' ' << d.box.y2 << '\n';
    os << line.str();
  }
}

void write_metrics_report(std::ostream& os, const std::map<int, std::optional<double>>& per_class) {
  os << "class      AP\n";
  for (const auto& [label, ap] : per_class) {
    os << std::setw(5) << label << "  ";
    if (ap) {
      os << std::fixed << std::setprecision(4) << *ap << '\n';
    } else {
      os << "   n/a\n";
    }
  }
  os << "  mAP  " << std::fixed << std::setprecision(4) << mean_ap(per_class) << '\n';
}

GrayImage render_attention_map(const AttentionTrace& trace, int width, int height, AttentionScaling scaling) {
  if (trace.alphas.empty()) throw ContractError("render_attention_map: empty trace");
  const Tensor& alpha = trace.alphas.back();
  const std::size_t K = trace.grid;
  if (K == 0 || alpha.numel() != K * K) throw DimensionError("render_attention_map: trace grid mismatch");
  double peak = 0.0;
  for (double a : alpha.data()) peak = std::max(peak, a);
  std::vector<unsigned char> cells(K * K);
  for (std::size_t i = 0; i < K * K; ++i) {
    double q = scaling == AttentionScaling::peak ? (peak > 0 ? 255.0 * alpha[i] / peak : 0.0) : 255.0 * alpha[i];
    cells[i] = static_cast<unsigned char>(std::clamp(std::lround(q), 0L, 255L));
  }
  GrayImage img{width, height, std::vector<unsigned char>(static_cast<std::size_t>(width * height))};
  for (int y = 0; y < height; ++y) {
    const std::size_t cy = static_cast<std::size_t>(y) * K / static_cast<std::size_t>(height);
    for (int x = 0; x < width; ++x) {
      const std::size_t cx = static_cast<std::size_t>(x) * K / static_cast<std::size_t>(width);
      img.pixels[static_cast<std::size_t>(y * width + x)] = cells[cy * K + cx];
    }
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write graymap " + path.string());
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw std::runtime_error("cannot write graymap " + path.string());
}

GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open graymap " + path.string());
  std::string magic;
  int maxval = 0;
  GrayImage img;
  is >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || img.width <= 0 || img.height <= 0 || maxval != 255) {
    throw FormatError("graymap " + path.string() + ": bad header");
  }
  is.get();
  img.pixels.resize(static_cast<std::size_t>(img.width * img.height));
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(is.gcount()) != img.pixels.size()) {
    throw FormatError("graymap " + path.string() + ": truncated pixel data");
  }
  return img;
}

void export_attention_map(const AttentionTrace& trace, int width, int height, const std::filesystem::path& path,
                          const Box& proposal, std::span<const Box> part_windows, AttentionScaling scaling) {
  write_pgm(path, render_attention_map(trace, width, height, scaling));
  std::filesystem::path side = path;
  side += ".parts.txt";
  std::ofstream os(side);
  if (!os) throw std::runtime_error("cannot write part windows " + side.string());
  os << std::fixed << std::setprecision(3);
  os << "proposal " << proposal.x1 << ' ' << proposal.y1 << ' ' << proposal.x2 << ' ' << proposal.y2 << '\n';
  for (std::size_t i = 0; i < part_windows.size(); ++i) {
    const Box& b = part_windows[i];
    os << "part" << i << ' ' << b.x1 << ' ' << b.y1 << ' ' << b.x2 << ' ' << b.y2 << '\n';
  }
  if (!os) throw std::runtime_error("cannot write part windows " + side.string());
}

}  // namespace cmac
