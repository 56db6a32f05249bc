#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "cmac/box.hpp"
#include "cmac/global_context.hpp"

namespace cmac {

struct Detection {
  Box box;
  int label = 0;
  double score = 0.0;
  int image = 0;
};

struct GroundTruth {
  Box box;
  int label = 0;
  int image = 0;
};

class EvaluationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Intersection over union with area (x2-x1)*(y2-y1); 0 for disjoint or zero-area boxes.
double iou(const Box& a, const Box& b);

// Greedy per-class suppression. Detections are visited by descending score
// (equal scores by input position); a kept detection suppresses later ones of
// the same class and image whose IoU exceeds `iou_thresh`.
std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh);

enum class ApInterpolation {
  all_point,  // area under the monotone precision envelope
  voc07,      // mean of the envelope sampled at recall 0, 0.1, ..., 1
};

// PASCAL-style AP for one class. Detections are matched highest score first
// to the ground truth of greatest IoU in the same image; a match needs IoU >=
// `iou_thresh` and an unclaimed ground truth, otherwise the detection is a
// false positive. Returns nullopt when the class has no ground truth.
std::optional<double> average_precision(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                                        int label, double iou_thresh = 0.5,
                                        ApInterpolation mode = ApInterpolation::all_point);

// Mean over classes with a defined AP; throws EvaluationError when none are.
double mean_ap(const std::map<int, std::optional<double>>& per_class);

// `image_id class score x1 y1 x2 y2` per line.
void write_detections(std::ostream& os, std::span<const Detection> dets);
// Per-class AP table followed by the mAP line.
void write_metrics_report(std::ostream& os, const std::map<int, std::optional<double>>& per_class);

enum class AttentionScaling {
  peak,      // round(255 * alpha / max alpha)
  absolute,  // round(255 * alpha)
};

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> pixels;  // row-major
};

// Nearest-neighbour upsampling of the final-step K x K weights to the image size.
GrayImage render_attention_map(const AttentionTrace& trace, int width, int height,
                               AttentionScaling scaling = AttentionScaling::peak);

void write_pgm(const std::filesystem::path& path, const GrayImage& img);
GrayImage read_pgm(const std::filesystem::path& path);

// Writes the graymap to `path` and the proposal plus part rectangles to
// `path` with ".parts.txt" appended. Throws std::runtime_error naming the path on I/O failure.
void export_attention_map(const AttentionTrace& trace, int width, int height, const std::filesystem::path& path,
                          const Box& proposal, std::span<const Box> part_windows,
                          AttentionScaling scaling = AttentionScaling::peak);

}  // namespace cmac
