#pragma once

// Brute-force reference implementations shared by the unit tests and the
// acceptance run.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cmac/eval.hpp"
#include "cmac/tensor.hpp"

namespace cmac::testing {

// V[c,i,j] = sum_{n,m} U[c,n,m] * max(0, 1-|x_p-m|) * max(0, 1-|y_p-n|) over every pixel.
inline Tensor bilinear_oracle(const Tensor& U, const Tensor& grid) {
  const std::size_t D = U.dim(0), H = U.dim(1), W = U.dim(2);
  const std::size_t Ho = grid.dim(0), Wo = grid.dim(1);
  Tensor out({D, Ho, Wo});
  for (std::size_t c = 0; c < D; ++c)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        const double xp = (grid[(i * Wo + j) * 2] + 1.0) / 2.0 * static_cast<double>(W - 1);
        const double yp = (grid[(i * Wo + j) * 2 + 1] + 1.0) / 2.0 * static_cast<double>(H - 1);
        double v = 0.0;
        for (std::size_t n = 0; n < H; ++n)
          for (std::size_t m = 0; m < W; ++m) {
            v += U.at(c, n, m) * std::max(0.0, 1.0 - std::abs(xp - static_cast<double>(m))) *
                 std::max(0.0, 1.0 - std::abs(yp - static_cast<double>(n)));
          }
        out.at(c, i, j) = v;
      }
  return out;
}

// Brute-force roi max pooling written from the rounding rules alone:
// floor the top-left corner, ceil the bottom-right, clip, collapse empty
// extents to the cell under the box center; bins use floor/ceil splits and
// the first maximum in row-major order wins.
inline Tensor roi_pool_oracle(const Tensor& f, const Box& roi, double scale, int S) {
  const int C = static_cast<int>(f.dim(0)), H = static_cast<int>(f.dim(1)), W = static_cast<int>(f.dim(2));
  auto clip = [](double v, int hi) { return static_cast<int>(std::min(std::max(v, 0.0), static_cast<double>(hi))); };
  int x0 = clip(std::floor(roi.x1 * scale), W), x1 = clip(std::ceil(roi.x2 * scale), W);
  int y0 = clip(std::floor(roi.y1 * scale), H), y1 = clip(std::ceil(roi.y2 * scale), H);
  if (x1 <= x0) {
    x0 = std::min(clip(std::floor((roi.x1 + roi.x2) / 2 * scale), W), W - 1);
    x1 = x0 + 1;
  }
  if (y1 <= y0) {
    y0 = std::min(clip(std::floor((roi.y1 + roi.y2) / 2 * scale), H), H - 1);
    y1 = y0 + 1;
  }
  const int h = y1 - y0, w = x1 - x0;
  Tensor out({static_cast<std::size_t>(C), static_cast<std::size_t>(S), static_cast<std::size_t>(S)});
  for (int c = 0; c < C; ++c) {
    for (int i = 0; i < S; ++i) {
      for (int j = 0; j < S; ++j) {
        const int ys = y0 + (i * h) / S, ye = y0 + ((i + 1) * h + S - 1) / S;
        const int xs = x0 + (j * w) / S, xe = x0 + ((j + 1) * w + S - 1) / S;
        double best = -INFINITY;
        for (int y = ys; y < ye; ++y)
          for (int x = xs; x < xe; ++x) best = std::max(best, f.at(c, y, x));
        out.at(c, i, j) = best;
      }
    }
  }
  return out;
}

inline Tensor adaptive_pool_oracle(const Tensor& f, int oh, int ow) {
  const int C = static_cast<int>(f.dim(0)), H = static_cast<int>(f.dim(1)), W = static_cast<int>(f.dim(2));
  Tensor out({static_cast<std::size_t>(C), static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const int ys = static_cast<int>(std::floor(static_cast<double>(i) * H / oh));
        const int ye = static_cast<int>(std::ceil(static_cast<double>(i + 1) * H / oh));
        const int xs = static_cast<int>(std::floor(static_cast<double>(j) * W / ow));
        const int xe = static_cast<int>(std::ceil(static_cast<double>(j + 1) * W / ow));
        double best = -INFINITY;
        for (int y = ys; y < ye; ++y)
          for (int x = xs; x < xe; ++x) best = std::max(best, f.at(c, y, x));
        out.at(c, i, j) = best;
      }
  return out;
}

// Confusion counts at every cutoff: the top-k detections are matched from
// scratch each time, then AP sums the best precision at or beyond each newly
// recalled ground truth.
inline double ap_oracle(const std::vector<Detection>& dets, const std::vector<GroundTruth>& gts) {
  std::vector<Detection> sorted = dets;
  std::stable_sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.score > b.score; });
  const std::size_t G = gts.size();
  std::vector<std::size_t> tps;
  for (std::size_t k = 1; k <= sorted.size(); ++k) {
    std::vector<bool> used(G, false);
    std::size_t tp = 0;
    for (std::size_t i = 0; i < k; ++i) {
      double best = -1.0;
      std::size_t bg = 0;
      for (std::size_t g = 0; g < G; ++g) {
        if (gts[g].image != sorted[i].image) continue;
        const double o = iou(sorted[i].box, gts[g].box);
        if (o > best) best = o, bg = g;
      }
      if (best >= 0.5 && !used[bg]) used[bg] = true, ++tp;
    }
    tps.push_back(tp);
  }
  double ap = 0.0;
  std::size_t prev = 0;
  for (std::size_t k = 0; k < tps.size(); ++k) {
    if (tps[k] == prev) continue;
    double p = 0.0;
    for (std::size_t j = k; j < tps.size(); ++j) p = std::max(p, static_cast<double>(tps[j]) / (j + 1));
    ap += static_cast<double>(tps[k] - prev) / G * p;
    prev = tps[k];
  }
  return ap;
}

}  // namespace cmac::testing
