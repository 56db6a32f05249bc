#pragma once

#include <algorithm>

namespace cmac {

// Axis-aligned box in image pixels; area uses (x2-x1)*(y2-y1).
struct Box {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  bool valid() const { return x1 <= x2 && y1 <= y2; }

  Box clipped(double img_w, double img_h) const {
    return Box{std::clamp(x1, 0.0, img_w), std::clamp(y1, 0.0, img_h),
               std::clamp(x2, 0.0, img_w), std::clamp(y2, 0.0, img_h)};
  }

  friend bool operator==(const Box&, const Box&) = default;
};

}  // namespace cmac
