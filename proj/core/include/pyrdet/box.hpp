#pragma once

#include <tuple>

namespace pyrdet {

// Axis-aligned box in normalized [0,1] image coordinates.
struct Box {
  double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;
};

inline bool box_valid(const Box& b) { return b.x2 > b.x1 && b.y2 > b.y1; }

inline bool box_less(const Box& a, const Box& b) {
  return std::tie(a.x1, a.y1, a.x2, a.y2) < std::tie(b.x1, b.y1, b.x2, b.y2);
}

// Compiled once on purpose: oracle comparisons assume one rounding of this
// arithmetic, which inline definitions under mixed per-target flags break.
double box_area(const Box& b);

// Degenerate boxes have IoU 0 by convention.
double iou(const Box& a, const Box& b);

}  // namespace pyrdet
