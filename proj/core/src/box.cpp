#include "pyrdet/box.hpp"

#include <algorithm>

namespace pyrdet {

double box_area(const Box& b) {
  return box_valid(b) ? (b.x2 - b.x1) * (b.y2 - b.y1) : 0.0;
}

double iou(const Box& a, const Box& b) {
  if (!box_valid(a) || !box_valid(b)) return 0.0;
  const double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  return inter / (box_area(a) + box_area(b) - inter);
}

}  // namespace pyrdet
