#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pyrdet/box.hpp"
#include "pyrdet/nn.hpp"
#include "pyrdet/rng.hpp"
#include "pyrdet/tensor.hpp"

namespace pyrdet {

// A default box tiled on a pyramid level's grid, normalized coordinates.
struct Anchor {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
  int level = 0;
};

Box anchor_box(const Anchor& a);

struct AnchorSet {
  std::vector<Anchor> anchors;
  std::vector<int> level_offsets;  // per-level start index, plus total at the back
  int anchors_per_cell = 0;
  int num_anchors() const { return static_cast<int>(anchors.size()); }
};

inline constexpr double kDefaultAspectRatios[] = {1.0, 2.0, 0.5};

// SSD-style linear scale schedule over pyramid levels.
std::vector<double> anchor_scales(int num_levels, double s_min = 0.1, double s_max = 0.8);

AnchorSet generate_anchors(
    std::span<const std::pair<int, int>> level_shapes, std::span<const double> scales,
    std::span<const double> aspect_ratios = kDefaultAspectRatios);

struct BoxVariances {
  double center = 0.1;
  double size = 0.2;
};

std::array<double, 4> encode_box(const Anchor& anchor, const Box& box,
                                 BoxVariances variances = {});
Box decode_box(const Anchor& anchor, const std::array<double, 4>& offsets,
               BoxVariances variances = {});

struct MatchResult {
  std::vector<int> assignment;                  // -1 background, else gt index
  std::vector<std::array<double, 4>> targets;   // encoded regression targets (positives)
  int num_pos = 0;
};

MatchResult match_anchors(const AnchorSet& anchors, std::span<const Box> gt_boxes,
                          double iou_threshold = 0.5);

struct Detection {
  Box box;
  int class_id = 0;   // object class, background excluded
  double score = 0.0;
};

// One shared 3x3 head pair for every pyramid level (all levels are width d);
// per-level heads stay available behind the `shared` flag.
template <typename T>
struct DetectionHeads {
  int num_classes = 0;       // includes background at index 0
  int anchors_per_cell = 0;
  int width = 0;
  bool shared = true;
  std::vector<Conv2dLayer<T>> cls;
  std::vector<Conv2dLayer<T>> box;

  static DetectionHeads create(int d, int anchors_per_cell, int num_classes,
                               int num_levels, bool shared, CounterRng& rng);
  // Per-level (class_logits Bx(A*K)xHxW, box_preds Bx(A*4)xHxW).
  std::vector<std::pair<Tensor<T>, Tensor<T>>> operator()(
      std::span<const Tensor<T>> pyramid) const;
  void collect(ParamList<T>& out, const std::string& prefix = "heads") const;
};

// Reorders per-level head maps into one BxNxC tensor whose anchor axis matches
// generate_anchors order: level-major, then row, column, aspect ratio.
template <typename T>
Tensor<T> flatten_head_maps(std::span<const Tensor<T>> maps, int anchors_per_cell,
                            int channels_per_anchor);

// Softmax cross-entropy + smooth-L1 with 3:1 hard negative mining, normalized
// by max(1, total positives). Zero positives fall back to classification on
// the hardest negpos_ratio negatives per image.
template <typename T>
Tensor<T> multibox_loss(const Tensor<T>& class_logits, const Tensor<T>& box_preds,
                        std::span<const MatchResult> matches,
                        std::span<const std::vector<int>> gt_classes,
                        int negpos_ratio = 3);

// Greedy per-class suppression, deterministic: candidates ordered by
// (score desc, class, box lexicographic).
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh = 0.45,
                           double score_thresh = 0.0, int top_k = 200);

template <typename T>
std::vector<std::vector<Detection>> decode_detections(
    const Tensor<T>& class_logits, const Tensor<T>& box_preds, const AnchorSet& anchors,
    double score_thresh = 0.01, double nms_iou = 0.45, int top_k = 200);

// Line-oriented export: "image_id class score x1 y1 x2 y2", 6 decimal places.
void save_detections(const std::string& path,
                     std::span<const std::vector<Detection>> per_image);
std::vector<std::vector<Detection>> load_detections(const std::string& path);

}  // namespace pyrdet
