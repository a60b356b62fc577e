#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pyrdet/box.hpp"
#include "pyrdet/dataset.hpp"
#include "pyrdet/detector.hpp"

namespace pyrdet {

// One class's detections and ground truths across a set of images.
struct ScoredBox {
  int image_id = 0;
  double score = 0.0;
  Box box;
};

struct GtBoxRef {
  int image_id = 0;
  Box box;
};

// All-point interpolated AP (VOC-2010 style): sum of the precision envelope
// over true positives, divided by the gt count. Greedy matching consumes each
// gt once, highest score first; ties break by (image_id, box) so evaluation
// is order-independent. No ground truth -> 0 by convention.
double average_precision(std::vector<ScoredBox> dets, const std::vector<GtBoxRef>& gts,
                         double iou_thresh = 0.5);

struct PrPoint {
  double score = 0.0, precision = 0.0, recall = 0.0;
};

struct LatencyStats {
  double median_ms = 0.0, mean_ms = 0.0, p90_ms = 0.0;
  int runs = 0;
};

// Median-of-runs wall time; warmup iterations are discarded.
LatencyStats measure_latency(const std::function<void()>& fn, int runs = 50,
                             int warmup = 5);

struct EvalReport {
  double map = 0.0;
  std::array<double, kNumShapeClasses> class_ap{};
  std::array<double, kNumBuckets> bucket_ap{};
  int num_images = 0, num_gt = 0, num_detections = 0;
  double iou_thresh = 0.5;
  std::uint64_t seed = 0;
  std::string config_fingerprint;
  LatencyStats latency;  // zeros unless a model run filled it in
  std::array<std::vector<PrPoint>, kNumShapeClasses> pr_curves;

  // Fixed key order; serialize/parse round-trip exactly.
  std::string serialize() const;
  static EvalReport parse(const std::string& text);
};

// Pure function of exported detections and annotations.
EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& per_image,
                               const std::vector<std::vector<GtObject>>& gt_per_image,
                               int image_size, double iou_thresh = 0.5);

void save_report(const std::string& path, const EvalReport& report);
EvalReport load_report(const std::string& path);
// CSV of PR-curve points: class,score,precision,recall.
void save_pr_csv(const std::string& path, const EvalReport& report);

}  // namespace pyrdet
