#include "pyrdet/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace pyrdet {

namespace {

struct SortedDet {
  ScoredBox det;
  int original = 0;
};

bool det_order(const SortedDet& a, const SortedDet& b) {
  if (a.det.score != b.det.score) return a.det.score > b.det.score;
  if (a.det.image_id != b.det.image_id) return a.det.image_id < b.det.image_id;
  if (box_less(a.det.box, b.det.box)) return true;
  if (box_less(b.det.box, a.det.box)) return false;
  return a.original < b.original;
}

// Shared matcher: fills match_out (aligned with the original det order) with
// the consumed gt index or -1, and returns AP.
double ap_impl(const std::vector<ScoredBox>& dets, const std::vector<GtBoxRef>& gts,
               double iou_thresh, std::vector<int>* match_out,
               std::vector<PrPoint>* pr_out) {
  if (match_out) match_out->assign(dets.size(), -1);
  if (pr_out) pr_out->clear();
  if (gts.empty()) return 0.0;

  std::vector<SortedDet> sorted;
  sorted.reserve(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i)
    sorted.push_back({dets[i], static_cast<int>(i)});
  std::sort(sorted.begin(), sorted.end(), det_order);

  std::vector<bool> used(gts.size(), false);
  std::vector<bool> tp(sorted.size(), false);
  int tp_count = 0;
  std::vector<double> precision(sorted.size(), 0.0);
  std::vector<double> recall(sorted.size(), 0.0);
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[j] || gts[j].image_id != sorted[i].det.image_id) continue;
      const double v = iou(sorted[i].det.box, gts[j].box);
      if (v >= iou_thresh && v > best_iou) {
        best = static_cast<int>(j);
        best_iou = v;
      }
    }
    if (best >= 0) {
      used[best] = true;
      tp[i] = true;
      ++tp_count;
      if (match_out) (*match_out)[sorted[i].original] = best;
    }
    precision[i] = static_cast<double>(tp_count) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp_count) / static_cast<double>(gts.size());
  }
  if (pr_out)
    for (std::size_t i = 0; i < sorted.size(); ++i)
      pr_out->push_back({sorted[i].det.score, precision[i], recall[i]});

  // Precision envelope from the back; AP sums it over true positives.
  double envelope = 0.0;
  std::vector<double> env(sorted.size(), 0.0);
  for (std::size_t i = sorted.size(); i-- > 0;) {
    envelope = std::max(envelope, precision[i]);
    env[i] = envelope;
  }
  double ap = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i)
    if (tp[i]) ap += env[i];
  return ap / static_cast<double>(gts.size());
}

[[noreturn]] void io_fail(const std::string& msg) { throw std::runtime_error(msg); }

void append_double(std::string& out, const char* key, double v) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "%s %.17g\n", key, v);
  out += buf;
}

}  // namespace

double average_precision(std::vector<ScoredBox> dets, const std::vector<GtBoxRef>& gts,
                         double iou_thresh) {
  return ap_impl(dets, gts, iou_thresh, nullptr, nullptr);
}

LatencyStats measure_latency(const std::function<void()>& fn, int runs, int warmup) {
  if (runs < 1) throw std::invalid_argument("measure_latency: need at least one run");
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> ms;
  ms.reserve(runs);
  for (int i = 0; i < runs; ++i) {
    const auto t0 = clock::now();
    fn();
    const auto t1 = clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  LatencyStats stats;
  stats.runs = runs;
  stats.median_ms = runs % 2 == 1 ? ms[runs / 2] : 0.5 * (ms[runs / 2 - 1] + ms[runs / 2]);
  stats.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / runs;
  stats.p90_ms = ms[std::min<std::size_t>(ms.size() - 1,
                                          static_cast<std::size_t>(std::ceil(0.9 * runs)) - 1)];
  return stats;
}

EvalReport evaluate_detections(const std::vector<std::vector<Detection>>& per_image,
                               const std::vector<std::vector<GtObject>>& gt_per_image,
                               int image_size, double iou_thresh) {
  if (gt_per_image.empty()) throw std::invalid_argument("evaluate_detections: empty dataset");
  if (per_image.size() != gt_per_image.size())
    throw std::invalid_argument(
        "evaluate_detections: detection and annotation image counts differ");

  EvalReport report;
  report.iou_thresh = iou_thresh;
  report.num_images = static_cast<int>(per_image.size());

  int classes_with_gt = 0;
  std::array<int, kNumBuckets> bucket_classes{};
  for (int c = 0; c < kNumShapeClasses; ++c) {
    std::vector<ScoredBox> dets;
    std::vector<GtBoxRef> gts;
    std::vector<int> gt_bucket;
    for (std::size_t img = 0; img < per_image.size(); ++img) {
      for (const Detection& d : per_image[img])
        if (d.class_id == c)
          dets.push_back({static_cast<int>(img), d.score, d.box});
      for (const GtObject& g : gt_per_image[img])
        if (g.class_id == c) {
          gts.push_back({static_cast<int>(img), g.box(image_size)});
          gt_bucket.push_back(g.bucket);
        }
    }
    report.num_detections += static_cast<int>(dets.size());
    report.num_gt += static_cast<int>(gts.size());

    std::vector<int> matched;
    report.class_ap[c] =
        ap_impl(dets, gts, iou_thresh, &matched, &report.pr_curves[c]);
    if (!gts.empty()) {
      report.map += report.class_ap[c];
      ++classes_with_gt;
    }

    // Size-bucketed AP: keep bucket-b gts, drop detections that matched a gt
    // of another bucket, leave unmatched detections in as false positives.
    for (int b = 0; b < kNumBuckets; ++b) {
      std::vector<GtBoxRef> bgts;
      std::vector<int> remap(gts.size(), -1);
      for (std::size_t j = 0; j < gts.size(); ++j)
        if (gt_bucket[j] == b) {
          remap[j] = static_cast<int>(bgts.size());
          bgts.push_back(gts[j]);
        }
      if (bgts.empty()) continue;
      std::vector<ScoredBox> bdets;
      for (std::size_t i = 0; i < dets.size(); ++i)
        if (matched[i] < 0 || gt_bucket[matched[i]] == b) bdets.push_back(dets[i]);
      report.bucket_ap[b] += ap_impl(bdets, bgts, iou_thresh, nullptr, nullptr);
      ++bucket_classes[b];
    }
  }
  if (classes_with_gt > 0) report.map /= classes_with_gt;
  for (int b = 0; b < kNumBuckets; ++b)
    if (bucket_classes[b] > 0) report.bucket_ap[b] /= bucket_classes[b];
  return report;
}

std::string EvalReport::serialize() const {
  std::string out = "pyrdet-eval 1\n";
  out += "seed " + std::to_string(seed) + "\n";
  out += "config " + (config_fingerprint.empty() ? std::string("-") : config_fingerprint) +
         "\n";
  append_double(out, "iou_thresh", iou_thresh);
  out += "num_images " + std::to_string(num_images) + "\n";
  out += "num_gt " + std::to_string(num_gt) + "\n";
  out += "num_detections " + std::to_string(num_detections) + "\n";
  append_double(out, "map", map);
  for (int c = 0; c < kNumShapeClasses; ++c)
    append_double(out, ("ap_" + std::string(kShapeNames[c])).c_str(), class_ap[c]);
  for (int b = 0; b < kNumBuckets; ++b)
    append_double(out, ("ap_" + std::string(kBucketNames[b])).c_str(), bucket_ap[b]);
  append_double(out, "latency_median_ms", latency.median_ms);
  append_double(out, "latency_mean_ms", latency.mean_ms);
  append_double(out, "latency_p90_ms", latency.p90_ms);
  out += "latency_runs " + std::to_string(latency.runs) + "\n";
  return out;
}

EvalReport EvalReport::parse(const std::string& text) {
  std::istringstream in(text);
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "pyrdet-eval" || version != 1)
    io_fail("EvalReport: not a pyrdet eval report");
  EvalReport r;
  std::string key;
  while (in >> key) {
    if (key == "seed") in >> r.seed;
    else if (key == "config") {
      in >> r.config_fingerprint;
      if (r.config_fingerprint == "-") r.config_fingerprint.clear();
    } else if (key == "iou_thresh") in >> r.iou_thresh;
    else if (key == "num_images") in >> r.num_images;
    else if (key == "num_gt") in >> r.num_gt;
    else if (key == "num_detections") in >> r.num_detections;
    else if (key == "map") in >> r.map;
    else if (key == "latency_median_ms") in >> r.latency.median_ms;
    else if (key == "latency_mean_ms") in >> r.latency.mean_ms;
    else if (key == "latency_p90_ms") in >> r.latency.p90_ms;
    else if (key == "latency_runs") in >> r.latency.runs;
    else {
      bool known = false;
      for (int c = 0; c < kNumShapeClasses; ++c)
        if (key == "ap_" + std::string(kShapeNames[c])) {
          in >> r.class_ap[c];
          known = true;
        }
      for (int b = 0; b < kNumBuckets; ++b)
        if (key == "ap_" + std::string(kBucketNames[b])) {
          in >> r.bucket_ap[b];
          known = true;
        }
      if (!known) io_fail("EvalReport: unknown key " + key);
    }
    if (!in) io_fail("EvalReport: malformed value for " + key);
  }
  return r;
}

void save_report(const std::string& path, const EvalReport& report) {
  std::ofstream file(path);
  if (!file) io_fail("save_report: cannot open " + path);
  file << report.serialize();
  if (!file) io_fail("save_report: write failed on " + path);
}

EvalReport load_report(const std::string& path) {
  std::ifstream file(path);
  if (!file) io_fail("load_report: cannot open " + path);
  std::stringstream buf;
  buf << file.rdbuf();
  return EvalReport::parse(buf.str());
}

void save_pr_csv(const std::string& path, const EvalReport& report) {
  std::ofstream file(path);
  if (!file) io_fail("save_pr_csv: cannot open " + path);
  file << "class,score,precision,recall\n";
  char line[160];
  for (int c = 0; c < kNumShapeClasses; ++c)
    for (const PrPoint& p : report.pr_curves[c]) {
      std::snprintf(line, sizeof(line), "%s,%.17g,%.17g,%.17g\n", kShapeNames[c], p.score,
                    p.precision, p.recall);
      file << line;
    }
  if (!file) io_fail("save_pr_csv: write failed on " + path);
}

}  // namespace pyrdet
