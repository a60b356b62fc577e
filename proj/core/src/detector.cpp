#include "pyrdet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace pyrdet {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

template <typename T>
bool tape_wants(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::current() == nullptr) return false;
  for (const Tensor<T>* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T>
void finish(const char* op, std::vector<Tensor<T>> inputs, Tensor<T>& out, bool record,
            std::function<void()> backward_fn) {
  if (finite_checks_enabled()) out.check_finite(op);
  if (record) Tape<T>::current()->record(op, std::move(inputs), out, std::move(backward_fn));
}

}  // namespace

Box anchor_box(const Anchor& a) {
  return Box{a.cx - 0.5 * a.w, a.cy - 0.5 * a.h, a.cx + 0.5 * a.w, a.cy + 0.5 * a.h};
}

std::vector<double> anchor_scales(int num_levels, double s_min, double s_max) {
  if (num_levels < 1) fail("anchor_scales: need at least one level");
  if (!(s_min > 0.0) || !(s_max > s_min))
    fail("anchor_scales: require 0 < s_min < s_max");
  std::vector<double> scales;
  if (num_levels == 1) {
    scales.push_back(s_min);
    return scales;
  }
  for (int l = 0; l < num_levels; ++l)
    scales.push_back(s_min + (s_max - s_min) * l / (num_levels - 1));
  return scales;
}

AnchorSet generate_anchors(std::span<const std::pair<int, int>> level_shapes,
                           std::span<const double> scales,
                           std::span<const double> aspect_ratios) {
  if (level_shapes.empty()) fail("generate_anchors: no levels");
  if (level_shapes.size() != scales.size())
    fail("generate_anchors: one scale per level required");
  if (aspect_ratios.empty()) fail("generate_anchors: no aspect ratios");
  for (std::size_t l = 1; l < scales.size(); ++l)
    if (!(scales[l] > scales[l - 1]))
      fail("generate_anchors: scales must be strictly increasing with level");
  for (double a : aspect_ratios)
    if (!(a > 0.0)) fail("generate_anchors: aspect ratios must be positive");

  AnchorSet set;
  set.anchors_per_cell = static_cast<int>(aspect_ratios.size());
  for (std::size_t l = 0; l < level_shapes.size(); ++l) {
    set.level_offsets.push_back(set.num_anchors());
    const auto [h, w] = level_shapes[l];
    if (h < 1 || w < 1) fail("generate_anchors: empty level grid");
    const double s = scales[l];
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (double a : aspect_ratios) {
          Anchor anchor;
          anchor.cx = (x + 0.5) / w;
          anchor.cy = (y + 0.5) / h;
          // h first, then w = a*h, so w/h reproduces the ratio exactly.
          anchor.h = s / std::sqrt(a);
          anchor.w = a * anchor.h;
          anchor.level = static_cast<int>(l);
          set.anchors.push_back(anchor);
        }
      }
    }
  }
  set.level_offsets.push_back(set.num_anchors());
  return set;
}

std::array<double, 4> encode_box(const Anchor& anchor, const Box& box,
                                 BoxVariances variances) {
  if (!box_valid(box)) fail("encode_box: box sides must be positive");
  if (!(anchor.w > 0.0) || !(anchor.h > 0.0)) fail("encode_box: anchor sides must be positive");
  const double cx = 0.5 * (box.x1 + box.x2);
  const double cy = 0.5 * (box.y1 + box.y2);
  const double w = box.x2 - box.x1;
  const double h = box.y2 - box.y1;
  return {(cx - anchor.cx) / (variances.center * anchor.w),
          (cy - anchor.cy) / (variances.center * anchor.h),
          std::log(w / anchor.w) / variances.size,
          std::log(h / anchor.h) / variances.size};
}

Box decode_box(const Anchor& anchor, const std::array<double, 4>& offsets,
               BoxVariances variances) {
  if (!(anchor.w > 0.0) || !(anchor.h > 0.0)) fail("decode_box: anchor sides must be positive");
  const double cx = anchor.cx + offsets[0] * variances.center * anchor.w;
  const double cy = anchor.cy + offsets[1] * variances.center * anchor.h;
  const double w = anchor.w * std::exp(offsets[2] * variances.size);
  const double h = anchor.h * std::exp(offsets[3] * variances.size);
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

MatchResult match_anchors(const AnchorSet& anchors, std::span<const Box> gt_boxes,
                          double iou_threshold) {
  const int n = anchors.num_anchors();
  const int g = static_cast<int>(gt_boxes.size());
  for (const Box& b : gt_boxes)
    if (!box_valid(b)) fail("match_anchors: invalid ground-truth box");

  MatchResult match;
  match.assignment.assign(n, -1);
  match.targets.assign(n, {0.0, 0.0, 0.0, 0.0});
  if (g == 0) return match;

  std::vector<double> overlap(static_cast<std::size_t>(n) * g);
  for (int i = 0; i < n; ++i) {
    const Box ab = anchor_box(anchors.anchors[i]);
    for (int j = 0; j < g; ++j) overlap[static_cast<std::size_t>(i) * g + j] = iou(ab, gt_boxes[j]);
  }

  // Bipartite stage: repeatedly hand the globally best (anchor, gt) pair to the
  // gt, so every gt ends up with its own anchor even at IoU 0 or when two gts
  // share a favorite. Ties break toward the lowest (anchor, gt) index.
  std::vector<char> gt_done(g, 0), anchor_taken(n, 0);
  for (int round = 0; round < std::min(n, g); ++round) {
    int bi = -1, bj = -1;
    double bv = -1.0;
    for (int i = 0; i < n; ++i) {
      if (anchor_taken[i]) continue;
      for (int j = 0; j < g; ++j) {
        if (gt_done[j]) continue;
        const double v = overlap[static_cast<std::size_t>(i) * g + j];
        if (v > bv) {
          bv = v;
          bi = i;
          bj = j;
        }
      }
    }
    if (bi < 0) break;
    match.assignment[bi] = bj;
    gt_done[bj] = 1;
    anchor_taken[bi] = 1;
  }
  // Threshold stage: remaining anchors take their best gt when IoU clears it.
  for (int i = 0; i < n; ++i) {
    if (anchor_taken[i]) continue;
    int best = -1;
    double best_iou = 0.0;
    for (int j = 0; j < g; ++j) {
      const double v = overlap[static_cast<std::size_t>(i) * g + j];
      if (v > best_iou) {
        best = j;
        best_iou = v;
      }
    }
    if (best >= 0 && best_iou >= iou_threshold) match.assignment[i] = best;
  }
  for (int i = 0; i < n; ++i) {
    if (match.assignment[i] < 0) continue;
    match.targets[i] = encode_box(anchors.anchors[i], gt_boxes[match.assignment[i]]);
    ++match.num_pos;
  }
  return match;
}

template <typename T>
DetectionHeads<T> DetectionHeads<T>::create(int d, int anchors_per_cell, int num_classes,
                                            int num_levels, bool shared, CounterRng& rng) {
  if (d < 1 || anchors_per_cell < 1 || num_levels < 1)
    fail("DetectionHeads: sizes must be positive");
  if (num_classes < 2) fail("DetectionHeads: need background plus at least one class");
  DetectionHeads heads;
  heads.num_classes = num_classes;
  heads.anchors_per_cell = anchors_per_cell;
  heads.width = d;
  heads.shared = shared;
  const int copies = shared ? 1 : num_levels;
  for (int i = 0; i < copies; ++i) {
    heads.cls.push_back(
        Conv2dLayer<T>::create(anchors_per_cell * num_classes, d, 3, 1, 1, true, rng));
    heads.box.push_back(Conv2dLayer<T>::create(anchors_per_cell * 4, d, 3, 1, 1, true, rng));
  }
  return heads;
}

template <typename T>
std::vector<std::pair<Tensor<T>, Tensor<T>>> DetectionHeads<T>::operator()(
    std::span<const Tensor<T>> pyramid) const {
  if (!shared && pyramid.size() != cls.size())
    fail("DetectionHeads: per-level heads built for a different level count");
  std::vector<std::pair<Tensor<T>, Tensor<T>>> out;
  for (std::size_t l = 0; l < pyramid.size(); ++l) {
    const Tensor<T>& x = pyramid[l];
    if (x.ndim() != 4 || x.dim(1) != width)
      fail("DetectionHeads: pyramid level must be Bx" + std::to_string(width) + "xHxW");
    const std::size_t i = shared ? 0 : l;
    out.emplace_back(cls[i](x), box[i](x));
  }
  return out;
}

template <typename T>
void DetectionHeads<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  for (std::size_t i = 0; i < cls.size(); ++i) {
    const std::string base =
        shared ? prefix : prefix + ".level" + std::to_string(i + 1);
    cls[i].collect(out, base + ".cls");
    box[i].collect(out, base + ".box");
  }
}

template <typename T>
Tensor<T> flatten_head_maps(std::span<const Tensor<T>> maps, int anchors_per_cell,
                            int channels_per_anchor) {
  if (maps.empty()) fail("flatten_head_maps: no levels");
  const int a_count = anchors_per_cell;
  const int c_count = channels_per_anchor;
  if (a_count < 1 || c_count < 1) fail("flatten_head_maps: sizes must be positive");
  const std::int64_t b = maps[0].dim(0);
  std::int64_t n_total = 0;
  for (const Tensor<T>& m : maps) {
    if (m.ndim() != 4 || m.dim(0) != b || m.dim(1) != a_count * c_count)
      fail("flatten_head_maps: every map must be Bx(A*C)xHxW with one batch size");
    n_total += m.dim(2) * m.dim(3) * a_count;
  }

  Tensor<T> out = Tensor<T>::zeros({b, n_total, c_count});
  T* dst = out.raw().data();
  std::int64_t offset = 0;
  for (const Tensor<T>& m : maps) {
    const std::int64_t h = m.dim(2), w = m.dim(3), plane = h * w;
    const T* src = m.data().data();
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x)
          for (std::int64_t a = 0; a < a_count; ++a)
            for (std::int64_t c = 0; c < c_count; ++c)
              dst[((bi * n_total) + offset + (y * w + x) * a_count + a) * c_count + c] =
                  src[(bi * a_count * c_count + a * c_count + c) * plane + y * w + x];
    offset += plane * a_count;
  }

  std::vector<Tensor<T>> inputs(maps.begin(), maps.end());
  bool record = false;
  if (Tape<T>::current() != nullptr)
    for (const Tensor<T>& m : maps)
      if (m.requires_grad()) record = true;
  auto bwd = [inputs, out, a_count, c_count, b, n_total]() mutable {
    const T* dy = out.grad().data();
    std::int64_t offset = 0;
    for (Tensor<T>& m : inputs) {
      const std::int64_t h = m.dim(2), w = m.dim(3), plane = h * w;
      if (m.requires_grad()) {
        T* dx = m.grad_buffer().data();
        for (std::int64_t bi = 0; bi < b; ++bi)
          for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
              for (std::int64_t a = 0; a < a_count; ++a)
                for (std::int64_t c = 0; c < c_count; ++c)
                  dx[(bi * a_count * c_count + a * c_count + c) * plane + y * w + x] +=
                      dy[((bi * n_total) + offset + (y * w + x) * a_count + a) * c_count + c];
      }
      offset += plane * a_count;
    }
  };
  finish("flatten_head_maps", std::move(inputs), out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> multibox_loss(const Tensor<T>& class_logits, const Tensor<T>& box_preds,
                        std::span<const MatchResult> matches,
                        std::span<const std::vector<int>> gt_classes, int negpos_ratio) {
  if (class_logits.ndim() != 3) fail("multibox_loss: logits must be BxNxK");
  const std::int64_t b = class_logits.dim(0);
  const std::int64_t n = class_logits.dim(1);
  const std::int64_t k = class_logits.dim(2);
  if (k < 2) fail("multibox_loss: need background plus at least one class");
  if (box_preds.ndim() != 3 || box_preds.dim(0) != b || box_preds.dim(1) != n ||
      box_preds.dim(2) != 4)
    fail("multibox_loss: box predictions must be BxNx4");
  if (static_cast<std::int64_t>(matches.size()) != b ||
      static_cast<std::int64_t>(gt_classes.size()) != b)
    fail("multibox_loss: one match result and gt class list per image");
  if (negpos_ratio < 1) fail("multibox_loss: negpos_ratio must be >= 1");
  // Gated like operator outputs: the training loop turns checks off and
  // watches the loss value instead, so divergence surfaces as NaN, not throw.
  if (finite_checks_enabled()) {
    class_logits.check_finite("multibox_loss logits");
    box_preds.check_finite("multibox_loss box predictions");
  }

  const T* logits = class_logits.data().data();
  const T* boxes = box_preds.data().data();

  // Per-anchor softmax probabilities, cross-entropy against the matched label.
  std::vector<T> probs(static_cast<std::size_t>(b) * n * k);
  std::vector<T> ce(static_cast<std::size_t>(b) * n);
  std::vector<int> labels(static_cast<std::size_t>(b) * n);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    if (static_cast<std::int64_t>(matches[bi].assignment.size()) != n)
      fail("multibox_loss: match result size disagrees with prediction count");
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t row = bi * n + i;
      const int gt = matches[bi].assignment[i];
      int label = 0;
      if (gt >= 0) {
        if (gt >= static_cast<int>(gt_classes[bi].size()))
          fail("multibox_loss: match refers to a missing gt class");
        label = gt_classes[bi][gt] + 1;
        if (label < 1 || label >= k) fail("multibox_loss: gt class out of range");
      }
      labels[row] = label;
      const T* x = logits + row * k;
      T m = x[0];
      for (std::int64_t c = 1; c < k; ++c) m = std::max(m, x[c]);
      T denom = T(0);
      for (std::int64_t c = 0; c < k; ++c) {
        const T e = std::exp(x[c] - m);
        probs[row * k + c] = e;
        denom += e;
      }
      for (std::int64_t c = 0; c < k; ++c) probs[row * k + c] /= denom;
      ce[row] = std::log(denom) + m - x[label];
    }
  }

  // Select positives plus the hardest negatives, per image.
  std::vector<std::int64_t> selected;  // rows entering the classification term
  std::int64_t total_pos = 0;
  for (std::int64_t bi = 0; bi < b; ++bi) {
    std::vector<std::int64_t> negatives;
    std::int64_t pos = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t row = bi * n + i;
      if (labels[row] > 0) {
        selected.push_back(row);
        ++pos;
      } else {
        negatives.push_back(row);
      }
    }
    total_pos += pos;
    const std::int64_t want = std::min<std::int64_t>(
        negatives.size(), pos > 0 ? negpos_ratio * pos : negpos_ratio);
    std::sort(negatives.begin(), negatives.end(), [&](std::int64_t a, std::int64_t c) {
      if (ce[a] != ce[c]) return ce[a] > ce[c];
      return a < c;
    });
    selected.insert(selected.end(), negatives.begin(), negatives.begin() + want);
  }

  const T norm = T(1) / static_cast<T>(std::max<std::int64_t>(1, total_pos));
  T cls_sum = T(0);
  for (std::int64_t row : selected) cls_sum += ce[row];
  T loc_sum = T(0);
  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t row = bi * n + i;
      if (labels[row] == 0) continue;
      const auto& target = matches[bi].targets[i];
      for (int j = 0; j < 4; ++j) {
        const T d = boxes[row * 4 + j] - static_cast<T>(target[j]);
        const T a = std::abs(d);
        loc_sum += a < T(1) ? T(0.5) * d * d : a - T(0.5);
      }
    }
  }

  Tensor<T> out = Tensor<T>::scalar((cls_sum + loc_sum) * norm);
  const bool record = tape_wants<T>({&class_logits, &box_preds});
  std::vector<std::array<double, 4>> targets;
  if (record) {
    targets.reserve(static_cast<std::size_t>(b) * n);
    for (std::int64_t bi = 0; bi < b; ++bi)
      targets.insert(targets.end(), matches[bi].targets.begin(), matches[bi].targets.end());
  }
  auto bwd = [class_logits = class_logits, box_preds = box_preds, out,
              probs = std::move(probs), labels = std::move(labels),
              selected = std::move(selected), targets = std::move(targets), n, k,
              norm]() mutable {
    const T g = out.grad()[0] * norm;
    if (class_logits.requires_grad()) {
      T* dl = class_logits.grad_buffer().data();
      for (std::int64_t row : selected) {
        const int label = labels[row];
        for (std::int64_t c = 0; c < k; ++c)
          dl[row * k + c] += g * (probs[row * k + c] - (c == label ? T(1) : T(0)));
      }
    }
    if (box_preds.requires_grad()) {
      T* db = box_preds.grad_buffer().data();
      const T* boxes = box_preds.data().data();
      const std::int64_t rows = box_preds.dim(0) * n;
      for (std::int64_t row = 0; row < rows; ++row) {
        if (labels[row] == 0) continue;
        for (int j = 0; j < 4; ++j) {
          const T d = boxes[row * 4 + j] - static_cast<T>(targets[row][j]);
          db[row * 4 + j] += g * std::clamp(d, T(-1), T(1));
        }
      }
    }
  };
  finish("multibox_loss", {class_logits, box_preds}, out, record, std::move(bwd));
  return out;
}

namespace {

bool detection_order(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  return box_less(a.box, b.box);
}

}  // namespace

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh,
                           double score_thresh, int top_k) {
  std::erase_if(dets, [&](const Detection& d) {
    return d.score < score_thresh || !box_valid(d.box);
  });
  std::sort(dets.begin(), dets.end(), detection_order);
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    if (top_k > 0 && static_cast<int>(kept.size()) >= top_k) break;
    bool suppressed = false;
    for (const Detection& keep : kept) {
      if (keep.class_id != d.class_id) continue;
      if (iou(keep.box, d.box) >= iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

template <typename T>
std::vector<std::vector<Detection>> decode_detections(const Tensor<T>& class_logits,
                                                      const Tensor<T>& box_preds,
                                                      const AnchorSet& anchors,
                                                      double score_thresh, double nms_iou,
                                                      int top_k) {
  if (class_logits.ndim() != 3 || box_preds.ndim() != 3)
    fail("decode_detections: predictions must be BxNxK and BxNx4");
  const std::int64_t b = class_logits.dim(0);
  const std::int64_t n = class_logits.dim(1);
  const std::int64_t k = class_logits.dim(2);
  if (n != anchors.num_anchors())
    fail("decode_detections: prediction count disagrees with anchor count");
  if (box_preds.dim(0) != b || box_preds.dim(1) != n || box_preds.dim(2) != 4)
    fail("decode_detections: box predictions must be BxNx4");

  const T* logits = class_logits.data().data();
  const T* boxes = box_preds.data().data();
  std::vector<std::vector<Detection>> out(b);
#pragma omp parallel for schedule(static) if (b > 1)
  for (std::int64_t bi = 0; bi < b; ++bi) {
    std::vector<Detection> candidates;
    std::vector<double> prob(k);
    for (std::int64_t i = 0; i < n; ++i) {
      const T* x = logits + (bi * n + i) * k;
      double m = x[0];
      for (std::int64_t c = 1; c < k; ++c) m = std::max<double>(m, x[c]);
      double denom = 0.0;
      for (std::int64_t c = 0; c < k; ++c) {
        prob[c] = std::exp(static_cast<double>(x[c]) - m);
        denom += prob[c];
      }
      double best = 0.0;
      for (std::int64_t c = 1; c < k; ++c) best = std::max(best, prob[c] / denom);
      if (best < score_thresh) continue;  // background or too weak everywhere
      const T* o = boxes + (bi * n + i) * 4;
      Box raw = decode_box(anchors.anchors[i],
                           {static_cast<double>(o[0]), static_cast<double>(o[1]),
                            static_cast<double>(o[2]), static_cast<double>(o[3])});
      if (!std::isfinite(raw.x1) || !std::isfinite(raw.y1) || !std::isfinite(raw.x2) ||
          !std::isfinite(raw.y2))
        continue;
      Box clipped{std::clamp(raw.x1, 0.0, 1.0), std::clamp(raw.y1, 0.0, 1.0),
                  std::clamp(raw.x2, 0.0, 1.0), std::clamp(raw.y2, 0.0, 1.0)};
      if (!box_valid(clipped)) continue;
      for (std::int64_t c = 1; c < k; ++c) {
        const double score = prob[c] / denom;
        if (score >= score_thresh)
          candidates.push_back({clipped, static_cast<int>(c) - 1, score});
      }
    }
    out[bi] = nms(std::move(candidates), nms_iou, 0.0, top_k);
  }
  return out;
}

void save_detections(const std::string& path,
                     std::span<const std::vector<Detection>> per_image) {
  std::ofstream file(path);
  if (!file) throw std::runtime_error("save_detections: cannot open " + path);
  char line[160];
  for (std::size_t i = 0; i < per_image.size(); ++i) {
    for (const Detection& d : per_image[i]) {
      std::snprintf(line, sizeof(line), "%zu %d %.6f %.6f %.6f %.6f %.6f\n", i, d.class_id,
                    d.score, d.box.x1, d.box.y1, d.box.x2, d.box.y2);
      file << line;
    }
  }
  if (!file) throw std::runtime_error("save_detections: write failed on " + path);
}

std::vector<std::vector<Detection>> load_detections(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw std::runtime_error("load_detections: cannot open " + path);
  std::vector<std::vector<Detection>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(file, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream in(line);
    std::size_t image_id;
    Detection d;
    if (!(in >> image_id >> d.class_id >> d.score >> d.box.x1 >> d.box.y1 >> d.box.x2 >>
          d.box.y2))
      throw std::runtime_error("load_detections: malformed line " + std::to_string(lineno) +
                               " in " + path);
    if (image_id >= out.size()) out.resize(image_id + 1);
    out[image_id].push_back(d);
  }
  return out;
}

#define PYRDET_INSTANTIATE_DETECTOR(T)                                                   \
  template struct DetectionHeads<T>;                                                     \
  template Tensor<T> flatten_head_maps<T>(std::span<const Tensor<T>>, int, int);         \
  template Tensor<T> multibox_loss<T>(const Tensor<T>&, const Tensor<T>&,                \
                                      std::span<const MatchResult>,                      \
                                      std::span<const std::vector<int>>, int);           \
  template std::vector<std::vector<Detection>> decode_detections<T>(                     \
      const Tensor<T>&, const Tensor<T>&, const AnchorSet&, double, double, int);

PYRDET_INSTANTIATE_DETECTOR(float)
PYRDET_INSTANTIATE_DETECTOR(double)

#undef PYRDET_INSTANTIATE_DETECTOR

}  // namespace pyrdet
