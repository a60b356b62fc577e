#include "pyrdet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <utility>

#include "pyrdet/checkpoint.hpp"
#include "pyrdet/rng.hpp"

namespace pyrdet {
namespace {

// Restores the finite-check flag on scope exit; the hot loop runs with checks
// off and re-validates the loss value each step instead.
struct FiniteCheckGuard {
  bool saved = finite_checks_enabled();
  ~FiniteCheckGuard() { set_finite_checks(saved); }
};

struct SampleTargets {
  MatchResult match;
  MatchResult match_flipped;
  std::vector<int> classes;
};

std::vector<Box> gt_boxes(const Sample& sample, int image_size) {
  std::vector<Box> boxes;
  boxes.reserve(sample.objects.size());
  for (const GtObject& o : sample.objects) boxes.push_back(o.box(image_size));
  return boxes;
}

std::vector<Box> flip_boxes(std::vector<Box> boxes) {
  for (Box& b : boxes) {
    const double x1 = b.x1;
    b.x1 = 1.0 - b.x2;
    b.x2 = 1.0 - x1;
  }
  return boxes;
}

std::string fmt_map(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

template <typename T>
void SgdOptimizer<T>::step(ParamList<T>& params, double lr) {
  if (velocity_.empty()) {
    velocity_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      velocity_[i].assign(static_cast<std::size_t>(params[i].tensor.size()), T(0));
  }
  if (velocity_.size() != params.size())
    throw std::invalid_argument("SgdOptimizer: parameter list changed between steps");

  const T mu = static_cast<T>(momentum_);
  const T wd = static_cast<T>(weight_decay_);
  const T rate = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].tensor.raw();
    auto& v = velocity_[i];
    if (v.size() != w.size())
      throw std::invalid_argument("SgdOptimizer: parameter shape changed between steps");
    if (params[i].tensor.has_grad()) {
      const auto g = params[i].tensor.grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mu * v[j] + g[j] + wd * w[j];
        w[j] -= rate * v[j];
      }
    } else {
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = mu * v[j] + wd * w[j];
        w[j] -= rate * v[j];
      }
    }
    params[i].tensor.zero_grad();
  }
}

template class SgdOptimizer<float>;
template class SgdOptimizer<double>;

Tensor<float> stack_images(std::span<const Sample> samples, std::span<const int> indices,
                           std::span<const unsigned char> flip) {
  if (indices.empty()) throw std::invalid_argument("stack_images: empty batch");
  if (flip.size() != indices.size())
    throw std::invalid_argument("stack_images: flip flags do not match the batch");
  const Tensor<float>& first = samples[static_cast<std::size_t>(indices[0])].image;
  const std::int64_t s = first.dim(1);
  const std::int64_t plane = s * s;
  Tensor<float> out =
      Tensor<float>::zeros({static_cast<std::int64_t>(indices.size()), 1, s, s});
  auto dst = out.raw();
  for (std::size_t bi = 0; bi < indices.size(); ++bi) {
    const auto src = samples[static_cast<std::size_t>(indices[bi])].image.data();
    float* d = dst.data() + static_cast<std::int64_t>(bi) * plane;
    if (!flip[bi]) {
      std::copy(src.begin(), src.end(), d);
    } else {
      for (std::int64_t y = 0; y < s; ++y)
        for (std::int64_t x = 0; x < s; ++x) d[y * s + x] = src[y * s + (s - 1 - x)];
    }
  }
  return out;
}

TrainResult train_detector(const ExperimentConfig& cfg, const Dataset& data,
                           DetectorModel<float>& model, const std::string& checkpoint_path,
                           std::ostream* log) {
  cfg.validate();
  if (data.train.empty() || data.val.empty())
    throw std::invalid_argument("train_detector: dataset has an empty split");

  const int image_size = cfg.scene.image_size;
  const int n = static_cast<int>(data.train.size());

  // Anchor assignments depend only on the gt boxes, so both orientations can
  // be matched once up front.
  std::vector<SampleTargets> targets;
  targets.reserve(data.train.size());
  for (const Sample& sample : data.train) {
    SampleTargets t;
    const std::vector<Box> boxes = gt_boxes(sample, image_size);
    t.match = match_anchors(model.anchors(), boxes, cfg.match_iou);
    t.match_flipped = match_anchors(model.anchors(), flip_boxes(boxes), cfg.match_iou);
    for (const GtObject& o : sample.objects) t.classes.push_back(o.class_id);
    targets.push_back(std::move(t));
  }

  ParamList<float> params = model.parameters();
  SgdOptimizer<float> opt(cfg.momentum, cfg.weight_decay);
  CounterRng shuffle_rng(cfg.seed, kShuffleStream);
  CounterRng augment_rng(cfg.seed, kAugmentStream);

  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  TrainResult result;
  FiniteCheckGuard guard;
  set_finite_checks(false);

  if (log) (*log) << "epoch, lr, train_loss, val_mAP\n" << std::flush;

  auto save_best = [&](int epoch, double val_map) {
    MetaList meta = model.checkpoint_meta();
    meta.emplace_back("epoch", std::to_string(epoch));
    meta.emplace_back("val_map", fmt_map(val_map));
    save_checkpoint(checkpoint_path, params, meta);
  };

  for (int epoch = 0; epoch < cfg.total_epochs(); ++epoch) {
    const double lr = cfg.lr_for_epoch(epoch);

    // Fisher-Yates over the persistent shuffle stream.
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(shuffle_rng.next_below(static_cast<std::uint64_t>(i) + 1));
      std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    }

    double loss_sum = 0.0;
    int batches = 0;
    for (int start = 0; start < n && !result.diverged; start += cfg.batch_size) {
      const int b = std::min(cfg.batch_size, n - start);
      std::vector<int> idx(order.begin() + start, order.begin() + start + b);
      std::vector<unsigned char> flip(static_cast<std::size_t>(b), 0);
      if (cfg.hflip)
        for (int i = 0; i < b; ++i)
          flip[static_cast<std::size_t>(i)] =
              static_cast<unsigned char>(augment_rng.next_u64() & 1);

      std::vector<MatchResult> matches;
      std::vector<std::vector<int>> classes;
      matches.reserve(idx.size());
      classes.reserve(idx.size());
      for (int i = 0; i < b; ++i) {
        const SampleTargets& t = targets[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
        matches.push_back(flip[static_cast<std::size_t>(i)] ? t.match_flipped : t.match);
        classes.push_back(t.classes);
      }

      const Tensor<float> images = stack_images(data.train, idx, flip);
      Tape<float> tape;
      const auto [logits, boxes] = model.forward(images);
      const Tensor<float> loss =
          multibox_loss(logits, boxes, matches, classes, cfg.negpos_ratio);
      const double value = static_cast<double>(loss.data()[0]);
      if (!std::isfinite(value)) {
        result.diverged = true;
        break;
      }
      ops::backward(loss);
      opt.step(params, lr);
      loss_sum += value;
      ++batches;
    }
    if (result.diverged) break;

    const double train_loss = loss_sum / std::max(1, batches);
    const EvalReport report = evaluate_model(model, data.val);

    EpochLog entry{epoch, lr, train_loss, report.map};
    result.log.push_back(entry);
    if (log) {
      char lr_buf[32];
      std::snprintf(lr_buf, sizeof(lr_buf), "%g", lr);
      (*log) << epoch << ", " << lr_buf << ", " << fmt_map(train_loss) << ", "
             << fmt_map(report.map) << "\n"
             << std::flush;
    }

    if (report.map > result.best_val_map || result.best_epoch < 0) {
      result.best_epoch = epoch;
      result.best_val_map = report.map;
      save_best(epoch, report.map);
    }
  }

  // Divergence before the first completed epoch: the live parameters are the
  // last state reached by a finite step, so persist those.
  if (result.diverged && result.best_epoch < 0) save_best(-1, 0.0);
  return result;
}

std::vector<std::vector<Detection>> detect_samples(const DetectorModel<float>& model,
                                                   std::span<const Sample> samples) {
  const int batch = model.config().batch_size;
  const int n = static_cast<int>(samples.size());
  std::vector<std::vector<Detection>> per_image;
  per_image.reserve(samples.size());
  for (int start = 0; start < n; start += batch) {
    const int b = std::min(batch, n - start);
    std::vector<int> idx(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    const std::vector<unsigned char> flip(static_cast<std::size_t>(b), 0);
    const Tensor<float> images = stack_images(samples, idx, flip);
    auto dets = model.detect(images);
    for (auto& d : dets) per_image.push_back(std::move(d));
  }
  return per_image;
}

EvalReport evaluate_model(const DetectorModel<float>& model, std::span<const Sample> samples) {
  const auto per_image = detect_samples(model, samples);
  std::vector<std::vector<GtObject>> gts;
  gts.reserve(samples.size());
  for (const Sample& s : samples) gts.push_back(s.objects);
  EvalReport report =
      evaluate_detections(per_image, gts, model.config().scene.image_size);
  report.seed = model.config().seed;
  report.config_fingerprint = model.config().fingerprint();
  return report;
}

}  // namespace pyrdet
