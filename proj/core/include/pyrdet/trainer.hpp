#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "pyrdet/config.hpp"
#include "pyrdet/dataset.hpp"
#include "pyrdet/eval.hpp"
#include "pyrdet/model.hpp"

namespace pyrdet {

// Training-time randomness (epoch shuffles, flip decisions).
inline constexpr std::uint64_t kShuffleStream = 20;
inline constexpr std::uint64_t kAugmentStream = 21;

// Classic momentum SGD with L2 weight decay folded into the gradient.
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  // v = mu*v + (g + wd*w); w -= lr*v. Clears the gradients it consumed.
  void step(ParamList<T>& params, double lr);

 private:
  double momentum_, weight_decay_;
  std::vector<std::vector<T>> velocity_;  // sized on first step
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean multibox loss over the epoch's batches
  double val_map = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  int best_epoch = -1;
  double best_val_map = 0.0;
  bool diverged = false;  // NaN loss; checkpoint_path holds the last good state
};

// Bx1xSxS stack of samples[indices[i]], horizontally flipped where flagged.
Tensor<float> stack_images(std::span<const Sample> samples, std::span<const int> indices,
                           std::span<const unsigned char> flip);

// Staged-LR SGD over cfg.total_epochs(). Writes one line per epoch
// ("epoch, lr, train_loss, val_mAP") to `log` when given, and keeps the
// best-val-mAP checkpoint at checkpoint_path. Deterministic given cfg + seed.
TrainResult train_detector(const ExperimentConfig& cfg, const Dataset& data,
                           DetectorModel<float>& model, const std::string& checkpoint_path,
                           std::ostream* log = nullptr);

// Batched decode over a sample list, one detection vector per sample.
std::vector<std::vector<Detection>> detect_samples(const DetectorModel<float>& model,
                                                   std::span<const Sample> samples);

// Detection + scoring; latency fields stay zeroed so reports reproduce bitwise.
EvalReport evaluate_model(const DetectorModel<float>& model, std::span<const Sample> samples);

}  // namespace pyrdet
