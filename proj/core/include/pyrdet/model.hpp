#pragma once

#include <utility>
#include <vector>

#include "pyrdet/backbone.hpp"
#include "pyrdet/checkpoint.hpp"
#include "pyrdet/config.hpp"
#include "pyrdet/detector.hpp"
#include "pyrdet/pyramid.hpp"

namespace pyrdet {

// Full detector: backbone hierarchy -> feature pyramid -> detection heads,
// with the anchor grid tiled on the pyramid's level resolutions.
template <typename T>
class DetectorModel {
 public:
  static DetectorModel create(const ExperimentConfig& config);

  // Flattened (class_logits BxNxK, box_preds BxNx4) in anchor order.
  std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& images) const;

  // Decoded per-image detections using the config's thresholds.
  std::vector<std::vector<Detection>> detect(const Tensor<T>& images) const;

  const ExperimentConfig& config() const { return config_; }
  const AnchorSet& anchors() const { return anchors_; }
  const Backbone<T>& backbone() const { return backbone_; }
  const PyramidNetwork<T>& pyramid() const { return pyramid_; }
  const DetectionHeads<T>& heads() const { return heads_; }

  // Names under backbone.* / pyramid.* / heads.*. Tensors are shared handles:
  // optimizer steps and checkpoint loads mutate the live model.
  ParamList<T> parameters() const;

  MetaList checkpoint_meta() const;  // variant, seed, config fingerprint

 private:
  explicit DetectorModel(const ExperimentConfig& config);

  ExperimentConfig config_;
  Backbone<T> backbone_;
  PyramidNetwork<T> pyramid_;
  DetectionHeads<T> heads_;
  AnchorSet anchors_;
};

}  // namespace pyrdet
