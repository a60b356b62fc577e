#include "pyrdet/model.hpp"

#include <iterator>

namespace pyrdet {
namespace {

constexpr std::uint64_t kHeadsInitStream = 12;

}  // namespace

template <typename T>
DetectorModel<T>::DetectorModel(const ExperimentConfig& config)
    : config_(config),
      backbone_(config.backbone_config(), config.seed),
      pyramid_(config.backbone_config(), config.variant, config.pyramid, config.seed) {
  const BackboneConfig bb = config.backbone_config();
  const int per_cell = static_cast<int>(std::size(kDefaultAspectRatios));
  CounterRng rng(config.seed, kHeadsInitStream);
  heads_ = DetectionHeads<T>::create(config.pyramid.d, per_cell, config.num_classes(),
                                     bb.num_levels, config.shared_heads, rng);

  std::vector<std::pair<int, int>> shapes;
  for (int l = 1; l <= bb.num_levels; ++l)
    shapes.emplace_back(bb.level_size(l), bb.level_size(l));
  const std::vector<double> scales =
      anchor_scales(bb.num_levels, config.anchor_s_min, config.anchor_s_max);
  anchors_ = generate_anchors(shapes, scales);
}

template <typename T>
DetectorModel<T> DetectorModel<T>::create(const ExperimentConfig& config) {
  config.validate();
  return DetectorModel(config);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> DetectorModel<T>::forward(const Tensor<T>& images) const {
  const FeatureHierarchy<T> hier = backbone_.forward(images);
  const std::vector<Tensor<T>> maps = pyramid_.forward(hier);
  const auto per_level = heads_(maps);
  std::vector<Tensor<T>> cls_maps, box_maps;
  cls_maps.reserve(per_level.size());
  box_maps.reserve(per_level.size());
  for (const auto& [c, b] : per_level) {
    cls_maps.push_back(c);
    box_maps.push_back(b);
  }
  Tensor<T> logits =
      flatten_head_maps<T>(cls_maps, heads_.anchors_per_cell, config_.num_classes());
  Tensor<T> boxes = flatten_head_maps<T>(box_maps, heads_.anchors_per_cell, 4);
  return {std::move(logits), std::move(boxes)};
}

template <typename T>
std::vector<std::vector<Detection>> DetectorModel<T>::detect(const Tensor<T>& images) const {
  const auto [logits, boxes] = forward(images);
  return decode_detections(logits, boxes, anchors_, config_.score_thresh, config_.nms_iou,
                           config_.top_k);
}

template <typename T>
ParamList<T> DetectorModel<T>::parameters() const {
  ParamList<T> out;
  backbone_.collect(out);
  pyramid_.collect(out);
  heads_.collect(out);
  return out;
}

template <typename T>
MetaList DetectorModel<T>::checkpoint_meta() const {
  return {{"variant", variant_name(config_.variant)},
          {"seed", std::to_string(config_.seed)},
          {"fingerprint", config_.fingerprint()}};
}

template class DetectorModel<float>;
template class DetectorModel<double>;

}  // namespace pyrdet
