#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "pyrdet/backbone.hpp"
#include "pyrdet/dataset.hpp"
#include "pyrdet/pyramid.hpp"

namespace pyrdet {

// The full reproducibility record for one run. Serializes to a sectioned
// key-value text file; every command echoes the effective config so a run's
// outputs can be traced back to it.
struct ExperimentConfig {
  // [dataset] -- scene.seed mirrors the run seed and is not its own key.
  SceneSpec scene;
  int n_train = 400;
  int n_val = 120;

  // [backbone] -- input_size follows scene.image_size.
  BackboneConfig backbone;

  // [pyramid]
  PyramidVariant variant = PyramidVariant::kGlobalLocal;
  PyramidConfig pyramid;

  // [detector]
  bool shared_heads = true;
  double anchor_s_min = 0.1;
  double anchor_s_max = 0.8;
  double match_iou = 0.5;
  int negpos_ratio = 3;
  double score_thresh = 0.01;
  double nms_iou = 0.45;
  int top_k = 200;

  // [train] -- three-stage LR schedule.
  std::array<int, 3> stage_epochs = {6, 2, 2};
  std::array<double, 3> stage_lr = {1e-3, 1e-4, 1e-5};
  int batch_size = 16;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool hflip = true;

  // [run]
  std::uint64_t seed = 0;
  std::string out_dir = "runs/exp";
  std::string data_dir = "data/synth";
  int threads = 0;  // 0 = all hardware threads

  int num_classes() const { return kNumShapeClasses + 1; }  // + background
  int total_epochs() const { return stage_epochs[0] + stage_epochs[1] + stage_epochs[2]; }
  double lr_for_epoch(int epoch) const;

  // Derived views with the shared fields stamped in; use these instead of the
  // raw members so seed and image size cannot drift apart.
  SceneSpec scene_spec() const;
  BackboneConfig backbone_config() const;

  void validate() const;  // throws std::invalid_argument

  // Fixed section and key order; parse(serialize()) reproduces the config
  // exactly (doubles use shortest round-trip formatting).
  std::string serialize() const;
  static ExperimentConfig parse(const std::string& text);

  // Hash of every result-affecting field: paths and thread caps are excluded,
  // so runs that must produce identical outputs share a fingerprint.
  std::string fingerprint() const;
};

ExperimentConfig load_config(const std::string& path);
void save_config(const std::string& path, const ExperimentConfig& config);

}  // namespace pyrdet
