#pragma once

#include <cstdint>
#include <vector>

#include "pyrdet/nn.hpp"
#include "pyrdet/tensor.hpp"

namespace pyrdet {

struct BackboneConfig {
  int num_levels = 4;
  int stem_channels = 16;
  int in_channels = 1;
  int input_size = 64;

  // Levels are 1-based: level l has resolution input_size / 2^l and
  // stem_channels * 2^(l-1) channels (16, 32, 64, 128 by default).
  int level_channels(int level) const { return stem_channels << (level - 1); }
  int level_size(int level) const { return input_size >> level; }
  int level_stride(int level) const { return 1 << level; }

  void validate() const;  // throws std::invalid_argument
};

// Ordered per-level feature maps x_P..x_L at strictly decreasing resolution.
template <typename T>
struct FeatureHierarchy {
  int first_level = 1;
  std::vector<Tensor<T>> maps;     // maps[i] belongs to level first_level + i
  std::vector<int> strides;

  int num_levels() const { return static_cast<int>(maps.size()); }
  int last_level() const { return first_level + num_levels() - 1; }
  const Tensor<T>& at_level(int level) const { return maps[level - first_level]; }
};

// Toy ConvNet hierarchy: each level is 3x3 conv + ReLU + 3x3 stride-2 conv +
// ReLU, doubling channels per level.
template <typename T>
class Backbone {
 public:
  Backbone(const BackboneConfig& config, std::uint64_t seed);

  FeatureHierarchy<T> forward(const Tensor<T>& images) const;

  const BackboneConfig& config() const { return config_; }
  void collect(ParamList<T>& out) const;  // names under "backbone.level{l}.*"
  std::int64_t param_count() const;

 private:
  BackboneConfig config_;
  struct Block {
    Conv2dLayer<T> conv1, conv2;
  };
  std::vector<Block> blocks_;
};

}  // namespace pyrdet
