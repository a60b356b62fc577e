#include "pyrdet/backbone.hpp"

#include <stdexcept>
#include <string>

namespace pyrdet {

namespace {
// Init stream offset so backbone draws are independent of other modules
// seeded from the same experiment seed.
constexpr std::uint64_t kBackboneInitStream = 10;
}  // namespace

void BackboneConfig::validate() const {
  if (num_levels < 2)
    throw std::invalid_argument("BackboneConfig: num_levels must be >= 2, got " +
                                std::to_string(num_levels));
  if (stem_channels < 1 || in_channels < 1)
    throw std::invalid_argument("BackboneConfig: channel counts must be positive");
  if (input_size < 1 || (input_size % (1 << num_levels)) != 0)
    throw std::invalid_argument(
        "BackboneConfig: input_size " + std::to_string(input_size) +
        " is not divisible by 2^" + std::to_string(num_levels) +
        "; level resolutions must be integral");
}

template <typename T>
Backbone<T>::Backbone(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  CounterRng rng(seed, kBackboneInitStream);
  int cin = config_.in_channels;
  for (int level = 1; level <= config_.num_levels; ++level) {
    const int cout = config_.level_channels(level);
    Block block;
    block.conv1 = Conv2dLayer<T>::create(cout, cin, 3, 1, 1, /*with_bias=*/true, rng);
    block.conv2 = Conv2dLayer<T>::create(cout, cout, 3, 2, 1, /*with_bias=*/true, rng);
    blocks_.push_back(std::move(block));
    cin = cout;
  }
}

template <typename T>
FeatureHierarchy<T> Backbone<T>::forward(const Tensor<T>& images) const {
  if (!images.defined() || images.ndim() != 4 || images.dim(1) != config_.in_channels ||
      images.dim(2) != config_.input_size || images.dim(3) != config_.input_size)
    throw std::invalid_argument(
        "Backbone::forward: expected Bx" + std::to_string(config_.in_channels) + "x" +
        std::to_string(config_.input_size) + "x" + std::to_string(config_.input_size) +
        " images, got " + (images.defined() ? shape_str(images.shape()) : "undefined"));

  FeatureHierarchy<T> hier;
  hier.first_level = 1;
  Tensor<T> h = images;
  for (int level = 1; level <= config_.num_levels; ++level) {
    const Block& block = blocks_[static_cast<std::size_t>(level - 1)];
    h = ops::relu(block.conv2(ops::relu(block.conv1(h))));
    hier.maps.push_back(h);
    hier.strides.push_back(config_.level_stride(level));
  }
  return hier;
}

template <typename T>
void Backbone<T>::collect(ParamList<T>& out) const {
  for (int level = 1; level <= config_.num_levels; ++level) {
    const std::string prefix = "backbone.level" + std::to_string(level);
    const Block& block = blocks_[static_cast<std::size_t>(level - 1)];
    block.conv1.collect(out, prefix + ".conv1");
    block.conv2.collect(out, prefix + ".conv2");
  }
}

template <typename T>
std::int64_t Backbone<T>::param_count() const {
  ParamList<T> params;
  collect(params);
  return pyrdet::param_count(params);
}

template class Backbone<float>;
template class Backbone<double>;

}  // namespace pyrdet
