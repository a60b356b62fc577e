#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pyrdet/backbone.hpp"
#include "pyrdet/nn.hpp"
#include "pyrdet/tensor.hpp"

namespace pyrdet {

enum class PyramidVariant {
  kIdentity,             // SSD baseline: per-level 1x1 width unification
  kLateral,              // FPN-style top-down linear combination
  kGlobalLocal,          // gather -> channel attention -> residual reconfiguration
  kLocalOnly,            // gather -> residual reconfiguration (no attention)
  kLocalOnlyNoResidual,  // R(X) alone, no projected shortcut
  kGlobalLocalDeepOnly,  // attention + reconfiguration over levels >= l only
};

PyramidVariant parse_variant(const std::string& name);
std::string variant_name(PyramidVariant v);
const std::vector<PyramidVariant>& all_variants();

struct PyramidConfig {
  int d = 64;  // unified pyramid width
  int r = 4;   // attention reduction ratio
  // Lateral mode: learnable scalar mixing coefficients on top of the
  // width-unifying projections (both paths stay linear and bias-free).
  bool scalar_lateral = false;
  // 0 gathers each level at its own native resolution; a level index switches
  // every gather to that single reference level's resolution.
  int reference_level = 0;
};

struct GatherSpec {
  int target_level = 0;
  int target_h = 0, target_w = 0;
  std::vector<int> included_levels;  // ascending level indices
};

// Resizes every included level to the target resolution (bilinear up,
// bin-mean pool down, identity at equal size) and concatenates the blocks in
// ascending level order.
template <typename T>
Tensor<T> gather_hierarchy(const FeatureHierarchy<T>& hier, const GatherSpec& spec);

// Squeeze-and-excitation channel gate: gates(X) = sigmoid(W2 relu(W1 gap(X))).
// Both layers are bias-free; C must be divisible by the reduction ratio.
template <typename T>
struct AttentionBlock {
  LinearLayer<T> reduce;  // (C/r) x C
  LinearLayer<T> expand;  // C x (C/r)

  static AttentionBlock create(int channels, int ratio, CounterRng& rng);

  Tensor<T> gates(const Tensor<T>& x) const;
  Tensor<T> operator()(const Tensor<T>& x) const {
    return ops::channelwise_scale(x, gates(x));
  }
};

// Residual reconfiguration head for one level: R is a 1x1 -> 3x3 -> 1x1
// bottleneck at width d with the final layer zero-initialized, so the block
// starts as the identity over the projected shortcut.
template <typename T>
struct ReconfigBlock {
  Conv2dLayer<T> conv1, conv2, conv3;
  Conv2dLayer<T> proj;  // undefined when the shortcut is the identity
  bool identity_proj = false;

  static ReconfigBlock create(int gathered_channels, int level_channels, int d,
                              bool needs_projection, bool gated_input,
                              CounterRng& rng);

  Tensor<T> residual(const Tensor<T>& gathered) const;   // R(X~)
  Tensor<T> shortcut(const Tensor<T>& level_map) const;  // W_l x_l or x_l
};

template <typename T>
class PyramidNetwork {
 public:
  PyramidNetwork(const BackboneConfig& backbone, PyramidVariant variant,
                 const PyramidConfig& config, std::uint64_t seed);

  // One output map per hierarchy level, width d. Lateral runs its top-down
  // recursion; all other variants are an independent per-level computation.
  std::vector<Tensor<T>> forward(const FeatureHierarchy<T>& hier) const;

  // x'_l computed in isolation. Bitwise-identical to the forward() entry for
  // every variant (for lateral this recomputes the recursion above l).
  Tensor<T> forward_level(const FeatureHierarchy<T>& hier, int level) const;

  // Per-level evaluation on worker threads (hardware concurrency capped at
  // num_levels); falls back to forward() for the sequential lateral variant.
  // Must not run under an active tape.
  std::vector<Tensor<T>> forward_concurrent(const FeatureHierarchy<T>& hier) const;

  GatherSpec gather_spec(int level) const;

  PyramidVariant variant() const { return variant_; }
  const PyramidConfig& config() const { return config_; }
  int num_levels() const { return backbone_.num_levels; }
  int first_level() const { return 1; }

  void collect(ParamList<T>& out) const;  // names under "pyramid.level{l}.*"
  std::int64_t param_count() const;

 private:
  Tensor<T> lateral_level(const FeatureHierarchy<T>& hier, int level) const;
  Tensor<T> reconfig_level(const FeatureHierarchy<T>& hier, int level) const;

  BackboneConfig backbone_;
  PyramidVariant variant_;
  PyramidConfig config_;
  std::vector<Conv2dLayer<T>> proj_;          // identity & lateral projections
  std::vector<Tensor<T>> alpha_, beta_;       // scalar_lateral coefficients
  std::vector<AttentionBlock<T>> attention_;  // global variants
  std::vector<ReconfigBlock<T>> reconfig_;    // all local/global variants
};

// Per-level infinity norms of f(a X1 + b X2) - a f(X1) - b f(X2); zero for
// the linear variants, structurally nonzero for the reconfiguration ones.
template <typename T>
std::vector<T> superposition_residual(const PyramidNetwork<T>& pyramid,
                                      const FeatureHierarchy<T>& x1,
                                      const FeatureHierarchy<T>& x2, T a, T b);

}  // namespace pyrdet
