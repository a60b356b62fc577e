#include "pyrdet/pyramid.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <stdexcept>

namespace pyrdet {

namespace {

constexpr std::uint64_t kPyramidInitStream = 11;

template <typename T>
Tensor<T> resize_to(const Tensor<T>& x, int h, int w) {
  const int sh = static_cast<int>(x.dim(2)), sw = static_cast<int>(x.dim(3));
  if (sh == h && sw == w) return x;
  if (sh <= h && sw <= w) return ops::bilinear_resize(x, h, w);
  if (sh >= h && sw >= w) return ops::adaptive_avg_pool(x, h, w);
  throw std::invalid_argument("gather: mixed up/down resize is not supported");
}

}  // namespace

PyramidVariant parse_variant(const std::string& name) {
  if (name == "identity") return PyramidVariant::kIdentity;
  if (name == "lateral") return PyramidVariant::kLateral;
  if (name == "global_local") return PyramidVariant::kGlobalLocal;
  if (name == "local_only") return PyramidVariant::kLocalOnly;
  if (name == "local_only_no_residual") return PyramidVariant::kLocalOnlyNoResidual;
  if (name == "global_local_deep_only") return PyramidVariant::kGlobalLocalDeepOnly;
  throw std::invalid_argument("unknown pyramid variant: " + name);
}

std::string variant_name(PyramidVariant v) {
  switch (v) {
    case PyramidVariant::kIdentity: return "identity";
    case PyramidVariant::kLateral: return "lateral";
    case PyramidVariant::kGlobalLocal: return "global_local";
    case PyramidVariant::kLocalOnly: return "local_only";
    case PyramidVariant::kLocalOnlyNoResidual: return "local_only_no_residual";
    case PyramidVariant::kGlobalLocalDeepOnly: return "global_local_deep_only";
  }
  throw std::invalid_argument("unknown pyramid variant enum value");
}

const std::vector<PyramidVariant>& all_variants() {
  static const std::vector<PyramidVariant> variants{
      PyramidVariant::kIdentity,           PyramidVariant::kLateral,
      PyramidVariant::kGlobalLocal,        PyramidVariant::kLocalOnly,
      PyramidVariant::kLocalOnlyNoResidual, PyramidVariant::kGlobalLocalDeepOnly,
  };
  return variants;
}

template <typename T>
Tensor<T> gather_hierarchy(const FeatureHierarchy<T>& hier, const GatherSpec& spec) {
  if (spec.included_levels.empty())
    throw std::invalid_argument("gather_hierarchy: included_levels is empty");
  std::vector<Tensor<T>> blocks;
  blocks.reserve(spec.included_levels.size());
  for (int level : spec.included_levels) {
    if (level < hier.first_level || level > hier.last_level())
      throw std::invalid_argument("gather_hierarchy: level " + std::to_string(level) +
                                  " not present in hierarchy");
    blocks.push_back(resize_to(hier.at_level(level), spec.target_h, spec.target_w));
  }
  if (blocks.size() == 1) return blocks.front();
  return ops::concat_channels<T>(blocks);
}

template <typename T>
AttentionBlock<T> AttentionBlock<T>::create(int channels, int ratio, CounterRng& rng) {
  if (ratio < 1 || channels % ratio != 0)
    throw std::invalid_argument("AttentionBlock: channels " + std::to_string(channels) +
                                " not divisible by reduction ratio " +
                                std::to_string(ratio));
  AttentionBlock block;
  const int reduced = channels / ratio;
  block.reduce = LinearLayer<T>::create(reduced, channels, /*with_bias=*/false, rng);
  block.expand = LinearLayer<T>::create(channels, reduced, /*with_bias=*/false, rng);
  // Zero excitation weights: every gate opens at exactly 0.5, so attention
  // starts neutral instead of randomly amplifying some channels.
  for (auto& v : block.expand.weight.raw()) v = T(0);
  return block;
}

template <typename T>
Tensor<T> AttentionBlock<T>::gates(const Tensor<T>& x) const {
  auto z = ops::global_avg_pool(x);
  return ops::sigmoid(expand(ops::relu(reduce(z))));
}

template <typename T>
ReconfigBlock<T> ReconfigBlock<T>::create(int gathered_channels, int level_channels, int d,
                                          bool needs_projection, bool gated_input,
                                          CounterRng& rng) {
  ReconfigBlock block;
  block.conv1 = Conv2dLayer<T>::create(d, gathered_channels, 1, 1, 0, true, rng);
  // Gates open at 0.5, so a gated gather arrives at half magnitude; double
  // conv1's init to keep R's activation scale the same across variants.
  if (gated_input)
    for (auto& v : block.conv1.kernel.raw()) v *= T(2);
  block.conv2 = Conv2dLayer<T>::create(d, d, 3, 1, 1, true, rng);
  block.conv3 = Conv2dLayer<T>::create(d, d, 1, 1, 0, true, rng);
  // Zero final layer: the block starts out as exactly the shortcut (Eq. 9
  // with R = 0), which keeps early training close to the plain projection.
  for (auto& v : block.conv3.kernel.raw()) v = T(0);
  block.identity_proj = !needs_projection;
  if (needs_projection) {
    block.proj = Conv2dLayer<T>::create(d, level_channels, 1, 1, 0, false, rng);
    // Damp the shortcut the same way R is damped (zero conv3): trained from
    // scratch, a full-gain projection of raw level features dominates the sum
    // and the heads fit it before R has grown at all.
    for (auto& v : block.proj.kernel.raw()) v *= T(0.1);
  }
  return block;
}

template <typename T>
Tensor<T> ReconfigBlock<T>::residual(const Tensor<T>& gathered) const {
  return conv3(ops::relu(conv2(ops::relu(conv1(gathered)))));
}

template <typename T>
Tensor<T> ReconfigBlock<T>::shortcut(const Tensor<T>& level_map) const {
  return identity_proj ? level_map : proj(level_map);
}

template <typename T>
PyramidNetwork<T>::PyramidNetwork(const BackboneConfig& backbone, PyramidVariant variant,
                                  const PyramidConfig& config, std::uint64_t seed)
    : backbone_(backbone), variant_(variant), config_(config) {
  backbone_.validate();
  if (config_.d < 1) throw std::invalid_argument("PyramidNetwork: d must be positive");
  if (config_.reference_level != 0 &&
      (config_.reference_level < 1 || config_.reference_level > backbone_.num_levels))
    throw std::invalid_argument("PyramidNetwork: reference_level out of range");

  CounterRng rng(seed, kPyramidInitStream);
  const int levels = backbone_.num_levels;
  switch (variant_) {
    case PyramidVariant::kIdentity:
    case PyramidVariant::kLateral:
      for (int l = 1; l <= levels; ++l)
        proj_.push_back(Conv2dLayer<T>::create(config_.d, backbone_.level_channels(l), 1,
                                               1, 0, /*with_bias=*/false, rng));
      if (variant_ == PyramidVariant::kLateral && config_.scalar_lateral) {
        for (int l = 1; l <= levels; ++l) {
          alpha_.push_back(Tensor<T>::full({1}, T(1), true));
          if (l < levels) beta_.push_back(Tensor<T>::full({1}, T(1), true));
        }
      }
      break;
    case PyramidVariant::kGlobalLocal:
    case PyramidVariant::kLocalOnly:
    case PyramidVariant::kLocalOnlyNoResidual:
    case PyramidVariant::kGlobalLocalDeepOnly:
      for (int l = 1; l <= levels; ++l) {
        const GatherSpec spec = gather_spec(l);
        int gathered = 0;
        for (int src : spec.included_levels) gathered += backbone_.level_channels(src);
        const bool attend = variant_ == PyramidVariant::kGlobalLocal ||
                            variant_ == PyramidVariant::kGlobalLocalDeepOnly;
        if (attend)
          attention_.push_back(AttentionBlock<T>::create(gathered, config_.r, rng));
        const bool identity_ok = backbone_.level_channels(l) == config_.d &&
                                 spec.target_h == backbone_.level_size(l) &&
                                 spec.target_w == backbone_.level_size(l);
        reconfig_.push_back(ReconfigBlock<T>::create(gathered, backbone_.level_channels(l),
                                                     config_.d, !identity_ok, attend, rng));
      }
      break;
  }
}

template <typename T>
GatherSpec PyramidNetwork<T>::gather_spec(int level) const {
  GatherSpec spec;
  spec.target_level = config_.reference_level != 0 ? config_.reference_level : level;
  spec.target_h = spec.target_w = backbone_.level_size(spec.target_level);
  const int from =
      variant_ == PyramidVariant::kGlobalLocalDeepOnly ? level : 1;
  for (int l = from; l <= backbone_.num_levels; ++l) spec.included_levels.push_back(l);
  return spec;
}

template <typename T>
Tensor<T> PyramidNetwork<T>::lateral_level(const FeatureHierarchy<T>& hier,
                                           int level) const {
  const int last = hier.last_level();
  auto project = [&](int l) {
    auto p = proj_[static_cast<std::size_t>(l - 1)](hier.at_level(l));
    if (config_.scalar_lateral) p = ops::scalar_scale(p, alpha_[static_cast<std::size_t>(l - 1)]);
    return p;
  };
  Tensor<T> top = project(last);
  for (int l = last - 1; l >= level; --l) {
    auto up = ops::bilinear_resize(top, backbone_.level_size(l), backbone_.level_size(l));
    if (config_.scalar_lateral)
      up = ops::scalar_scale(up, beta_[static_cast<std::size_t>(l - 1)]);
    top = ops::add(project(l), up);
  }
  return top;
}

template <typename T>
Tensor<T> PyramidNetwork<T>::reconfig_level(const FeatureHierarchy<T>& hier,
                                            int level) const {
  const std::size_t i = static_cast<std::size_t>(level - 1);
  const GatherSpec spec = gather_spec(level);
  Tensor<T> gathered = gather_hierarchy(hier, spec);
  if (!attention_.empty()) gathered = attention_[i](gathered);
  Tensor<T> out = reconfig_[i].residual(gathered);
  if (variant_ != PyramidVariant::kLocalOnlyNoResidual) {
    Tensor<T> shortcut_in =
        resize_to(hier.at_level(level), spec.target_h, spec.target_w);
    out = ops::add(out, reconfig_[i].shortcut(shortcut_in));
  }
  return out;
}

template <typename T>
Tensor<T> PyramidNetwork<T>::forward_level(const FeatureHierarchy<T>& hier,
                                           int level) const {
  if (level < 1 || level > backbone_.num_levels)
    throw std::invalid_argument("PyramidNetwork: level " + std::to_string(level) +
                                " out of range");
  switch (variant_) {
    case PyramidVariant::kIdentity:
      return proj_[static_cast<std::size_t>(level - 1)](hier.at_level(level));
    case PyramidVariant::kLateral:
      return lateral_level(hier, level);
    default:
      return reconfig_level(hier, level);
  }
}

template <typename T>
std::vector<Tensor<T>> PyramidNetwork<T>::forward(const FeatureHierarchy<T>& hier) const {
  if (hier.num_levels() != backbone_.num_levels)
    throw std::invalid_argument("PyramidNetwork: hierarchy has " +
                                std::to_string(hier.num_levels()) + " levels, expected " +
                                std::to_string(backbone_.num_levels));
  std::vector<Tensor<T>> out;
  out.reserve(static_cast<std::size_t>(backbone_.num_levels));
  if (variant_ == PyramidVariant::kLateral) {
    // Top-down recursion shares the upper partial sums across levels.
    std::vector<Tensor<T>> rev;
    Tensor<T> top;
    for (int l = backbone_.num_levels; l >= 1; --l) {
      if (l == backbone_.num_levels) {
        top = lateral_level(hier, l);
      } else {
        auto up =
            ops::bilinear_resize(top, backbone_.level_size(l), backbone_.level_size(l));
        if (config_.scalar_lateral)
          up = ops::scalar_scale(up, beta_[static_cast<std::size_t>(l - 1)]);
        auto p = proj_[static_cast<std::size_t>(l - 1)](hier.at_level(l));
        if (config_.scalar_lateral)
          p = ops::scalar_scale(p, alpha_[static_cast<std::size_t>(l - 1)]);
        top = ops::add(p, up);
      }
      rev.push_back(top);
    }
    out.assign(rev.rbegin(), rev.rend());
  } else {
    for (int l = 1; l <= backbone_.num_levels; ++l)
      out.push_back(forward_level(hier, l));
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> PyramidNetwork<T>::forward_concurrent(
    const FeatureHierarchy<T>& hier) const {
  if (Tape<T>::current() != nullptr)
    throw std::logic_error("forward_concurrent: not usable under an active tape");
  if (variant_ == PyramidVariant::kLateral) return forward(hier);
  std::vector<std::future<Tensor<T>>> futures;
  for (int l = 1; l <= backbone_.num_levels; ++l)
    futures.push_back(std::async(std::launch::async,
                                 [this, &hier, l] { return forward_level(hier, l); }));
  std::vector<Tensor<T>> out;
  for (auto& f : futures) out.push_back(f.get());
  return out;
}

template <typename T>
void PyramidNetwork<T>::collect(ParamList<T>& out) const {
  for (int l = 1; l <= backbone_.num_levels; ++l) {
    const std::string prefix = "pyramid.level" + std::to_string(l);
    const std::size_t i = static_cast<std::size_t>(l - 1);
    if (!proj_.empty()) proj_[i].collect(out, prefix + ".proj");
    if (!alpha_.empty()) {
      out.push_back({prefix + ".alpha", alpha_[i]});
      if (i < beta_.size()) out.push_back({prefix + ".beta", beta_[i]});
    }
    if (!attention_.empty()) {
      attention_[i].reduce.collect(out, prefix + ".attn.reduce");
      attention_[i].expand.collect(out, prefix + ".attn.expand");
    }
    if (!reconfig_.empty()) {
      reconfig_[i].conv1.collect(out, prefix + ".reconfig.conv1");
      reconfig_[i].conv2.collect(out, prefix + ".reconfig.conv2");
      reconfig_[i].conv3.collect(out, prefix + ".reconfig.conv3");
      if (!reconfig_[i].identity_proj) reconfig_[i].proj.collect(out, prefix + ".proj");
    }
  }
}

template <typename T>
std::int64_t PyramidNetwork<T>::param_count() const {
  ParamList<T> params;
  collect(params);
  return pyrdet::param_count(params);
}

template <typename T>
std::vector<T> superposition_residual(const PyramidNetwork<T>& pyramid,
                                      const FeatureHierarchy<T>& x1,
                                      const FeatureHierarchy<T>& x2, T a, T b) {
  if (x1.num_levels() != x2.num_levels() || x1.first_level != x2.first_level)
    throw std::invalid_argument("superposition_residual: hierarchy shapes differ");
  FeatureHierarchy<T> combined;
  combined.first_level = x1.first_level;
  combined.strides = x1.strides;
  for (int i = 0; i < x1.num_levels(); ++i) {
    if (x1.maps[i].shape() != x2.maps[i].shape())
      throw std::invalid_argument("superposition_residual: level shape mismatch");
    combined.maps.push_back(
        ops::add(ops::scale(x1.maps[i], a), ops::scale(x2.maps[i], b)));
  }
  auto f_comb = pyramid.forward(combined);
  auto f1 = pyramid.forward(x1);
  auto f2 = pyramid.forward(x2);
  std::vector<T> norms;
  for (std::size_t i = 0; i < f_comb.size(); ++i) {
    auto linear = ops::add(ops::scale(f1[i], a), ops::scale(f2[i], b));
    T max_abs = T(0);
    for (std::int64_t j = 0; j < linear.size(); ++j)
      max_abs = std::max(max_abs, std::abs(f_comb[i].data()[j] - linear.data()[j]));
    norms.push_back(max_abs);
  }
  return norms;
}

#define PYRDET_INSTANTIATE_PYRAMID(T)                                                  \
  template Tensor<T> gather_hierarchy<T>(const FeatureHierarchy<T>&, const GatherSpec&); \
  template struct AttentionBlock<T>;                                                   \
  template struct ReconfigBlock<T>;                                                    \
  template class PyramidNetwork<T>;                                                    \
  template std::vector<T> superposition_residual<T>(                                   \
      const PyramidNetwork<T>&, const FeatureHierarchy<T>&, const FeatureHierarchy<T>&, \
      T, T);

PYRDET_INSTANTIATE_PYRAMID(float)
PYRDET_INSTANTIATE_PYRAMID(double)

#undef PYRDET_INSTANTIATE_PYRAMID

}  // namespace pyrdet
