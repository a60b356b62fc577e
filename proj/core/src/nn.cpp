#include "pyrdet/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace pyrdet {

template <typename T>
void fan_in_uniform_fill(Tensor<T>& t, std::int64_t fan_in, CounterRng& rng) {
  if (fan_in <= 0) throw std::invalid_argument("fan_in_uniform_fill: fan_in must be > 0");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t.raw()) v = static_cast<T>(rng.uniform(-bound, bound));
}

template <typename T>
Conv2dLayer<T> Conv2dLayer<T>::create(int cout, int cin, int ksize, int stride, int padding,
                                      bool with_bias, CounterRng& rng) {
  Conv2dLayer layer;
  layer.kernel = Tensor<T>::zeros({cout, cin, ksize, ksize}, /*requires_grad=*/true);
  fan_in_uniform_fill(layer.kernel, static_cast<std::int64_t>(cin) * ksize * ksize, rng);
  if (with_bias) layer.bias = Tensor<T>::zeros({cout}, /*requires_grad=*/true);
  layer.stride = stride;
  layer.padding = padding;
  return layer;
}

template <typename T>
void Conv2dLayer<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".kernel", kernel});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

template <typename T>
LinearLayer<T> LinearLayer<T>::create(int d, int c, bool with_bias, CounterRng& rng) {
  LinearLayer layer;
  layer.weight = Tensor<T>::zeros({d, c}, /*requires_grad=*/true);
  fan_in_uniform_fill(layer.weight, c, rng);
  if (with_bias) layer.bias = Tensor<T>::zeros({d}, /*requires_grad=*/true);
  return layer;
}

template <typename T>
void LinearLayer<T>::collect(ParamList<T>& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

#define PYRDET_INSTANTIATE_NN(T)                                               \
  template void fan_in_uniform_fill<T>(Tensor<T>&, std::int64_t, CounterRng&); \
  template struct Conv2dLayer<T>;                                              \
  template struct LinearLayer<T>;

PYRDET_INSTANTIATE_NN(float)
PYRDET_INSTANTIATE_NN(double)

#undef PYRDET_INSTANTIATE_NN

}  // namespace pyrdet
