#pragma once

#include <string>
#include <vector>

#include "pyrdet/ops.hpp"
#include "pyrdet/rng.hpp"
#include "pyrdet/tensor.hpp"

namespace pyrdet {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;  // shared handle: optimizer writes go through raw()
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
std::int64_t param_count(const ParamList<T>& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

// Fan-in-scaled uniform init: U(-b, b) with b = sqrt(6 / fan_in).
template <typename T>
void fan_in_uniform_fill(Tensor<T>& t, std::int64_t fan_in, CounterRng& rng);

template <typename T>
struct Conv2dLayer {
  Tensor<T> kernel;  // CoutxCinxKhxKw
  Tensor<T> bias;    // undefined for bias-free layers
  int stride = 1;
  int padding = 0;

  // Kernel from fan-in uniform (fan_in = Cin*Kh*Kw), bias zero.
  static Conv2dLayer create(int cout, int cin, int ksize, int stride, int padding,
                            bool with_bias, CounterRng& rng);

  Tensor<T> operator()(const Tensor<T>& x) const {
    return ops::conv2d(x, kernel, bias, stride, padding);
  }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // DxC
  Tensor<T> bias;

  static LinearLayer create(int d, int c, bool with_bias, CounterRng& rng);

  Tensor<T> operator()(const Tensor<T>& x) const {
    return ops::fully_connected(x, weight, bias);
  }
  void collect(ParamList<T>& out, const std::string& prefix) const;
};

}  // namespace pyrdet
