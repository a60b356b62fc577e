#pragma once

#include <span>
#include <vector>

#include "pyrdet/tensor.hpp"

// Forward operators over BxCxHxW maps with reverse-mode gradient rules.
// Every operator is a pure function of its inputs; when a Tape<T> is active
// and an input requires a gradient, the matching backward rule is recorded.
namespace pyrdet::ops {

// Cross-correlation. input BxCinxHxW, kernel CoutxCinxKhxKw, bias Cout or
// undefined. H' = (H + 2*padding - Kh)/stride + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 int stride, int padding);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);

// input BxC, weight DxC, bias D or undefined -> BxD.
template <typename T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weight,
                          const Tensor<T>& bias);

// BxCxHxW -> BxC, exact per-channel mean over all spatial positions.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

// Bilinear interpolation, align-corners false. Identity (bitwise) when the
// output size equals the input size.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, int out_h, int out_w);

// Mean over contiguous bins; requires out_h <= H and out_w <= W.
template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& input, int out_h, int out_w);

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs);

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::int64_t c_begin, std::int64_t c_end);

// input BxCxHxW scaled per channel by gates BxC.
template <typename T>
Tensor<T> channelwise_scale(const Tensor<T>& input, const Tensor<T>& gates);

// Whole-tensor scale by a learnable single-element tensor.
template <typename T>
Tensor<T> scalar_scale(const Tensor<T>& input, const Tensor<T>& factor);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

// Scale by a compile-time constant (not differentiable through c).
template <typename T>
Tensor<T> scale(const Tensor<T>& input, T c);

template <typename T>
Tensor<T> sum(const Tensor<T>& input);

// Propagates gradients from a scalar loss through the thread's active tape.
template <typename T>
void backward(const Tensor<T>& loss);

}  // namespace pyrdet::ops
