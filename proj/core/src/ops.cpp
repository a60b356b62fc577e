#include "pyrdet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "blas.hpp"

namespace pyrdet::ops {

namespace {

template <typename T>
bool tape_wants(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::current() == nullptr) return false;
  for (const Tensor<T>* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T>
void finish(const char* op, std::vector<Tensor<T>> inputs, Tensor<T>& out, bool record,
            std::function<void()> backward_fn) {
  if (finite_checks_enabled()) out.check_finite(op);
  if (record) Tape<T>::current()->record(op, std::move(inputs), out, std::move(backward_fn));
}

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

template <typename T>
void require_4d(const Tensor<T>& t, const char* op, const char* what) {
  if (!t.defined() || t.ndim() != 4)
    fail(std::string(op) + ": " + what + " must be a 4-d BxCxHxW tensor, got " +
         (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
}

// Unpacks one image plane of a BxCxHxW tensor into the (C*Kh*Kw) x (Ho*Wo)
// patch matrix used by the GEMM formulation of convolution.
template <typename T>
void im2col(const T* im, int cin, int h, int w, int kh, int kw, int stride, int pad,
            int ho, int wo, T* cols) {
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* dst = cols + (static_cast<std::int64_t>((c * kh + ky) * kw + kx)) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            dst += wo;
            continue;
          }
          const T* src = im + (static_cast<std::int64_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            *dst++ = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int cin, int h, int w, int kh, int kw, int stride, int pad,
                int ho, int wo, T* im) {
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* src = cols + (static_cast<std::int64_t>((c * kh + ky) * kw + kx)) * ho * wo;
        for (int oy = 0; oy < ho; ++oy, src += wo) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = im + (static_cast<std::int64_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

struct ResampleWeight {
  int lo, hi;
  double frac;  // weight of hi; lo gets 1 - frac
};

// Align-corners-false source positions, clamped at the borders.
std::vector<ResampleWeight> bilinear_weights(int in_size, int out_size) {
  std::vector<ResampleWeight> w(static_cast<std::size_t>(out_size));
  const double scale = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src <= 0.0) {
      w[o] = {0, 0, 0.0};
    } else if (src >= in_size - 1) {
      w[o] = {in_size - 1, in_size - 1, 0.0};
    } else {
      const int lo = static_cast<int>(src);
      w[o] = {lo, lo + 1, src - lo};
    }
  }
  return w;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 int stride, int padding) {
  require_4d(input, "conv2d", "input");
  require_4d(kernel, "conv2d", "kernel");
  if (stride < 1) fail("conv2d: stride must be positive");
  if (padding < 0) fail("conv2d: padding must be non-negative");
  const int b = static_cast<int>(input.dim(0)), cin = static_cast<int>(input.dim(1));
  const int h = static_cast<int>(input.dim(2)), w = static_cast<int>(input.dim(3));
  const int cout = static_cast<int>(kernel.dim(0)), kcin = static_cast<int>(kernel.dim(1));
  const int kh = static_cast<int>(kernel.dim(2)), kw = static_cast<int>(kernel.dim(3));
  if (kcin != cin)
    fail("conv2d: kernel expects " + std::to_string(kcin) + " input channels, input has " +
         std::to_string(cin));
  if (kh > h + 2 * padding || kw > w + 2 * padding)
    fail("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
         shape_str(input.shape()) + " with padding " + std::to_string(padding));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != cout))
    fail("conv2d: bias must have shape [" + std::to_string(cout) + "], got " +
         shape_str(bias.shape()));
  const int ho = (h + 2 * padding - kh) / stride + 1;
  const int wo = (w + 2 * padding - kw) / stride + 1;
  const bool pointwise = (kh == 1 && kw == 1 && stride == 1 && padding == 0);
  const std::int64_t in_plane = static_cast<std::int64_t>(cin) * h * w;
  const std::int64_t out_plane = static_cast<std::int64_t>(cout) * ho * wo;
  const int krows = cin * kh * kw;

  Tensor<T> out = Tensor<T>::zeros({b, cout, ho, wo});
  {
    const T* in_p = input.data().data();
    const T* k_p = kernel.data().data();
    T* out_p = out.raw().data();
#pragma omp parallel for schedule(static) if (b > 1)
    for (int i = 0; i < b; ++i) {
      if (pointwise) {
        detail::gemm(false, false, cout, ho * wo, cin, T(1), k_p, cin, in_p + i * in_plane,
                     h * w, T(0), out_p + i * out_plane, ho * wo);
      } else {
        std::vector<T> cols(static_cast<std::size_t>(krows) * ho * wo);
        im2col(in_p + i * in_plane, cin, h, w, kh, kw, stride, padding, ho, wo, cols.data());
        detail::gemm(false, false, cout, ho * wo, krows, T(1), k_p, krows, cols.data(),
                     ho * wo, T(0), out_p + i * out_plane, ho * wo);
      }
      if (bias.defined()) {
        const T* b_p = bias.data().data();
        T* dst = out_p + i * out_plane;
        for (int c = 0; c < cout; ++c) {
          const T bv = b_p[c];
          for (int s = 0; s < ho * wo; ++s) dst[s] += bv;
          dst += ho * wo;
        }
      }
    }
  }

  const bool record = tape_wants<T>({&input, &kernel, &bias});
  auto bwd = [input = input, kernel = kernel, bias = bias, out, stride, padding, b, cin, h,
              w, cout, kh, kw, ho, wo, pointwise, in_plane, out_plane, krows]() mutable {
    const T* dy = out.grad().data();
    if (input.requires_grad()) {
      T* dx = input.grad_buffer().data();
#pragma omp parallel for schedule(static) if (b > 1)
      for (int i = 0; i < b; ++i) {
        if (pointwise) {
          detail::gemm(true, false, cin, ho * wo, cout, T(1), kernel.data().data(), cin,
                       dy + i * out_plane, ho * wo, T(1), dx + i * in_plane, h * w);
        } else {
          std::vector<T> dcols(static_cast<std::size_t>(krows) * ho * wo);
          detail::gemm(true, false, krows, ho * wo, cout, T(1), kernel.data().data(), krows,
                       dy + i * out_plane, ho * wo, T(0), dcols.data(), ho * wo);
          col2im_add(dcols.data(), cin, h, w, kh, kw, stride, padding, ho, wo,
                     dx + i * in_plane);
        }
      }
    }
    if (kernel.requires_grad()) {
      T* dk = kernel.grad_buffer().data();
      std::vector<T> cols;
      for (int i = 0; i < b; ++i) {  // sequential batch order keeps sums reproducible
        if (pointwise) {
          detail::gemm(false, true, cout, cin, ho * wo, T(1), dy + i * out_plane, ho * wo,
                       input.data().data() + i * in_plane, h * w, T(1), dk, cin);
        } else {
          cols.assign(static_cast<std::size_t>(krows) * ho * wo, T(0));
          im2col(input.data().data() + i * in_plane, cin, h, w, kh, kw, stride, padding, ho,
                 wo, cols.data());
          detail::gemm(false, true, cout, krows, ho * wo, T(1), dy + i * out_plane, ho * wo,
                       cols.data(), ho * wo, T(1), dk, krows);
        }
      }
    }
    if (bias.defined() && bias.requires_grad()) {
      T* db = bias.grad_buffer().data();
      for (int i = 0; i < b; ++i) {
        const T* g = dy + i * out_plane;
        for (int c = 0; c < cout; ++c) {
          T acc = T(0);
          for (int s = 0; s < ho * wo; ++s) acc += g[s];
          db[c] += acc;
          g += ho * wo;
        }
      }
    }
  };
  std::vector<Tensor<T>> ins{input, kernel};
  if (bias.defined()) ins.push_back(bias);
  finish("conv2d", std::move(ins), out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* x = input.data().data();
  T* y = out.raw().data();
  const std::int64_t n = input.size();
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);

  const bool record = tape_wants<T>({&input});
  auto bwd = [input = input, out, n]() mutable {
    const T* dy = out.grad().data();
    const T* x = input.data().data();
    T* dx = input.grad_buffer().data();
    for (std::int64_t i = 0; i < n; ++i)
      if (x[i] > T(0)) dx[i] += dy[i];  // subgradient at 0 is 0
  };
  finish("relu", {input}, out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* x = input.data().data();
  T* y = out.raw().data();
  const std::int64_t n = input.size();
  // Clamp to the open interval so gates never saturate to exactly 0 or 1.
  const T lo = std::numeric_limits<T>::min();
  const T hi = T(1) - std::numeric_limits<T>::epsilon();
  for (std::int64_t i = 0; i < n; ++i) {
    T v;
    if (x[i] >= T(0)) {
      v = T(1) / (T(1) + std::exp(-x[i]));
    } else {
      const T e = std::exp(x[i]);
      v = e / (T(1) + e);
    }
    y[i] = std::clamp(v, lo, hi);
  }

  const bool record = tape_wants<T>({&input});
  auto bwd = [input = input, out, n]() mutable {
    const T* dy = out.grad().data();
    const T* y = out.data().data();
    T* dx = input.grad_buffer().data();
    for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i] * y[i] * (T(1) - y[i]);
  };
  finish("sigmoid", {input}, out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> fully_connected(const Tensor<T>& input, const Tensor<T>& weight,
                          const Tensor<T>& bias) {
  if (!input.defined() || input.ndim() != 2)
    fail("fully_connected: input must be BxC, got " +
         (input.defined() ? shape_str(input.shape()) : std::string("undefined")));
  if (!weight.defined() || weight.ndim() != 2)
    fail("fully_connected: weight must be DxC");
  const int b = static_cast<int>(input.dim(0)), c = static_cast<int>(input.dim(1));
  const int d = static_cast<int>(weight.dim(0));
  if (weight.dim(1) != c)
    fail("fully_connected: weight expects " + std::to_string(weight.dim(1)) +
         " inputs, got " + std::to_string(c));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != d))
    fail("fully_connected: bias must have shape [" + std::to_string(d) + "]");

  Tensor<T> out = Tensor<T>::zeros({b, d});
  detail::gemm(false, true, b, d, c, T(1), input.data().data(), c, weight.data().data(), c,
               T(0), out.raw().data(), d);
  if (bias.defined()) {
    T* y = out.raw().data();
    const T* bp = bias.data().data();
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < d; ++j) y[i * d + j] += bp[j];
  }

  const bool record = tape_wants<T>({&input, &weight, &bias});
  auto bwd = [input = input, weight = weight, bias = bias, out, b, c, d]() mutable {
    const T* dy = out.grad().data();
    if (input.requires_grad())
      detail::gemm(false, false, b, c, d, T(1), dy, d, weight.data().data(), c, T(1),
                   input.grad_buffer().data(), c);
    if (weight.requires_grad())
      detail::gemm(true, false, d, c, b, T(1), dy, d, input.data().data(), c, T(1),
                   weight.grad_buffer().data(), c);
    if (bias.defined() && bias.requires_grad()) {
      T* db = bias.grad_buffer().data();
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < d; ++j) db[j] += dy[i * d + j];
    }
  };
  std::vector<Tensor<T>> ins{input, weight};
  if (bias.defined()) ins.push_back(bias);
  finish("fully_connected", std::move(ins), out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  require_4d(input, "global_avg_pool", "input");
  const int b = static_cast<int>(input.dim(0)), c = static_cast<int>(input.dim(1));
  const std::int64_t hw = input.dim(2) * input.dim(3);
  Tensor<T> out = Tensor<T>::zeros({b, c});
  const T* x = input.data().data();
  T* y = out.raw().data();
  for (int i = 0; i < b * c; ++i) {
    T acc = T(0);
    for (std::int64_t s = 0; s < hw; ++s) acc += x[i * hw + s];
    y[i] = acc / static_cast<T>(hw);
  }

  const bool record = tape_wants<T>({&input});
  auto bwd = [input = input, out, b, c, hw]() mutable {
    const T* dy = out.grad().data();
    T* dx = input.grad_buffer().data();
    for (int i = 0; i < b * c; ++i) {
      const T g = dy[i] / static_cast<T>(hw);
      for (std::int64_t s = 0; s < hw; ++s) dx[i * hw + s] += g;
    }
  };
  finish("global_avg_pool", {input}, out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& input, int out_h, int out_w) {
  require_4d(input, "bilinear_resize", "input");
  if (out_h < 1 || out_w < 1) fail("bilinear_resize: output size must be positive");
  const int b = static_cast<int>(input.dim(0)), c = static_cast<int>(input.dim(1));
  const int h = static_cast<int>(input.dim(2)), w = static_cast<int>(input.dim(3));

  if (out_h == h && out_w == w) {
    // Exact identity, including bitwise equality.
    Tensor<T> out = Tensor<T>::from_data(input.shape(),
                                         {input.data().begin(), input.data().end()});
    const bool record = tape_wants<T>({&input});
    auto bwd = [input = input, out]() mutable {
      const T* dy = out.grad().data();
      T* dx = input.grad_buffer().data();
      for (std::int64_t i = 0; i < out.size(); ++i) dx[i] += dy[i];
    };
    finish("bilinear_resize", {input}, out, record, std::move(bwd));
    return out;
  }

  const auto wy = bilinear_weights(h, out_h);
  const auto wx = bilinear_weights(w, out_w);
  Tensor<T> out = Tensor<T>::zeros({b, c, out_h, out_w});
  const T* x = input.data().data();
  T* y = out.raw().data();
  const std::int64_t planes = static_cast<std::int64_t>(b) * c;
#pragma omp parallel for schedule(static) if (planes > 4)
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = x + p * h * w;
    T* dst = y + p * static_cast<std::int64_t>(out_h) * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const auto& ry = wy[oy];
      const T fy = static_cast<T>(ry.frac);
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& rx = wx[ox];
        const T fx = static_cast<T>(rx.frac);
        const T top = src[ry.lo * w + rx.lo] * (T(1) - fx) + src[ry.lo * w + rx.hi] * fx;
        const T bot = src[ry.hi * w + rx.lo] * (T(1) - fx) + src[ry.hi * w + rx.hi] * fx;
        dst[oy * out_w + ox] = top * (T(1) - fy) + bot * fy;
      }
    }
  }

  const bool record = tape_wants<T>({&input});
  auto bwd = [input = input, out, wy, wx, h, w, out_h, out_w, planes]() mutable {
    const T* dy = out.grad().data();
    T* dx = input.grad_buffer().data();
#pragma omp parallel for schedule(static) if (planes > 4)
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* g = dy + p * static_cast<std::int64_t>(out_h) * out_w;
      T* dst = dx + p * h * w;
      for (int oy = 0; oy < out_h; ++oy) {
        const auto& ry = wy[oy];
        const T fy = static_cast<T>(ry.frac);
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& rx = wx[ox];
          const T fx = static_cast<T>(rx.frac);
          const T gv = g[oy * out_w + ox];
          dst[ry.lo * w + rx.lo] += gv * (T(1) - fy) * (T(1) - fx);
          dst[ry.lo * w + rx.hi] += gv * (T(1) - fy) * fx;
          dst[ry.hi * w + rx.lo] += gv * fy * (T(1) - fx);
          dst[ry.hi * w + rx.hi] += gv * fy * fx;
        }
      }
    }
  };
  finish("bilinear_resize", {input}, out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& input, int out_h, int out_w) {
  require_4d(input, "adaptive_avg_pool", "input");
  const int b = static_cast<int>(input.dim(0)), c = static_cast<int>(input.dim(1));
  const int h = static_cast<int>(input.dim(2)), w = static_cast<int>(input.dim(3));
  if (out_h < 1 || out_w < 1) fail("adaptive_avg_pool: output size must be positive");
  if (out_h > h || out_w > w)
    fail("adaptive_avg_pool: upsampling " + shape_str(input.shape()) + " to " +
         std::to_string(out_h) + "x" + std::to_string(out_w) +
         " is not supported; use bilinear_resize");

  auto bin_lo = [](int o, int in, int out) { return (o * in) / out; };
  auto bin_hi = [](int o, int in, int out) { return ((o + 1) * in + out - 1) / out; };

  Tensor<T> out = Tensor<T>::zeros({b, c, out_h, out_w});
  const T* x = input.data().data();
  T* y = out.raw().data();
  const std::int64_t planes = static_cast<std::int64_t>(b) * c;
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* src = x + p * h * w;
    T* dst = y + p * static_cast<std::int64_t>(out_h) * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const int y0 = bin_lo(oy, h, out_h), y1 = bin_hi(oy, h, out_h);
      for (int ox = 0; ox < out_w; ++ox) {
        const int x0 = bin_lo(ox, w, out_w), x1 = bin_hi(ox, w, out_w);
        T acc = T(0);
        for (int iy = y0; iy < y1; ++iy)
          for (int ix = x0; ix < x1; ++ix) acc += src[iy * w + ix];
        dst[oy * out_w + ox] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
    }
  }

  const bool record = tape_wants<T>({&input});
  auto bwd = [input = input, out, h, w, out_h, out_w, planes, bin_lo, bin_hi]() mutable {
    const T* dy = out.grad().data();
    T* dx = input.grad_buffer().data();
    for (std::int64_t p = 0; p < planes; ++p) {
      const T* g = dy + p * static_cast<std::int64_t>(out_h) * out_w;
      T* dst = dx + p * h * w;
      for (int oy = 0; oy < out_h; ++oy) {
        const int y0 = bin_lo(oy, h, out_h), y1 = bin_hi(oy, h, out_h);
        for (int ox = 0; ox < out_w; ++ox) {
          const int x0 = bin_lo(ox, w, out_w), x1 = bin_hi(ox, w, out_w);
          const T gv = g[oy * out_w + ox] / static_cast<T>((y1 - y0) * (x1 - x0));
          for (int iy = y0; iy < y1; ++iy)
            for (int ix = x0; ix < x1; ++ix) dst[iy * w + ix] += gv;
        }
      }
    }
  };
  finish("adaptive_avg_pool", {input}, out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> inputs) {
  if (inputs.empty()) fail("concat_channels: empty input list");
  for (const auto& t : inputs) require_4d(t, "concat_channels", "input");
  const auto& first = inputs.front();
  const int b = static_cast<int>(first.dim(0));
  const int h = static_cast<int>(first.dim(2)), w = static_cast<int>(first.dim(3));
  std::int64_t ctot = 0;
  for (const auto& t : inputs) {
    if (t.dim(0) != b || t.dim(2) != h || t.dim(3) != w)
      fail("concat_channels: spatial/batch mismatch between " + shape_str(first.shape()) +
           " and " + shape_str(t.shape()));
    ctot += t.dim(1);
  }

  Tensor<T> out = Tensor<T>::zeros({b, ctot, h, w});
  const std::int64_t hw = static_cast<std::int64_t>(h) * w;
  T* y = out.raw().data();
  std::int64_t coff = 0;
  for (const auto& t : inputs) {
    const std::int64_t ci = t.dim(1);
    const T* x = t.data().data();
    for (int i = 0; i < b; ++i)
      std::copy(x + i * ci * hw, x + (i + 1) * ci * hw, y + (i * ctot + coff) * hw);
    coff += ci;
  }

  std::vector<Tensor<T>> hold(inputs.begin(), inputs.end());
  bool record = false;
  if (Tape<T>::current() != nullptr)
    for (const auto& t : hold)
      if (t.requires_grad()) record = true;
  auto bwd = [hold, out, b, ctot, hw]() mutable {
    const T* dy = out.grad().data();
    std::int64_t coff = 0;
    for (auto& t : hold) {
      const std::int64_t ci = t.dim(1);
      if (t.requires_grad()) {
        T* dx = t.grad_buffer().data();
        for (int i = 0; i < b; ++i) {
          const T* src = dy + (i * ctot + coff) * hw;
          T* dst = dx + i * ci * hw;
          for (std::int64_t s = 0; s < ci * hw; ++s) dst[s] += src[s];
        }
      }
      coff += ci;
    }
  };
  finish("concat_channels", std::move(hold), out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& input, std::int64_t c_begin, std::int64_t c_end) {
  require_4d(input, "slice_channels", "input");
  const std::int64_t c = input.dim(1);
  if (c_begin < 0 || c_end > c || c_begin >= c_end)
    fail("slice_channels: invalid range [" + std::to_string(c_begin) + "," +
         std::to_string(c_end) + ") for " + std::to_string(c) + " channels");
  const int b = static_cast<int>(input.dim(0));
  const std::int64_t hw = input.dim(2) * input.dim(3);
  const std::int64_t cs = c_end - c_begin;
  Tensor<T> out = Tensor<T>::zeros({b, cs, input.dim(2), input.dim(3)});
  const T* x = input.data().data();
  T* y = out.raw().data();
  for (int i = 0; i < b; ++i)
    std::copy(x + (i * c + c_begin) * hw, x + (i * c + c_end) * hw, y + i * cs * hw);

  const bool record = tape_wants<T>({&input});
  auto bwd = [input = input, out, b, c, c_begin, cs, hw]() mutable {
    const T* dy = out.grad().data();
    T* dx = input.grad_buffer().data();
    for (int i = 0; i < b; ++i) {
      T* dst = dx + (i * c + c_begin) * hw;
      const T* src = dy + i * cs * hw;
      for (std::int64_t s = 0; s < cs * hw; ++s) dst[s] += src[s];
    }
  };
  finish("slice_channels", {input}, out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> channelwise_scale(const Tensor<T>& input, const Tensor<T>& gates) {
  require_4d(input, "channelwise_scale", "input");
  if (!gates.defined() || gates.ndim() != 2 || gates.dim(0) != input.dim(0) ||
      gates.dim(1) != input.dim(1))
    fail("channelwise_scale: gates must be BxC matching input " + shape_str(input.shape()) +
         ", got " + (gates.defined() ? shape_str(gates.shape()) : std::string("undefined")));
  const int bc = static_cast<int>(input.dim(0) * input.dim(1));
  const std::int64_t hw = input.dim(2) * input.dim(3);
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* x = input.data().data();
  const T* g = gates.data().data();
  T* y = out.raw().data();
  for (int i = 0; i < bc; ++i)
    for (std::int64_t s = 0; s < hw; ++s) y[i * hw + s] = x[i * hw + s] * g[i];

  const bool record = tape_wants<T>({&input, &gates});
  auto bwd = [input = input, gates = gates, out, bc, hw]() mutable {
    const T* dy = out.grad().data();
    const T* x = input.data().data();
    const T* g = gates.data().data();
    if (input.requires_grad()) {
      T* dx = input.grad_buffer().data();
      for (int i = 0; i < bc; ++i)
        for (std::int64_t s = 0; s < hw; ++s) dx[i * hw + s] += dy[i * hw + s] * g[i];
    }
    if (gates.requires_grad()) {
      T* dg = gates.grad_buffer().data();
      for (int i = 0; i < bc; ++i) {
        T acc = T(0);
        for (std::int64_t s = 0; s < hw; ++s) acc += dy[i * hw + s] * x[i * hw + s];
        dg[i] += acc;
      }
    }
  };
  finish("channelwise_scale", {input, gates}, out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> scalar_scale(const Tensor<T>& input, const Tensor<T>& factor) {
  if (!factor.defined() || factor.size() != 1)
    fail("scalar_scale: factor must be a single-element tensor");
  const T f = factor.data()[0];
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* x = input.data().data();
  T* y = out.raw().data();
  const std::int64_t n = input.size();
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] * f;

  const bool record = tape_wants<T>({&input, &factor});
  auto bwd = [input = input, factor = factor, out, n]() mutable {
    const T* dy = out.grad().data();
    if (input.requires_grad()) {
      const T f = factor.data()[0];
      T* dx = input.grad_buffer().data();
      for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i] * f;
    }
    if (factor.requires_grad()) {
      const T* x = input.data().data();
      T acc = T(0);
      for (std::int64_t i = 0; i < n; ++i) acc += dy[i] * x[i];
      factor.grad_buffer()[0] += acc;
    }
  };
  finish("scalar_scale", {input, factor}, out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    fail("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* y = out.raw().data();
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) y[i] = pa[i] + pb[i];

  const bool record = tape_wants<T>({&a, &b});
  auto bwd = [a = a, b = b, out, n]() mutable {
    const T* dy = out.grad().data();
    if (a.requires_grad()) {
      T* da = a.grad_buffer().data();
      for (std::int64_t i = 0; i < n; ++i) da[i] += dy[i];
    }
    if (b.requires_grad()) {
      T* db = b.grad_buffer().data();
      for (std::int64_t i = 0; i < n; ++i) db[i] += dy[i];
    }
  };
  finish("add", {a, b}, out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    fail("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* y = out.raw().data();
  const std::int64_t n = a.size();
  for (std::int64_t i = 0; i < n; ++i) y[i] = pa[i] * pb[i];

  const bool record = tape_wants<T>({&a, &b});
  auto bwd = [a = a, b = b, out, n]() mutable {
    const T* dy = out.grad().data();
    if (a.requires_grad()) {
      T* da = a.grad_buffer().data();
      const T* pb = b.data().data();
      for (std::int64_t i = 0; i < n; ++i) da[i] += dy[i] * pb[i];
    }
    if (b.requires_grad()) {
      T* db = b.grad_buffer().data();
      const T* pa = a.data().data();
      for (std::int64_t i = 0; i < n; ++i) db[i] += dy[i] * pa[i];
    }
  };
  finish("mul", {a, b}, out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T c) {
  Tensor<T> out = Tensor<T>::zeros(input.shape());
  const T* x = input.data().data();
  T* y = out.raw().data();
  const std::int64_t n = input.size();
  for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] * c;

  const bool record = tape_wants<T>({&input});
  auto bwd = [input = input, out, c, n]() mutable {
    const T* dy = out.grad().data();
    T* dx = input.grad_buffer().data();
    for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i] * c;
  };
  finish("scale", {input}, out, record, std::move(bwd));
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  T acc = T(0);
  for (const T v : input.data()) acc += v;
  Tensor<T> out = Tensor<T>::from_data({1}, {acc});

  const bool record = tape_wants<T>({&input});
  auto bwd = [input = input, out]() mutable {
    const T g = out.grad()[0];
    T* dx = input.grad_buffer().data();
    for (std::int64_t i = 0; i < input.size(); ++i) dx[i] += g;
  };
  finish("sum", {input}, out, record, std::move(bwd));
  return out;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::current();
  if (tape == nullptr)
    throw std::logic_error("ops::backward: no active tape on this thread");
  tape->backward(loss);
}

#define PYRDET_INSTANTIATE_OPS(T)                                                          \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,  \
                               int);                                                       \
  template Tensor<T> relu<T>(const Tensor<T>&);                                            \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                         \
  template Tensor<T> fully_connected<T>(const Tensor<T>&, const Tensor<T>&,                \
                                        const Tensor<T>&);                                 \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                 \
  template Tensor<T> bilinear_resize<T>(const Tensor<T>&, int, int);                       \
  template Tensor<T> adaptive_avg_pool<T>(const Tensor<T>&, int, int);                     \
  template Tensor<T> concat_channels<T>(std::span<const Tensor<T>>);                       \
  template Tensor<T> slice_channels<T>(const Tensor<T>&, std::int64_t, std::int64_t);      \
  template Tensor<T> channelwise_scale<T>(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> scalar_scale<T>(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> sum<T>(const Tensor<T>&);                                             \
  template void backward<T>(const Tensor<T>&);

PYRDET_INSTANTIATE_OPS(float)
PYRDET_INSTANTIATE_OPS(double)

#undef PYRDET_INSTANTIATE_OPS

}  // namespace pyrdet::ops
