#include <doctest.h>

#include <array>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "pyrdet/ops.hpp"
#include "pyrdet/rng.hpp"
#include "pyrdet/tensor.hpp"

using namespace pyrdet;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, std::uint64_t stream) {
  CounterRng rng(seed, stream);
  auto t = Tensor<T>::zeros(shape);
  for (auto& v : t.raw()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
  return t;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), sizeof(T) * a.size()) == 0;
}

}  // namespace

TEST_SUITE_BEGIN("ops");

TEST_CASE("conv2d: all-ones 3x3 against all-ones kernel gives 9") {
  auto x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto k = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y = ops::conv2d(x, k, {}, 1, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 9.0);
}

TEST_CASE("conv2d: centered delta kernel is the identity") {
  auto x = random_tensor<double>({2, 3, 5, 5}, 11, 0);
  auto k = Tensor<double>::zeros({3, 3, 3, 3});
  for (int c = 0; c < 3; ++c) k.raw()[(c * 3 + c) * 9 + 4] = 1.0;  // center of channel c
  auto y = ops::conv2d(x, k, {}, 1, 1);
  CHECK(bitwise_equal(x, y));
}

TEST_CASE("conv2d: zero kernel and bias annihilate") {
  auto x = random_tensor<double>({1, 2, 4, 4}, 3, 0);
  auto y = ops::conv2d(x, Tensor<double>::zeros({2, 2, 3, 3}), Tensor<double>::zeros({2}),
                       1, 1);
  for (double v : y.data()) CHECK(v == 0.0);
}

TEST_CASE("conv2d: stride and padding shape arithmetic") {
  auto x = Tensor<float>::zeros({1, 1, 64, 64});
  auto k = Tensor<float>::zeros({8, 1, 3, 3});
  CHECK(ops::conv2d(x, k, {}, 2, 1).shape() == Shape{1, 8, 32, 32});
  CHECK(ops::conv2d(x, k, {}, 1, 1).shape() == Shape{1, 8, 64, 64});
}

TEST_CASE("conv2d: linearity in the input") {
  auto x = random_tensor<double>({1, 2, 6, 6}, 5, 0);
  auto y = random_tensor<double>({1, 2, 6, 6}, 5, 1);
  auto k = random_tensor<double>({3, 2, 3, 3}, 5, 2);
  const double a = 1.7, b = -0.6;
  auto lhs = ops::conv2d(ops::add(ops::scale(x, a), ops::scale(y, b)), k, {}, 1, 1);
  auto rhs = ops::add(ops::scale(ops::conv2d(x, k, {}, 1, 1), a),
                      ops::scale(ops::conv2d(y, k, {}, 1, 1), b));
  for (std::int64_t i = 0; i < lhs.size(); ++i)
    CHECK(lhs.data()[i] == doctest::Approx(rhs.data()[i]).epsilon(1e-6));
}

TEST_CASE("conv2d: rejects mismatched shapes") {
  auto x = Tensor<float>::zeros({1, 3, 8, 8});
  CHECK_THROWS_AS(ops::conv2d(x, Tensor<float>::zeros({4, 2, 3, 3}), {}, 1, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(ops::conv2d(x, Tensor<float>::zeros({4, 3, 9, 9}), {}, 1, 0),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      ops::conv2d(x, Tensor<float>::zeros({4, 3, 3, 3}), Tensor<float>::zeros({5}), 1, 1),
      std::invalid_argument);
}

TEST_CASE("conv2d: backward matches hand derivative for a 1x1 case") {
  // y = k*x summed: dL/dx = k, dL/dk = x, dL/db = 1.
  auto x = Tensor<double>::from_data({1, 1, 1, 1}, {3.0});
  auto k = Tensor<double>::from_data({1, 1, 1, 1}, {2.0});
  auto b = Tensor<double>::from_data({1}, {0.5});
  x.set_requires_grad(true);
  k.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape<double> tape;
  auto loss = ops::sum(ops::conv2d(x, k, b, 1, 0));
  tape.backward(loss);
  CHECK(x.grad()[0] == 2.0);
  CHECK(k.grad()[0] == 3.0);
  CHECK(b.grad()[0] == 1.0);
}

TEST_CASE("relu: definition and subgradient") {
  auto x = Tensor<double>::from_data({3}, {-1.0, 0.0, 2.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  auto y = ops::relu(x);
  CHECK(y.data()[0] == 0.0);
  CHECK(y.data()[1] == 0.0);
  CHECK(y.data()[2] == 2.0);
  tape.backward(ops::sum(y));
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 0.0);  // subgradient at 0 is 0
  CHECK(x.grad()[2] == 1.0);
}

TEST_CASE("sigmoid: fixed points and antisymmetry") {
  auto z = ops::sigmoid(Tensor<double>::scalar(0.0));
  CHECK(z.item() == 0.5);
  CHECK(ops::sigmoid(Tensor<double>::scalar(4.0)).item() ==
        doctest::Approx(0.9820137900379085).epsilon(1e-12));
  for (double v : {-3.0, -0.7, 0.2, 1.9, 8.0}) {
    const double p = ops::sigmoid(Tensor<double>::scalar(v)).item();
    const double q = ops::sigmoid(Tensor<double>::scalar(-v)).item();
    CHECK(p == doctest::Approx(1.0 - q).epsilon(1e-12));
  }
}

TEST_CASE("sigmoid: open-interval range even for extreme inputs") {
  auto y = ops::sigmoid(Tensor<double>::from_data({4}, {-1e6, -40.0, 40.0, 1e6}));
  for (double v : y.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("fully_connected: hand product [1,2] -> [3,2]") {
  auto x = Tensor<double>::from_data({1, 2}, {1.0, 2.0});
  auto w = Tensor<double>::from_data({2, 2}, {1.0, 1.0, 0.0, 1.0});
  auto y = ops::fully_connected(x, w, {});
  CHECK(y.data()[0] == 3.0);
  CHECK(y.data()[1] == 2.0);
}

TEST_CASE("fully_connected: identity weight and bias broadcast") {
  auto x = random_tensor<double>({3, 4}, 17, 0);
  auto eye = Tensor<double>::zeros({4, 4});
  for (int i = 0; i < 4; ++i) eye.raw()[i * 4 + i] = 1.0;
  CHECK(bitwise_equal(ops::fully_connected(x, eye, {}), x));

  auto b = Tensor<double>::from_data({2}, {5.0, -1.0});
  auto y = ops::fully_connected(x, Tensor<double>::zeros({2, 4}), b);
  for (int i = 0; i < 3; ++i) {
    CHECK(y.data()[i * 2 + 0] == 5.0);
    CHECK(y.data()[i * 2 + 1] == -1.0);
  }
  CHECK_THROWS_AS(ops::fully_connected(x, Tensor<double>::zeros({2, 5}), {}),
                  std::invalid_argument);
}

TEST_CASE("global_avg_pool: exact means") {
  CHECK(ops::global_avg_pool(Tensor<double>::full({2, 3, 4, 4}, 0.25)).data()[0] == 0.25);
  auto x = Tensor<double>::from_data({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  CHECK(ops::global_avg_pool(x).data()[0] == 2.5);
  auto xt = Tensor<double>::from_data({1, 1, 2, 2}, {1.0, 3.0, 2.0, 4.0});
  CHECK(ops::global_avg_pool(xt).data()[0] == 2.5);
}

TEST_CASE("bilinear_resize: identity at equal size is bitwise") {
  auto x = random_tensor<float>({2, 3, 8, 8}, 23, 0);
  CHECK(bitwise_equal(ops::bilinear_resize(x, 8, 8), x));
}

TEST_CASE("bilinear_resize: 1x1 source broadcasts its value") {
  auto y = ops::bilinear_resize(Tensor<double>::full({1, 2, 1, 1}, 7.0), 4, 4);
  for (double v : y.data()) CHECK(v == 7.0);
}

TEST_CASE("bilinear_resize: 2x2 to 4x4 align-corners-false positions") {
  auto x = Tensor<double>::from_data({1, 1, 2, 2}, {0.0, 2.0, 0.0, 2.0});
  auto y = ops::bilinear_resize(x, 4, 4);
  const std::array<double, 4> cols{0.0, 0.5, 1.5, 2.0};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) CHECK(y.data()[r * 4 + c] == doctest::Approx(cols[c]));
}

TEST_CASE("bilinear_resize: preserves constants") {
  auto y = ops::bilinear_resize(Tensor<double>::full({1, 1, 3, 5}, -2.5), 7, 2);
  for (double v : y.data()) CHECK(v == -2.5);
}

TEST_CASE("adaptive_avg_pool: identity, constants, quadrants") {
  auto x = random_tensor<float>({1, 2, 4, 4}, 31, 0);
  CHECK(bitwise_equal(ops::adaptive_avg_pool(x, 4, 4), x));

  auto ones = ops::adaptive_avg_pool(Tensor<double>::full({1, 1, 4, 4}, 1.0), 2, 2);
  for (double v : ones.data()) CHECK(v == 1.0);

  auto q = Tensor<double>::zeros({1, 1, 4, 4});
  const double a = 1, b = 2, c = 3, d = 4;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      q.raw()[i * 4 + j] = (i < 2 ? (j < 2 ? a : b) : (j < 2 ? c : d));
  auto y = ops::adaptive_avg_pool(q, 2, 2);
  CHECK(y.data()[0] == a);
  CHECK(y.data()[1] == b);
  CHECK(y.data()[2] == c);
  CHECK(y.data()[3] == d);

  CHECK_THROWS_AS(ops::adaptive_avg_pool(q, 8, 8), std::invalid_argument);
}

TEST_CASE("concat_channels and slice_channels round trip bitwise") {
  auto a = random_tensor<float>({2, 3, 4, 4}, 41, 0);
  auto b = random_tensor<float>({2, 1, 4, 4}, 41, 1);
  auto c = random_tensor<float>({2, 2, 4, 4}, 41, 2);
  std::vector<Tensor<float>> parts{a, b, c};
  auto cat = ops::concat_channels<float>(parts);
  CHECK(cat.shape() == Shape{2, 6, 4, 4});
  CHECK(bitwise_equal(ops::slice_channels(cat, 0, 3), a));
  CHECK(bitwise_equal(ops::slice_channels(cat, 3, 4), b));
  CHECK(bitwise_equal(ops::slice_channels(cat, 4, 6), c));

  std::vector<Tensor<float>> single{a};
  CHECK(bitwise_equal(ops::concat_channels<float>(single), a));

  std::vector<Tensor<float>> bad{a, random_tensor<float>({2, 1, 5, 4}, 41, 3)};
  CHECK_THROWS_AS(ops::concat_channels<float>(bad), std::invalid_argument);
  CHECK_THROWS_AS(ops::slice_channels(cat, 4, 3), std::invalid_argument);
}

TEST_CASE("concat_channels: gradient splits per block") {
  auto a = Tensor<double>::full({1, 1, 1, 2}, 1.0, true);
  auto b = Tensor<double>::full({1, 2, 1, 2}, 1.0, true);
  Tape<double> tape;
  std::vector<Tensor<double>> parts{a, b};
  auto cat = ops::concat_channels<double>(parts);
  auto weights = Tensor<double>::from_data({1, 3, 1, 2}, {1, 2, 3, 4, 5, 6});
  tape.backward(ops::sum(ops::mul(cat, weights)));
  CHECK(a.grad()[0] == 1.0);
  CHECK(a.grad()[1] == 2.0);
  CHECK(b.grad()[0] == 3.0);
  CHECK(b.grad()[3] == 6.0);
}

TEST_CASE("channelwise_scale: gate semantics") {
  auto x = Tensor<double>::from_data({1, 1, 1, 2}, {2.0, 4.0});
  auto half = Tensor<double>::from_data({1, 1}, {0.5});
  auto y = ops::channelwise_scale(x, half);
  CHECK(y.data()[0] == 1.0);
  CHECK(y.data()[1] == 2.0);

  auto big = random_tensor<double>({2, 3, 4, 4}, 51, 0);
  CHECK(bitwise_equal(ops::channelwise_scale(big, Tensor<double>::full({2, 3}, 1.0)), big));
  auto zero = ops::channelwise_scale(big, Tensor<double>::zeros({2, 3}));
  for (double v : zero.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(ops::channelwise_scale(big, Tensor<double>::zeros({2, 4})),
                  std::invalid_argument);
}

TEST_CASE("channelwise_scale: gradients to both operands") {
  auto x = Tensor<double>::from_data({1, 2, 1, 1}, {3.0, -2.0});
  auto g = Tensor<double>::from_data({1, 2}, {0.5, 2.0});
  x.set_requires_grad(true);
  g.set_requires_grad(true);
  Tape<double> tape;
  tape.backward(ops::sum(ops::channelwise_scale(x, g)));
  CHECK(x.grad()[0] == 0.5);
  CHECK(x.grad()[1] == 2.0);
  CHECK(g.grad()[0] == 3.0);
  CHECK(g.grad()[1] == -2.0);
}

TEST_CASE("scalar_scale: learnable whole-tensor factor") {
  auto x = Tensor<double>::from_data({2}, {1.0, 4.0});
  auto f = Tensor<double>::scalar(3.0);
  x.set_requires_grad(true);
  f.set_requires_grad(true);
  Tape<double> tape;
  auto y = ops::scalar_scale(x, f);
  CHECK(y.data()[0] == 3.0);
  CHECK(y.data()[1] == 12.0);
  tape.backward(ops::sum(y));
  CHECK(x.grad()[0] == 3.0);
  CHECK(f.grad()[0] == 5.0);
}

TEST_CASE("add: algebraic identities") {
  auto a = random_tensor<double>({3, 3}, 61, 0);
  CHECK(bitwise_equal(ops::add(a, Tensor<double>::zeros({3, 3})), a));
  auto neg = ops::scale(a, -1.0);
  auto cancel = ops::add(a, neg);
  for (double v : cancel.data()) CHECK(v == 0.0);
  auto b = random_tensor<double>({3, 3}, 61, 1);
  CHECK(bitwise_equal(ops::add(a, b), ops::add(b, a)));
  CHECK_THROWS_AS(ops::add(a, Tensor<double>::zeros({3, 4})), std::invalid_argument);
}

TEST_CASE("composite chain runs forward and backward") {
  auto x = random_tensor<double>({2, 2, 6, 6}, 71, 0);
  auto k = random_tensor<double>({4, 2, 3, 3}, 71, 1);
  x.set_requires_grad(true);
  k.set_requires_grad(true);
  Tape<double> tape;
  auto loss = ops::sum(ops::global_avg_pool(ops::relu(ops::conv2d(x, k, {}, 1, 1))));
  tape.backward(loss);
  CHECK(x.has_grad());
  CHECK(k.has_grad());
}

TEST_CASE("identical inputs give bitwise-identical outputs and gradients") {
  auto run = [](std::vector<double>& out_vals, std::vector<double>& out_grads) {
    auto x = random_tensor<double>({2, 3, 8, 8}, 99, 0);
    auto k = random_tensor<double>({6, 3, 3, 3}, 99, 1);
    x.set_requires_grad(true);
    Tape<double> tape;
    auto y = ops::sigmoid(ops::conv2d(x, k, {}, 2, 1));
    tape.backward(ops::sum(y));
    out_vals.assign(y.data().begin(), y.data().end());
    out_grads.assign(x.grad().begin(), x.grad().end());
  };
  std::vector<double> v1, g1, v2, g2;
  run(v1, g1);
  run(v2, g2);
  CHECK(v1 == v2);
  CHECK(g1 == g2);
}

TEST_SUITE_END();
