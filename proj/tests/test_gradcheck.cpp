#include <doctest.h>

#include <vector>

#include "pyrdet/gradcheck.hpp"
#include "pyrdet/ops.hpp"
#include "pyrdet/rng.hpp"

using namespace pyrdet;

namespace {

Tensor<double> randn_like(Shape shape, std::uint64_t seed, std::uint64_t stream = 0) {
  CounterRng rng(seed, stream);
  auto t = Tensor<double>::zeros(shape);
  for (auto& v : t.raw()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST_SUITE_BEGIN("gradcheck");

TEST_CASE("linear function is exact to rounding") {
  auto x = randn_like({2, 3}, 1);
  auto err = finite_difference_check([&] { return ops::sum(ops::scale(x, 3.0)); }, x);
  CHECK(err <= 1e-9);
}

TEST_CASE("sum of sigmoid meets the 1e-6 oracle bound") {
  auto x = randn_like({4, 5}, 2);
  auto err = finite_difference_check([&] { return ops::sum(ops::sigmoid(x)); }, x, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("every operator passes at 1e-4 with kink-nudged inputs") {
  auto x = randn_like({2, 4, 6, 6}, 3);
  nudge_from_relu_kinks(x);

  SUBCASE("conv2d wrt input, kernel, bias") {
    auto k = randn_like({3, 4, 3, 3}, 4);
    auto b = randn_like({3}, 5);
    std::vector<Tensor<double>> params{x, k, b};
    auto f = [&] { return ops::sum(ops::conv2d(x, k, b, 2, 1)); };
    CHECK(finite_difference_check(f, params) < 1e-4);
  }
  SUBCASE("relu away from kinks") {
    CHECK(finite_difference_check([&] { return ops::sum(ops::relu(x)); }, x) < 1e-4);
  }
  SUBCASE("fully_connected") {
    auto in = randn_like({3, 4}, 6);
    auto w = randn_like({2, 4}, 7);
    auto b = randn_like({2}, 8);
    std::vector<Tensor<double>> params{in, w, b};
    auto f = [&] { return ops::sum(ops::sigmoid(ops::fully_connected(in, w, b))); };
    CHECK(finite_difference_check(f, params) < 1e-4);
  }
  SUBCASE("global_avg_pool") {
    CHECK(finite_difference_check([&] { return ops::sum(ops::global_avg_pool(x)); }, x) <
          1e-4);
  }
  SUBCASE("bilinear_resize up and down") {
    auto up = [&] { return ops::sum(ops::bilinear_resize(x, 9, 13)); };
    CHECK(finite_difference_check(up, x) < 1e-4);
    auto down = [&] { return ops::sum(ops::bilinear_resize(x, 3, 4)); };
    CHECK(finite_difference_check(down, x) < 1e-4);
  }
  SUBCASE("adaptive_avg_pool") {
    auto f = [&] { return ops::sum(ops::adaptive_avg_pool(x, 2, 3)); };
    CHECK(finite_difference_check(f, x) < 1e-4);
  }
  SUBCASE("concat and slice") {
    auto y = randn_like({2, 2, 6, 6}, 9);
    std::vector<Tensor<double>> params{x, y};
    auto f = [&] {
      std::vector<Tensor<double>> parts{x, y};
      auto cat = ops::concat_channels<double>(parts);
      return ops::sum(ops::mul(ops::slice_channels(cat, 2, 5), ops::slice_channels(cat, 1, 4)));
    };
    CHECK(finite_difference_check(f, params) < 1e-4);
  }
  SUBCASE("channelwise_scale") {
    auto g = randn_like({2, 4}, 10);
    std::vector<Tensor<double>> params{x, g};
    auto f = [&] { return ops::sum(ops::channelwise_scale(x, g)); };
    CHECK(finite_difference_check(f, params) < 1e-4);
  }
  SUBCASE("scalar_scale, add, mul") {
    auto y = randn_like({2, 4, 6, 6}, 11);
    auto s = Tensor<double>::scalar(0.7);
    std::vector<Tensor<double>> params{x, y, s};
    auto f = [&] {
      return ops::sum(ops::mul(ops::add(x, y), ops::scalar_scale(x, s)));
    };
    CHECK(finite_difference_check(f, params) < 1e-4);
  }
}

TEST_CASE("composite conv-relu-pool chain matches finite differences") {
  auto x = randn_like({1, 2, 8, 8}, 20);
  auto k = randn_like({3, 2, 3, 3}, 21);
  nudge_from_relu_kinks(x);
  std::vector<Tensor<double>> params{x, k};
  auto f = [&] {
    auto h = ops::relu(ops::conv2d(x, k, {}, 1, 1));
    return ops::sum(ops::sigmoid(ops::global_avg_pool(h)));
  };
  CHECK(finite_difference_check(f, params) < 1e-4);
}

TEST_CASE("a broken derivative is flagged") {
  // The analytic pass sees only sum(x) because scale() detaches its factor;
  // the FD pass sees the quadratic dependence through the same x values.
  auto x = randn_like({3}, 30);
  nudge_from_relu_kinks(x, 0.3);  // keep |x| large so the mismatch is visible
  auto f = [&] { return ops::sum(ops::scalar_scale(x.clone(), ops::sum(x))); };
  // f = sum(x)*sum(clone) numerically, but clone() detaches so the analytic
  // gradient misses half the product rule.
  CHECK(finite_difference_check(f, x) > 1e-2);
}

TEST_SUITE_END();
