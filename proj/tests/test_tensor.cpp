#include <doctest.h>

#include <limits>
#include <stdexcept>

#include "pyrdet/ops.hpp"
#include "pyrdet/tensor.hpp"

using namespace pyrdet;

TEST_SUITE_BEGIN("tensor");

TEST_CASE("construction and shape accounting") {
  auto t = Tensor<double>::zeros({2, 3, 4});
  CHECK(t.defined());
  CHECK(t.size() == 24);
  CHECK(t.ndim() == 3);
  CHECK(t.dim(1) == 3);
  for (double v : t.data()) CHECK(v == 0.0);

  auto f = Tensor<double>::full({2, 2}, 1.5);
  for (double v : f.data()) CHECK(v == 1.5);

  CHECK(Tensor<double>::scalar(7.0).item() == 7.0);
  CHECK_THROWS_AS(Tensor<double>::from_data({2, 2}, {1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS((void)Tensor<double>::zeros({2, 2}).item(), std::invalid_argument);
}

TEST_CASE("copies alias, clone does not") {
  auto a = Tensor<float>::full({4}, 2.0f);
  Tensor<float> b = a;
  b.raw()[0] = 9.0f;
  CHECK(a.data()[0] == 9.0f);
  CHECK(a.same_storage(b));

  auto c = a.clone();
  c.raw()[0] = -1.0f;
  CHECK(a.data()[0] == 9.0f);
  CHECK_FALSE(a.same_storage(c));
  CHECK_FALSE(c.requires_grad());
}

TEST_CASE("check_finite rejects NaN and Inf") {
  auto t = Tensor<double>::zeros({3});
  t.raw()[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(t.check_finite("test"), std::runtime_error);
  t.raw()[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(t.check_finite("test"), std::runtime_error);
  t.raw()[1] = 1.0;
  CHECK_NOTHROW(t.check_finite("test"));
}

TEST_CASE("ops do not record without an active tape") {
  auto x = Tensor<double>::full({3}, 1.0, /*requires_grad=*/true);
  auto y = ops::relu(x);
  CHECK(y.node_id() == -1);
  CHECK_THROWS_AS(ops::backward(ops::sum(y)), std::logic_error);
}

TEST_CASE("backward: sum gives ones, quadratic gives x") {
  auto x = Tensor<double>::from_data({3}, {1.0, -2.0, 3.0});
  x.set_requires_grad(true);
  {
    Tape<double> tape;
    auto loss = ops::sum(x);
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  x.zero_grad();
  {
    Tape<double> tape;
    auto loss = ops::scale(ops::sum(ops::mul(x, x)), 0.5);
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(1.0));
    CHECK(x.grad()[1] == doctest::Approx(-2.0));
    CHECK(x.grad()[2] == doctest::Approx(3.0));
  }
}

TEST_CASE("backward validates its input") {
  auto x = Tensor<double>::full({2}, 1.0, true);
  Tape<double> tape;
  auto y = ops::mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);  // not scalar
  auto leaf = Tensor<double>::scalar(1.0);
  CHECK_THROWS_AS(tape.backward(leaf), std::invalid_argument);  // detached
  auto loss = ops::sum(y);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), std::logic_error);  // repeated
}

TEST_CASE("tape visits each recorded node exactly once") {
  auto x = Tensor<double>::full({2}, 3.0, true);
  auto y = Tensor<double>::full({2}, 4.0, true);
  Tape<double> tape;
  // Diamond: z = x*y + x, so x is consumed by two entries.
  auto z = ops::add(ops::mul(x, y), x);
  auto loss = ops::sum(z);
  CHECK(tape.num_entries() == 3);
  tape.backward(loss);
  CHECK(tape.nodes_visited() == 3);
  CHECK(x.grad()[0] == doctest::Approx(5.0));  // y + 1
  CHECK(y.grad()[0] == doctest::Approx(3.0));  // x
}

TEST_CASE("backward skips entries unreachable from the loss") {
  auto x = Tensor<double>::full({2}, 1.0, true);
  Tape<double> tape;
  auto used = ops::mul(x, x);
  auto unused = ops::relu(x);  // recorded but not part of the loss
  (void)unused;
  auto loss = ops::sum(used);
  CHECK(tape.num_entries() == 3);
  tape.backward(loss);
  CHECK(tape.nodes_visited() == 2);
}

TEST_CASE("gradients accumulate across uses and reset with zero_grad") {
  auto x = Tensor<double>::full({1}, 2.0, true);
  {
    Tape<double> tape;
    auto loss = ops::sum(ops::add(x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == 2.0);
  }
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_SUITE_END();
