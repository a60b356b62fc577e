#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pyrdet/tensor.hpp"

namespace pyrdet {

// Central-difference verification of reverse-mode gradients, float64 only.
//
// `f` must be a deterministic, side-effect-free function of the given input
// tensors (it reads them through their handles and returns a scalar). The
// analytic gradient is computed once under a fresh tape; every coordinate of
// every input is then perturbed by ±eps and the central difference
// (f(x+eps) - f(x-eps)) / 2eps is compared against it. Returns the maximum
// relative error over all coordinates, with denominator max(|a|, |c|, 1e-8).
double finite_difference_check(const std::function<Tensor<double>()>& f,
                               std::span<Tensor<double>> inputs, double eps = 1e-5);

double finite_difference_check(const std::function<Tensor<double>()>& f,
                               Tensor<double>& input, double eps = 1e-5);

// Shifts every coordinate of x that lies within `margin` of zero away from it,
// keeping the sign (coordinates at exactly zero move up). Used to keep ReLU
// kinks out of the finite-difference stencil.
void nudge_from_relu_kinks(Tensor<double>& x, double margin = 1e-3);

struct GradCheckItem {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  double tolerance = 1e-4;
  std::vector<GradCheckItem> items;

  bool all_pass() const;
  const GradCheckItem& worst() const;  // items must be non-empty
};

// Checks every differentiable operator in isolation, each pyramid variant end
// to end (hierarchy inputs and parameters), and the full detector loss on a
// miniature model. All in float64 at toy sizes; a few seconds total.
GradCheckReport run_gradcheck_suite(std::uint64_t seed);

// One line per item plus a summary line, matching the CLI's output.
std::string format_gradcheck(const GradCheckReport& report);

}  // namespace pyrdet
