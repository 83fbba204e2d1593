#pragma once

#include <functional>

#include "nbnlab/tensor.hpp"

namespace nbnlab {

using ScalarFn = std::function<double(const Tensor&)>;

// Central-difference gradient (f(x + h e_i) - f(x - h e_i)) / 2h for every
// coordinate of `at`. `f` is evaluated on perturbed copies with recording
// suspended, so it must not depend on tape state.
Tensor finite_diff_grad(const ScalarFn& f, const Tensor& at, double h);

// max_i |a_i - b_i| / max(1, |a_i|, |b_i|)
double max_relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace nbnlab
