#include "nbnlab/finite_diff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nbnlab {

Tensor finite_diff_grad(const ScalarFn& f, const Tensor& at, double h) {
  NoGradScope no_grad;
  Tensor probe = at.detach();
  auto values = probe.mutable_data();
  std::vector<double> grad(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double original = values[i];
    values[i] = original + h;
    const double up = f(probe);
    values[i] = original - h;
    const double down = f(probe);
    values[i] = original;
    grad[i] = (up - down) / (2.0 * h);
  }
  return Tensor::from(at.shape(), std::move(grad));
}

double max_relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("max_relative_error: length mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

}  // namespace nbnlab
