#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "nbnlab/tensor.hpp"

namespace nbnlab {

// Elementwise binary ops. Operands must have equal shapes, or the smaller one
// must match the trailing axes of the larger (a per-row vector broadcast over
// the leading batch axis), or be a single element. Violations raise
// ShapeError naming both shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);

// a[m x k] * b[k x n]
Tensor matmul(const Tensor& a, const Tensor& b);

// x[B x in] * weight[out x in]^T (+ bias[out]). `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

// Scalar sum of all entries.
Tensor sum(const Tensor& a);

enum class VarianceDivisor { population, sample };

// Reduces over the listed axes (each valid, no duplicates, non-empty list).
// The result drops the reduced axes; reducing every axis yields shape [1].
Tensor reduce_mean(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor reduce_var(const Tensor& a, const std::vector<std::size_t>& axes,
                  VarianceDivisor divisor);
std::vector<std::size_t> all_axes(const Tensor& a);

// Euclidean norm of all entries, shape [1].
Tensor l2_norm(const Tensor& a);

// Mean negative log-likelihood of softmax(logits + adjustment) at the labels.
// `adjustment`, when non-empty, is a per-class additive offset (length K);
// passing log class priors gives the balanced-softmax loss.
Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const std::size_t> labels,
                             std::span<const double> adjustment = {});

struct Standardized {
  Tensor output;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;  // population divisor
};

// Per-column standardization of x[B x C] with its own batch statistics:
// (x - mean) / sqrt(var + epsilon). Differentiable through the statistics.
Standardized standardize_batch(const Tensor& x, double epsilon);

// Same map with fixed statistics; differentiable in x only.
Tensor standardize_with(const Tensor& x, std::span<const double> mean,
                        std::span<const double> var, double epsilon);

// Row i of the result is magnitudes[i] * direction[i] / ||direction[i]||.
// Raises std::domain_error on a zero-norm row.
Tensor scale_rows_to_norm(const Tensor& direction, const Tensor& magnitudes);

}  // namespace nbnlab
