#include "nbnlab/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "nbnlab/simd/kernels.hpp"

namespace nbnlab {
namespace {

// Allocated-on-demand gradient slot of an input, or nullptr when the input
// does not take gradients.
std::vector<double>* grad_slot(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  auto& g = t.impl()->grad;
  if (g.empty()) g.assign(t.numel(), 0.0);
  return &g;
}

enum class Broadcast { full, trailing, scalar };

bool is_trailing(const Shape& small, const Shape& big) {
  if (small.size() >= big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - small.size());
}

bool broadcastable(const Shape& small, const Shape& big) {
  return small == big || shape_numel(small) == 1 || is_trailing(small, big);
}

Broadcast classify(const Shape& operand, const Shape& out) {
  if (operand == out) return Broadcast::full;
  if (shape_numel(operand) == 1) return Broadcast::scalar;
  return Broadcast::trailing;
}

std::size_t bcast_index(Broadcast mode, std::size_t i, std::size_t inner) {
  switch (mode) {
    case Broadcast::full: return i;
    case Broadcast::trailing: return i % inner;
    case Broadcast::scalar: return 0;
  }
  return i;
}

template <class Value, class DLhs, class DRhs>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, Value value,
              DLhs d_lhs, DRhs d_rhs) {
  Shape out_shape;
  if (broadcastable(b.shape(), a.shape())) {
    out_shape = a.shape();
  } else if (broadcastable(a.shape(), b.shape())) {
    out_shape = b.shape();
  } else {
    throw ShapeError(name, a.shape(), b.shape());
  }
  const Broadcast ma = classify(a.shape(), out_shape);
  const Broadcast mb = classify(b.shape(), out_shape);
  const std::size_t na = a.numel();
  const std::size_t nb = b.numel();
  const std::size_t n = shape_numel(out_shape);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = value(ad[bcast_index(ma, i, na)], bd[bcast_index(mb, i, nb)]);

  return record_op(name, {a, b}, out_shape, std::move(out),
                   [a, b, ma, mb, na, nb, d_lhs, d_rhs](std::span<const double> g) {
                     auto ad = a.data();
                     auto bd = b.data();
                     if (auto* ga = grad_slot(a)) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const std::size_t ia = bcast_index(ma, i, na);
                         (*ga)[ia] += g[i] * d_lhs(ad[ia], bd[bcast_index(mb, i, nb)]);
                       }
                     }
                     if (auto* gb = grad_slot(b)) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const std::size_t ib = bcast_index(mb, i, nb);
                         (*gb)[ib] += g[i] * d_rhs(ad[bcast_index(ma, i, na)], bd[ib]);
                       }
                     }
                   });
}

template <class Value, class Deriv>
Tensor unary(const char* name, const Tensor& a, Value value, Deriv deriv) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = value(ad[i]);
  return record_op(name, {a}, a.shape(), std::move(out),
                   [a, deriv](std::span<const double> g) {
                     auto* ga = grad_slot(a);
                     if (ga == nullptr) return;
                     auto ad = a.data();
                     for (std::size_t i = 0; i < g.size(); ++i)
                       (*ga)[i] += g[i] * deriv(ad[i]);
                   });
}

void require_matrix(const char* op, const Tensor& t) {
  if (t.ndim() != 2)
    throw ShapeError(std::string(op) + ": expected a matrix, got " +
                     shape_to_string(t.shape()));
}

struct ReductionPlan {
  Shape out_shape;
  std::vector<std::size_t> out_index;  // per input element
  std::size_t count = 0;               // input elements per output element
};

ReductionPlan plan_reduction(const char* op, const Shape& shape,
                             const std::vector<std::size_t>& axes) {
  if (axes.empty())
    throw std::invalid_argument(std::string(op) + ": empty reduction axis list");
  std::vector<bool> reduced(shape.size(), false);
  for (std::size_t ax : axes) {
    if (ax >= shape.size())
      throw ShapeError(std::string(op) + ": axis " + std::to_string(ax) +
                       " out of range for " + shape_to_string(shape));
    if (reduced[ax])
      throw std::invalid_argument(std::string(op) + ": duplicate axis " +
                                  std::to_string(ax));
    reduced[ax] = true;
  }
  ReductionPlan plan;
  plan.count = 1;
  for (std::size_t d = 0; d < shape.size(); ++d) {
    if (reduced[d]) plan.count *= shape[d];
    else plan.out_shape.push_back(shape[d]);
  }
  if (plan.out_shape.empty()) plan.out_shape = {1};

  const std::size_t n = shape_numel(shape);
  plan.out_index.resize(n);
  std::vector<std::size_t> coord(shape.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < shape.size(); ++d)
      if (!reduced[d]) o = o * shape[d] + coord[d];
    plan.out_index[i] = o;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++coord[d] < shape[d]) break;
      coord[d] = 0;
    }
  }
  return plan;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return factor * x; },
      [factor](double) { return factor; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; },
      [](double x) { return 2.0 * x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul", a.shape(), b.shape());
  std::vector<double> out(m * n);
  const auto& kern = simd::active_kernels();
  kern.gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return record_op("matmul", {a, b}, {m, n}, std::move(out),
                   [a, b, m, n, k](std::span<const double> g) {
                     const auto& kern = simd::active_kernels();
                     if (auto* ga = grad_slot(a))
                       kern.gemm_nt(m, k, n, g.data(), b.data().data(), ga->data(), true);
                     if (auto* gb = grad_slot(b))
                       kern.gemm_tn(k, n, m, a.data().data(), g.data(), gb->data(), true);
                   });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_matrix("linear", x);
  require_matrix("linear", weight);
  const std::size_t batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) throw ShapeError("linear", x.shape(), weight.shape());
  if (bias.defined() && bias.shape() != Shape{out_dim})
    throw ShapeError("linear bias", weight.shape(), bias.shape());
  std::vector<double> out(batch * out_dim);
  const auto& kern = simd::active_kernels();
  kern.gemm_nt(batch, out_dim, in, x.data().data(), weight.data().data(),
               out.data(), false);
  if (bias.defined()) {
    auto bd = bias.data();
    for (std::size_t r = 0; r < batch; ++r)
      for (std::size_t j = 0; j < out_dim; ++j) out[r * out_dim + j] += bd[j];
  }
  return record_op(
      "linear", {x, weight, bias}, {batch, out_dim}, std::move(out),
      [x, weight, bias, batch, in, out_dim](std::span<const double> g) {
        const auto& kern = simd::active_kernels();
        if (auto* gx = grad_slot(x))
          kern.gemm_nn(batch, in, out_dim, g.data(), weight.data().data(),
                       gx->data(), true);
        if (auto* gw = grad_slot(weight))
          kern.gemm_tn(out_dim, in, batch, g.data(), x.data().data(),
                       gw->data(), true);
        if (auto* gb = grad_slot(bias))
          for (std::size_t r = 0; r < batch; ++r)
            kern.axpy(out_dim, 1.0, g.data() + r * out_dim, gb->data());
      });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return record_op("sum", {a}, {1}, {s}, [a](std::span<const double> g) {
    if (auto* ga = grad_slot(a))
      for (double& v : *ga) v += g[0];
  });
}

std::vector<std::size_t> all_axes(const Tensor& a) {
  std::vector<std::size_t> axes(a.ndim());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return axes;
}

Tensor reduce_mean(const Tensor& a, const std::vector<std::size_t>& axes) {
  auto plan = plan_reduction("reduce_mean", a.shape(), axes);
  std::vector<double> out(shape_numel(plan.out_shape), 0.0);
  auto ad = a.data();
  for (std::size_t i = 0; i < ad.size(); ++i) out[plan.out_index[i]] += ad[i];
  const double inv = 1.0 / static_cast<double>(plan.count);
  for (double& v : out) v *= inv;
  Shape out_shape = plan.out_shape;
  return record_op("reduce_mean", {a}, std::move(out_shape), std::move(out),
                   [a, plan = std::move(plan), inv](std::span<const double> g) {
                     if (auto* ga = grad_slot(a))
                       for (std::size_t i = 0; i < ga->size(); ++i)
                         (*ga)[i] += g[plan.out_index[i]] * inv;
                   });
}

Tensor reduce_var(const Tensor& a, const std::vector<std::size_t>& axes,
                  VarianceDivisor divisor) {
  auto plan = plan_reduction("reduce_var", a.shape(), axes);
  if (divisor == VarianceDivisor::sample && plan.count < 2)
    throw std::invalid_argument(
        "reduce_var: sample variance needs at least two elements per output");
  const std::size_t no = shape_numel(plan.out_shape);
  std::vector<double> mean(no, 0.0);
  auto ad = a.data();
  for (std::size_t i = 0; i < ad.size(); ++i) mean[plan.out_index[i]] += ad[i];
  for (double& v : mean) v /= static_cast<double>(plan.count);
  std::vector<double> out(no, 0.0);
  for (std::size_t i = 0; i < ad.size(); ++i) {
    const double d = ad[i] - mean[plan.out_index[i]];
    out[plan.out_index[i]] += d * d;
  }
  const double denom = divisor == VarianceDivisor::population
                           ? static_cast<double>(plan.count)
                           : static_cast<double>(plan.count - 1);
  for (double& v : out) v /= denom;
  Shape out_shape = plan.out_shape;
  return record_op(
      "reduce_var", {a}, std::move(out_shape), std::move(out),
      [a, plan = std::move(plan), mean = std::move(mean), denom](std::span<const double> g) {
        auto* ga = grad_slot(a);
        if (ga == nullptr) return;
        auto ad = a.data();
        for (std::size_t i = 0; i < ga->size(); ++i) {
          const std::size_t o = plan.out_index[i];
          (*ga)[i] += g[o] * 2.0 * (ad[i] - mean[o]) / denom;
        }
      });
}

Tensor l2_norm(const Tensor& a) {
  double ss = 0.0;
  for (double v : a.data()) ss += v * v;
  const double norm = std::sqrt(ss);
  return record_op("l2_norm", {a}, {1}, {norm}, [a, norm](std::span<const double> g) {
    auto* ga = grad_slot(a);
    if (ga == nullptr || norm == 0.0) return;
    auto ad = a.data();
    for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g[0] * ad[i] / norm;
  });
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             std::span<const std::size_t> labels,
                             std::span<const double> adjustment) {
  require_matrix("softmax_cross_entropy", logits);
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for a batch of " + std::to_string(batch));
  if (!adjustment.empty() && adjustment.size() != classes)
    throw ShapeError("softmax_cross_entropy: adjustment length " +
                     std::to_string(adjustment.size()) + " for " +
                     std::to_string(classes) + " classes");
  for (std::size_t label : labels)
    if (label >= classes)
      throw std::out_of_range("softmax_cross_entropy: label " +
                              std::to_string(label) + " outside [0, " +
                              std::to_string(classes) + ")");

  auto zd = logits.data();
  std::vector<double> probs(batch * classes);
  double total = 0.0;
  for (std::size_t r = 0; r < batch; ++r) {
    const double* z = zd.data() + r * classes;
    double* p = probs.data() + r * classes;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < classes; ++j) {
      p[j] = z[j] + (adjustment.empty() ? 0.0 : adjustment[j]);
      mx = std::max(mx, p[j]);
    }
    double se = 0.0;
    for (std::size_t j = 0; j < classes; ++j) se += std::exp(p[j] - mx);
    const double lse = mx + std::log(se);
    total += lse - p[labels[r]];
    for (std::size_t j = 0; j < classes; ++j) p[j] = std::exp(p[j] - lse);
  }
  const double mean = total / static_cast<double>(batch);
  std::vector<std::size_t> label_copy(labels.begin(), labels.end());
  return record_op(
      "softmax_cross_entropy", {logits}, {1}, {mean},
      [logits, probs = std::move(probs), label_copy = std::move(label_copy), batch,
       classes](std::span<const double> g) {
        auto* gz = grad_slot(logits);
        if (gz == nullptr) return;
        const double s = g[0] / static_cast<double>(batch);
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t j = 0; j < classes; ++j) {
            const double onehot = j == label_copy[r] ? 1.0 : 0.0;
            (*gz)[r * classes + j] += s * (probs[r * classes + j] - onehot);
          }
        }
      });
}

Standardized standardize_batch(const Tensor& x, double epsilon) {
  require_matrix("standardize_batch", x);
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  auto xd = x.data();
  std::vector<double> mean(channels, 0.0), var(channels, 0.0);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < channels; ++c) mean[c] += xd[r * channels + c];
  for (double& m : mean) m /= static_cast<double>(batch);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < channels; ++c) {
      const double d = xd[r * channels + c] - mean[c];
      var[c] += d * d;
    }
  for (double& v : var) v /= static_cast<double>(batch);
  std::vector<double> inv(channels);
  for (std::size_t c = 0; c < channels; ++c) inv[c] = 1.0 / std::sqrt(var[c] + epsilon);
  std::vector<double> out(batch * channels);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < channels; ++c)
      out[r * channels + c] = (xd[r * channels + c] - mean[c]) * inv[c];

  Standardized result;
  result.batch_mean = mean;
  result.batch_var = var;
  result.output = record_op(
      "standardize_batch", {x}, {batch, channels}, out,
      [x, xhat = out, inv, batch, channels](std::span<const double> g) {
        auto* gx = grad_slot(x);
        if (gx == nullptr) return;
        std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0);
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t c = 0; c < channels; ++c) {
            sum_g[c] += g[r * channels + c];
            sum_gx[c] += g[r * channels + c] * xhat[r * channels + c];
          }
        const double nb = static_cast<double>(batch);
        for (std::size_t r = 0; r < batch; ++r)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t i = r * channels + c;
            (*gx)[i] += inv[c] / nb * (nb * g[i] - sum_g[c] - xhat[i] * sum_gx[c]);
          }
      });
  return result;
}

Tensor standardize_with(const Tensor& x, std::span<const double> mean,
                        std::span<const double> var, double epsilon) {
  require_matrix("standardize_with", x);
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  if (mean.size() != channels || var.size() != channels)
    throw ShapeError("standardize_with: statistics of length " +
                     std::to_string(mean.size()) + " for " +
                     std::to_string(channels) + " channels");
  std::vector<double> inv(channels);
  for (std::size_t c = 0; c < channels; ++c) inv[c] = 1.0 / std::sqrt(var[c] + epsilon);
  auto xd = x.data();
  std::vector<double> out(batch * channels);
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < channels; ++c)
      out[r * channels + c] = (xd[r * channels + c] - mean[c]) * inv[c];
  return record_op("standardize_with", {x}, {batch, channels}, std::move(out),
                   [x, inv, channels](std::span<const double> g) {
                     auto* gx = grad_slot(x);
                     if (gx == nullptr) return;
                     for (std::size_t i = 0; i < g.size(); ++i)
                       (*gx)[i] += g[i] * inv[i % channels];
                   });
}

Tensor scale_rows_to_norm(const Tensor& direction, const Tensor& magnitudes) {
  require_matrix("scale_rows_to_norm", direction);
  const std::size_t rows = direction.dim(0), cols = direction.dim(1);
  if (magnitudes.shape() != Shape{rows})
    throw ShapeError("scale_rows_to_norm", direction.shape(), magnitudes.shape());
  auto dd = direction.data();
  auto md = magnitudes.data();
  std::vector<double> norms(rows);
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < cols; ++j) ss += dd[i * cols + j] * dd[i * cols + j];
    norms[i] = std::sqrt(ss);
    if (norms[i] == 0.0)
      throw std::domain_error("scale_rows_to_norm: row " + std::to_string(i) +
                              " has zero norm");
    for (std::size_t j = 0; j < cols; ++j)
      out[i * cols + j] = md[i] * dd[i * cols + j] / norms[i];
  }
  return record_op(
      "scale_rows_to_norm", {direction, magnitudes}, {rows, cols}, std::move(out),
      [direction, magnitudes, norms, rows, cols](std::span<const double> g) {
        auto dd = direction.data();
        auto md = magnitudes.data();
        auto* gd = grad_slot(direction);
        auto* gm = grad_slot(magnitudes);
        for (std::size_t i = 0; i < rows; ++i) {
          double proj = 0.0;  // <g_i, u_i>
          for (std::size_t j = 0; j < cols; ++j)
            proj += g[i * cols + j] * dd[i * cols + j] / norms[i];
          if (gm != nullptr) (*gm)[i] += proj;
          if (gd != nullptr) {
            const double s = md[i] / norms[i];
            for (std::size_t j = 0; j < cols; ++j) {
              const double u = dd[i * cols + j] / norms[i];
              (*gd)[i * cols + j] += s * (g[i * cols + j] - u * proj);
            }
          }
        }
      });
}

}  // namespace nbnlab
