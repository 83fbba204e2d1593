#include "nbnlab/normalization.hpp"

#include <cmath>
#include <stdexcept>

#include "nbnlab/ops.hpp"

namespace nbnlab {
namespace {

void check_input(const char* op, const Tensor& x, std::size_t channels, Mode mode) {
  if (x.ndim() != 2)
    throw ShapeError(std::string(op) + ": expected [B x C] input, got " +
                     shape_to_string(x.shape()));
  if (x.dim(1) != channels)
    throw ShapeError(op, x.shape(), Shape{channels});
  if (mode == Mode::train && x.dim(0) < 2)
    throw std::invalid_argument(std::string(op) +
                                ": train mode needs a batch of at least 2 samples");
}

Tensor standardize(const Tensor& x, RunningStats& stats, Mode mode) {
  if (mode == Mode::eval) return standardize_with(x, stats.mean, stats.var, stats.epsilon);
  Standardized s = standardize_batch(x, stats.epsilon);
  stats.update(s.batch_mean, s.batch_var);
  return s.output;
}

double norm_of(const Tensor& t) {
  double ss = 0.0;
  for (double v : t.data()) ss += v * v;
  return std::sqrt(ss);
}

void require_nonzero(const Tensor& dir, const char* which) {
  if (norm_of(dir) == 0.0)
    throw std::domain_error(std::string("NBN ") + which +
                            " direction has zero norm and cannot be normalized");
}

Tensor effective(const Tensor& dir, const Tensor& magnitude, bool normalize,
                 const char* which) {
  if (!normalize) return mul(dir, magnitude);
  require_nonzero(dir, which);
  return mul(div(dir, l2_norm(dir)), magnitude);
}

}  // namespace

RunningStats RunningStats::make(std::size_t channels) {
  RunningStats s;
  s.mean.assign(channels, 0.0);
  s.var.assign(channels, 1.0);
  return s;
}

void RunningStats::update(std::span<const double> batch_mean,
                          std::span<const double> batch_var) {
  for (std::size_t c = 0; c < mean.size(); ++c) {
    mean[c] = (1.0 - momentum) * mean[c] + momentum * batch_mean[c];
    var[c] = (1.0 - momentum) * var[c] + momentum * batch_var[c];
  }
}

BnState BnState::make(std::size_t channels) {
  BnState s;
  s.gamma = Tensor::full({channels}, 1.0, true);
  s.beta = Tensor::zeros({channels}, true);
  s.stats = RunningStats::make(channels);
  return s;
}

std::string to_string(ShareScope scope) {
  switch (scope) {
    case ShareScope::per_layer: return "per-layer";
    case ShareScope::per_block: return "per-block";
    case ShareScope::global: return "global";
  }
  return "global";
}

ShareScope share_scope_from_string(const std::string& text) {
  if (text == "per-layer") return ShareScope::per_layer;
  if (text == "per-block") return ShareScope::per_block;
  if (text == "global") return ShareScope::global;
  throw std::invalid_argument("unknown magnitude scope '" + text +
                              "' (expected per-layer, per-block or global)");
}

std::shared_ptr<SharedMagnitude> SharedMagnitude::make(double value, ShareScope scope) {
  auto m = std::make_shared<SharedMagnitude>();
  m->value = Tensor::scalar(value, true);
  m->scope = scope;
  return m;
}

NbnState NbnState::make(std::size_t channels, std::shared_ptr<SharedMagnitude> magnitude) {
  NbnState s;
  s.gamma_dir = Tensor::full({channels}, 1.0, true);
  s.beta_dir = Tensor::full({channels}, 1e-3, true);
  s.weight_magnitude = magnitude;
  s.bias_magnitude = std::move(magnitude);
  s.stats = RunningStats::make(channels);
  return s;
}

LogitRectifierState LogitRectifierState::make(std::size_t classes) {
  return LogitRectifierState{RunningStats::make(classes)};
}

Tensor bn_affine(const Tensor& x_hat, const Tensor& gamma, const Tensor& beta) {
  return add(mul(x_hat, gamma), beta);
}

Tensor bn_forward(const Tensor& x, BnState& state, Mode mode) {
  check_input("bn_forward", x, state.num_channels(), mode);
  return bn_affine(standardize(x, state.stats, mode), state.gamma, state.beta);
}

Tensor nbn_effective_gamma(const NbnState& state) {
  return effective(state.gamma_dir, state.weight_magnitude->value,
                   state.normalize_direction, "weight");
}

Tensor nbn_effective_beta(const NbnState& state) {
  return effective(state.beta_dir, state.bias_magnitude->value,
                   state.normalize_direction, "bias");
}

Tensor nbn_affine(const Tensor& x_hat, const NbnState& state) {
  return add(mul(x_hat, nbn_effective_gamma(state)), nbn_effective_beta(state));
}

Tensor nbn_forward(const Tensor& x, NbnState& state, Mode mode) {
  check_input("nbn_forward", x, state.num_channels(), mode);
  if (state.normalize_direction) {
    require_nonzero(state.gamma_dir, "weight");
    require_nonzero(state.beta_dir, "bias");
  }
  return nbn_affine(standardize(x, state.stats, mode), state);
}

EffectiveParams nbn_effective_params(const NbnState& state) {
  NoGradScope no_grad;
  return {nbn_effective_gamma(state).to_vector(), nbn_effective_beta(state).to_vector()};
}

Tensor logit_rectify(const Tensor& z, LogitRectifierState& state, Mode mode) {
  check_input("logit_rectify", z, state.stats.size(), mode);
  return standardize(z, state.stats, mode);
}

Tensor variance_penalty(const Tensor& gamma, const Tensor& beta, double strength) {
  if (strength < 0.0)
    throw std::invalid_argument("variance_penalty: strength must be non-negative");
  if (strength == 0.0) return Tensor::scalar(0.0);
  const Tensor vg = reduce_var(gamma, all_axes(gamma), VarianceDivisor::sample);
  const Tensor vb = reduce_var(beta, all_axes(beta), VarianceDivisor::sample);
  return scale(add(vg, vb), strength);
}

Tensor wn_linear_forward(const Tensor& x, const Tensor& weight_dir,
                         const Tensor& magnitudes, const Tensor& bias) {
  return linear(x, scale_rows_to_norm(weight_dir, magnitudes), bias);
}

Pattern pattern_classifier(double alpha) {
  if (alpha > 0.0) return Pattern::A;
  if (alpha < 0.0) return Pattern::B;
  return Pattern::neutral;
}

char pattern_tag(Pattern p) {
  switch (p) {
    case Pattern::A: return 'A';
    case Pattern::B: return 'B';
    case Pattern::neutral: return 'N';
  }
  return 'N';
}

DecompositionResult grad_decomposition_check(const NbnState& state, const Tensor& x,
                                             const OutputLossFn& loss_fn) {
  if (!state.normalize_direction)
    throw std::invalid_argument(
        "grad_decomposition_check: identity holds only for normalized directions");
  const Tensor x_hat = [&] {
    NoGradScope no_grad;
    return standardize_batch(x.detach(), state.stats.epsilon).output;
  }();

  // Route 1: through the direction and magnitude leaves.
  Tensor dir = state.gamma_dir.detach();
  dir.set_requires_grad(true);
  Tensor bias_dir = state.beta_dir.detach();
  bias_dir.set_requires_grad(true);
  Tensor g_w = Tensor::scalar(state.weight_magnitude->value.item(), true);
  Tensor g_b = Tensor::scalar(state.bias_magnitude->value.item(), true);
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = add(mul(x_hat, effective(dir, g_w, true, "weight")),
                         effective(bias_dir, g_b, true, "bias"));
    tape.backward(loss_fn(y));
  }

  // Route 2: plain BN affine over the effective parameters.
  const EffectiveParams eff = nbn_effective_params(state);
  Tensor gamma = Tensor::vector(eff.gamma, true);
  const Tensor beta = Tensor::vector(eff.beta);
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss_fn(bn_affine(x_hat, gamma, beta)));
  }

  DecompositionResult r;
  r.grad_direction = dir.grad_vector();
  r.grad_effective = gamma.grad_vector();
  r.alpha = -g_w.grad()[0];
  const double norm = norm_of(dir);
  const double g = g_w.item();
  for (std::size_t k = 0; k < r.grad_direction.size(); ++k) {
    const double rhs = g / norm * (r.grad_effective[k] + r.alpha * dir[k] / norm);
    r.residual = std::max(r.residual, std::abs(r.grad_direction[k] - rhs));
  }
  return r;
}

}  // namespace nbnlab
