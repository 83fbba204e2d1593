#pragma once

// Batch normalization and its normalized-parameter variant, plus the logit
// rectifier, the parameter-variance penalty and weight-normalized linear
// layers.
//
// In the normalized variant the affine parameters are stored as direction
// vectors with a scalar magnitude:
//
//   y = g_w * (w / ||w||) o x_hat + g_b * (b / ||b||)
//
// where x_hat is the standardized input. g_w and g_b usually resolve to the
// same SharedMagnitude; the magnitude object may also be shared by several
// layers, in which case its gradient is the sum over every layer using it.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nbnlab/tensor.hpp"

namespace nbnlab {

enum class Mode { train, eval };

inline constexpr double kDefaultMomentum = 0.1;
inline constexpr double kDefaultEpsilon = 1e-5;

// Exponential moving averages of per-channel batch statistics:
// new = (1 - momentum) * old + momentum * batch.
struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;
  double momentum = kDefaultMomentum;
  double epsilon = kDefaultEpsilon;

  static RunningStats make(std::size_t channels);
  void update(std::span<const double> batch_mean, std::span<const double> batch_var);
  std::size_t size() const { return mean.size(); }
};

struct BnState {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  RunningStats stats;

  // gamma = 1, beta = 0.
  static BnState make(std::size_t channels);
  std::size_t num_channels() const { return gamma.numel(); }
};

enum class ShareScope { per_layer, per_block, global };

std::string to_string(ShareScope scope);
ShareScope share_scope_from_string(const std::string& text);

struct SharedMagnitude {
  Tensor value;  // [1]
  ShareScope scope = ShareScope::global;
  bool trainable = true;

  static std::shared_ptr<SharedMagnitude> make(double value, ShareScope scope);
};

struct NbnState {
  Tensor gamma_dir;  // [C]
  Tensor beta_dir;   // [C]
  std::shared_ptr<SharedMagnitude> weight_magnitude;
  std::shared_ptr<SharedMagnitude> bias_magnitude;
  // false drops the division by the direction norm (decoupled magnitude
  // without normalization).
  bool normalize_direction = true;
  RunningStats stats;

  // gamma_dir = 1, beta_dir = 1e-3, both paths referencing `magnitude`.
  // Pass g = sqrt(C) for an initial effective weight of all ones.
  static NbnState make(std::size_t channels, std::shared_ptr<SharedMagnitude> magnitude);
  std::size_t num_channels() const { return gamma_dir.numel(); }
};

struct LogitRectifierState {
  RunningStats stats;  // one (mean, var) pair per class logit

  static LogitRectifierState make(std::size_t classes);
};

// x[B x C]. Train mode needs B >= 2 and updates the running statistics.
Tensor bn_forward(const Tensor& x, BnState& state, Mode mode);
Tensor nbn_forward(const Tensor& x, NbnState& state, Mode mode);

// Applies the affine parts to an already standardized input.
Tensor bn_affine(const Tensor& x_hat, const Tensor& gamma, const Tensor& beta);
Tensor nbn_affine(const Tensor& x_hat, const NbnState& state);

struct EffectiveParams {
  std::vector<double> gamma;
  std::vector<double> beta;
};

// gamma_eff = g_w * w / ||w||, beta_eff = g_b * b / ||b||.
EffectiveParams nbn_effective_params(const NbnState& state);

// Differentiable effective weight / bias vectors of an NBN layer.
Tensor nbn_effective_gamma(const NbnState& state);
Tensor nbn_effective_beta(const NbnState& state);

// Per-class standardization of logits z[B x K] with batch statistics (train)
// or running statistics (eval). No learnable affine.
Tensor logit_rectify(const Tensor& z, LogitRectifierState& state, Mode mode);

// strength * (Var(gamma) + Var(beta)), sample variances across channels.
Tensor variance_penalty(const Tensor& gamma, const Tensor& beta, double strength);

// x * W_eff^T + bias with W_eff[i] = g_i * direction[i] / ||direction[i]||.
Tensor wn_linear_forward(const Tensor& x, const Tensor& weight_dir,
                         const Tensor& magnitudes, const Tensor& bias = {});

enum class Pattern { A, B, neutral };

// alpha = -dL/dg. Positive: the magnitude grows and the direction update
// shrinks the largest channels (A). Negative: the opposite (B).
Pattern pattern_classifier(double alpha);
char pattern_tag(Pattern p);

using OutputLossFn = std::function<Tensor(const Tensor& y)>;

struct DecompositionResult {
  double residual = 0.0;  // max_k |lhs_k - rhs_k|
  double alpha = 0.0;     // -dL/dg_w
  std::vector<double> grad_direction;  // dL/dw through the NBN parameterization
  std::vector<double> grad_effective;  // dL/dgamma through plain BN
};

// Checks dL/dw_k = (g_w / ||w||) (dL/dgamma_k + alpha w_k / ||w||) on one
// batch. Two independent autodiff graphs are built: one through the direction
// and magnitude leaves, one through a plain BN affine whose gamma leaf holds
// the effective weights. The weight-path magnitude gets its own leaf so alpha
// is the weight-path gradient even when the state shares g with the bias.
DecompositionResult grad_decomposition_check(const NbnState& state, const Tensor& x,
                                             const OutputLossFn& loss_fn);

}  // namespace nbnlab
