#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nbnlab/finite_diff.hpp"
#include "nbnlab/normalization.hpp"
#include "nbnlab/ops.hpp"

using namespace nbnlab;

namespace {

Tensor random_batch(std::size_t b, std::size_t c, std::mt19937_64& rng, double shift = 0.0) {
  std::normal_distribution<double> n(shift, 2.0);
  std::vector<double> v(b * c);
  for (auto& x : v) x = n(rng);
  return Tensor::from({b, c}, std::move(v));
}

std::vector<double> column(const Tensor& x, std::size_t c) {
  std::vector<double> out;
  for (std::size_t r = 0; r < x.dim(0); ++r) out.push_back(x.at(r, c));
  return out;
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double pop_var(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

NbnState split_state(std::vector<double> gdir, std::vector<double> bdir, double gw, double gb) {
  NbnState st = NbnState::make(gdir.size(), SharedMagnitude::make(gw, ShareScope::per_layer));
  st.gamma_dir = Tensor::vector(std::move(gdir), true);
  st.beta_dir = Tensor::vector(std::move(bdir), true);
  st.bias_magnitude = SharedMagnitude::make(gb, ShareScope::per_layer);
  return st;
}

}  // namespace

TEST(BatchNorm, StandardizesBatch) {
  // Column with mean 5 and population variance 4.
  Tensor x = Tensor::from({4, 1}, {3, 3, 7, 7});
  BnState st = BnState::make(1);
  Tensor y = bn_forward(x, st, Mode::train);
  auto c = column(y, 0);
  EXPECT_NEAR(mean_of(c), 0.0, 1e-14);
  EXPECT_NEAR(pop_var(c), 4.0 / (4.0 + kDefaultEpsilon), 1e-12);
}

TEST(BatchNorm, AffineEvaluation) {
  Tensor y = bn_affine(Tensor::from({1, 1}, {1}), Tensor::vector({2}), Tensor::vector({3}));
  EXPECT_DOUBLE_EQ(y.item(), 5.0);
}

TEST(BatchNorm, EvalIgnoresBatchComposition) {
  std::mt19937_64 rng(1);
  BnState st = BnState::make(3);
  bn_forward(random_batch(16, 3, rng, 1.0), st, Mode::train);
  Tensor probe = random_batch(1, 3, rng);
  Tensor other = random_batch(5, 3, rng, 4.0);
  std::vector<double> stacked(probe.data().begin(), probe.data().end());
  stacked.insert(stacked.end(), other.data().begin(), other.data().end());
  Tensor alone = bn_forward(probe, st, Mode::eval);
  Tensor together = bn_forward(Tensor::from({6, 3}, stacked), st, Mode::eval);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(alone.at(0, c), together.at(0, c));
}

TEST(BatchNorm, Errors) {
  BnState st = BnState::make(2);
  EXPECT_THROW(bn_forward(Tensor::zeros({1, 2}), st, Mode::train), std::invalid_argument);
  EXPECT_THROW(bn_forward(Tensor::zeros({4, 3}), st, Mode::train), std::invalid_argument);
  EXPECT_NO_THROW(bn_forward(Tensor::zeros({1, 2}), st, Mode::eval));
}

TEST(RunningStats, ClosedFormEma) {
  std::mt19937_64 rng(3);
  BnState st = BnState::make(2);
  const double m = st.stats.momentum;
  for (int t = 1; t <= 5; ++t) {
    std::vector<Tensor> batches;
    BnState fresh = BnState::make(2);
    for (int i = 0; i < t; ++i) batches.push_back(random_batch(8, 2, rng));
    for (const auto& b : batches) bn_forward(b, fresh, Mode::train);
    for (std::size_t c = 0; c < 2; ++c) {
      double mean = 0.0, var = 1.0;
      for (const auto& b : batches) {
        auto col = column(b, c);
        mean = (1 - m) * mean + m * mean_of(col);
        var = (1 - m) * var + m * pop_var(col);
      }
      // Direct closed form for the mean: sum_t m (1-m)^(T-t) mu_t.
      double closed = 0.0;
      for (int i = 0; i < t; ++i)
        closed += m * std::pow(1 - m, t - 1 - i) * mean_of(column(batches[i], c));
      EXPECT_NEAR(fresh.stats.mean[c], closed, 1e-13);
      EXPECT_NEAR(fresh.stats.mean[c], mean, 1e-13);
      EXPECT_NEAR(fresh.stats.var[c], var, 1e-13);
    }
  }
}

TEST(Nbn, DirectEvaluation) {
  NbnState st = split_state({3, 4}, {0, 1}, 10, 10);
  Tensor y = nbn_affine(Tensor::from({1, 2}, {1, 1}), st);
  EXPECT_NEAR(y[0], 6.0, 1e-14);
  EXPECT_NEAR(y[1], 18.0, 1e-14);
}

TEST(Nbn, ZeroInputGivesBiasDirection) {
  NbnState st = split_state({1, 2, 3}, {1, 2, 2}, 4, 6);
  Tensor y = nbn_affine(Tensor::zeros({2, 3}), st);
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_NEAR(y.at(r, 0), 2.0, 1e-14);
    EXPECT_NEAR(y.at(r, 1), 4.0, 1e-14);
    EXPECT_NEAR(y.at(r, 2), 4.0, 1e-14);
  }
}

TEST(Nbn, DefaultInitialization) {
  NbnState st = NbnState::make(4, SharedMagnitude::make(2.0, ShareScope::global));
  EffectiveParams p = nbn_effective_params(st);
  for (double v : p.gamma) EXPECT_NEAR(v, 1.0, 1e-15);
  EXPECT_TRUE(st.weight_magnitude == st.bias_magnitude);
}

TEST(Nbn, MatchesBatchNormAtMatchedParameters) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t c = 2 + trial % 7;
    std::vector<double> gamma(c), beta(c);
    for (auto& v : gamma) v = n(rng);
    for (auto& v : beta) v = n(rng);
    BnState bn = BnState::make(c);
    bn.gamma = Tensor::vector(gamma);
    bn.beta = Tensor::vector(beta);
    NbnState nb = split_state(gamma, beta, l2_norm(bn.gamma).item(), l2_norm(bn.beta).item());
    Tensor x = random_batch(12, c, rng, 0.5);
    Tensor a = bn_forward(x, bn, Mode::train);
    Tensor b = nbn_forward(x, nb, Mode::train);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    Tensor ea = bn_forward(x, bn, Mode::eval);
    Tensor eb = nbn_forward(x, nb, Mode::eval);
    for (std::size_t i = 0; i < ea.numel(); ++i) EXPECT_NEAR(ea[i], eb[i], 1e-12);
  }
}

TEST(Nbn, EffectiveParamsExamples) {
  NbnState a = split_state({3, 4}, {1, 1}, 5, 1);
  EffectiveParams pa = nbn_effective_params(a);
  EXPECT_NEAR(pa.gamma[0], 3.0, 1e-15);
  EXPECT_NEAR(pa.gamma[1], 4.0, 1e-15);
  NbnState b = split_state({1, 1, 1, 1}, {1, 1, 1, 1}, 2, 2);
  for (double v : nbn_effective_params(b).gamma) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(Nbn, DirectionScaleInvariance) {
  std::mt19937_64 rng(4);
  Tensor x = random_batch(10, 3, rng);
  NbnState a = split_state({0.3, -1.2, 2.0}, {0.5, 0.1, -0.4}, 3, 2);
  NbnState b = split_state({0.3 * 7, -1.2 * 7, 2.0 * 7}, {0.5 * 0.01, 0.1 * 0.01, -0.4 * 0.01}, 3, 2);
  Tensor ya = nbn_forward(x, a, Mode::train);
  Tensor yb = nbn_forward(x, b, Mode::train);
  for (std::size_t i = 0; i < ya.numel(); ++i) EXPECT_NEAR(ya[i], yb[i], 1e-12);
}

TEST(Nbn, ZeroDirectionThrows) {
  NbnState st = split_state({0, 0}, {1, 1}, 1, 1);
  EXPECT_THROW(nbn_effective_params(st), std::domain_error);
  EXPECT_THROW(nbn_forward(Tensor::zeros({3, 2}), st, Mode::train), std::domain_error);
}

TEST(Nbn, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  Tensor x = random_batch(6, 4, rng);
  NbnState st = split_state({0.5, 1.0, -0.7, 0.2}, {0.3, -0.1, 0.4, 0.9}, 1.7, 1.7);
  st.bias_magnitude = st.weight_magnitude;
  st.weight_magnitude->value.set_requires_grad(true);
  Tensor target = random_batch(6, 4, rng);
  auto loss = [&](NbnState& s) { return sum(square(sub(nbn_forward(x, s, Mode::train), target))); };
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(loss(st));
  }
  auto fd_for = [&](Tensor leaf) {
    return finite_diff_grad(
        [&](const Tensor& v) {
          std::vector<double> saved = leaf.to_vector();
          std::copy(v.data().begin(), v.data().end(), leaf.mutable_data().begin());
          const double out = loss(st).item();
          std::copy(saved.begin(), saved.end(), leaf.mutable_data().begin());
          return out;
        },
        leaf.clone(), 1e-5);
  };
  EXPECT_LT(max_relative_error(st.gamma_dir.grad(), fd_for(st.gamma_dir).data()), 1e-6);
  EXPECT_LT(max_relative_error(st.beta_dir.grad(), fd_for(st.beta_dir).data()), 1e-6);
  EXPECT_LT(max_relative_error(st.weight_magnitude->value.grad(),
                               fd_for(st.weight_magnitude->value).data()),
            1e-6);
}

TEST(Decomposition, RandomQuadraticLoss) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> gd(8), bd(8);
  for (auto& v : gd) v = n(rng);
  for (auto& v : bd) v = n(rng);
  NbnState st = split_state(gd, bd, 2.5, 1.5);
  Tensor x = random_batch(16, 8, rng);
  Tensor target = random_batch(16, 8, rng);
  auto r = grad_decomposition_check(st, x, [&](const Tensor& y) {
    return sum(square(sub(y, target)));
  });
  EXPECT_LT(r.residual, 1e-9);
  EXPECT_NE(r.alpha, 0.0);
}

TEST(Decomposition, OutputIndependentLossIsZero) {
  std::mt19937_64 rng(2);
  NbnState st = split_state({1, 2, 3}, {1, 1, 1}, 1, 1);
  Tensor x = random_batch(4, 3, rng);
  auto r = grad_decomposition_check(st, x, [](const Tensor& y) { return scale(sum(y), 0.0); });
  EXPECT_EQ(r.residual, 0.0);
  for (double v : r.grad_direction) EXPECT_EQ(v, 0.0);
  for (double v : r.grad_effective) EXPECT_EQ(v, 0.0);
}

TEST(Decomposition, SymmetryPreserved) {
  // Equal columns and uniform direction: every channel sees the same gradient.
  Tensor x = Tensor::from({3, 3}, {1, 1, 1, 2, 2, 2, 4, 4, 4});
  NbnState st = split_state({1, 1, 1}, {1, 1, 1}, 2, 1);
  auto r = grad_decomposition_check(st, x, [](const Tensor& y) { return sum(square(y)); });
  for (std::size_t k = 1; k < 3; ++k) {
    EXPECT_NEAR(r.grad_effective[k], r.grad_effective[0], 1e-14);
    EXPECT_NEAR(r.grad_direction[k], r.grad_direction[0], 1e-14);
  }
}

TEST(Pattern, Classifier) {
  EXPECT_EQ(pattern_classifier(0.5), Pattern::A);
  EXPECT_EQ(pattern_classifier(-0.5), Pattern::B);
  EXPECT_EQ(pattern_classifier(0.0), Pattern::neutral);
  EXPECT_EQ(pattern_tag(Pattern::A), 'A');
  EXPECT_EQ(pattern_tag(Pattern::neutral), 'N');
}

TEST(VariancePenalty, Examples) {
  EXPECT_EQ(variance_penalty(Tensor::vector({2, 2}), Tensor::vector({5, 5}), 3.0).item(), 0.0);
  EXPECT_DOUBLE_EQ(
      variance_penalty(Tensor::vector({1, 2, 3}), Tensor::vector({4, 4, 4}), 1.0).item(), 1.0);
  EXPECT_EQ(variance_penalty(Tensor::vector({1, 9}), Tensor::vector({-3, 3}), 0.0).item(), 0.0);
  EXPECT_THROW(variance_penalty(Tensor::vector({1}), Tensor::vector({1}), -1.0),
               std::invalid_argument);
}

TEST(WeightNorm, EffectiveRow) {
  Tensor y = wn_linear_forward(Tensor::from({1, 2}, {1, 1}), Tensor::from({1, 2}, {3, 4}),
                               Tensor::vector({5}));
  EXPECT_NEAR(y.item(), 7.0, 1e-14);
  Tensor scaled = wn_linear_forward(Tensor::from({1, 2}, {1, 1}),
                                    Tensor::from({1, 2}, {30, 40}), Tensor::vector({5}));
  EXPECT_NEAR(scaled.item(), 7.0, 1e-14);
  EXPECT_THROW(wn_linear_forward(Tensor::from({1, 2}, {1, 1}), Tensor::zeros({1, 2}),
                                 Tensor::vector({1})),
               std::domain_error);
}

TEST(WeightNorm, MatchesEffectiveWeightLinear) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> w(5 * 4), g(5), b(5);
  for (auto& v : w) v = n(rng);
  for (auto& v : g) v = std::abs(n(rng)) + 0.1;
  for (auto& v : b) v = n(rng);
  Tensor x = random_batch(7, 4, rng);
  std::vector<double> eff(w.size());
  for (std::size_t r = 0; r < 5; ++r) {
    double norm = 0;
    for (std::size_t c = 0; c < 4; ++c) norm += w[r * 4 + c] * w[r * 4 + c];
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < 4; ++c) eff[r * 4 + c] = g[r] * w[r * 4 + c] / norm;
  }
  Tensor a = wn_linear_forward(x, Tensor::from({5, 4}, w), Tensor::vector(g), Tensor::vector(b));
  Tensor ref = linear(x, Tensor::from({5, 4}, eff), Tensor::vector(b));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], ref[i], 1e-12);
}

TEST(LogitRectifier, TwoValueColumn) {
  auto st = LogitRectifierState::make(1);
  Tensor y = logit_rectify(Tensor::from({2, 1}, {1, 3}), st, Mode::train);
  const double s = std::sqrt(1.0 + kDefaultEpsilon);
  EXPECT_NEAR(y[0], -1.0 / s, 1e-14);
  EXPECT_NEAR(y[1], 1.0 / s, 1e-14);
}

TEST(LogitRectifier, ConstantColumnIsGuarded) {
  auto st = LogitRectifierState::make(2);
  Tensor y = logit_rectify(Tensor::from({3, 2}, {4, 1, 4, 2, 4, 3}), st, Mode::train);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_TRUE(std::isfinite(y.at(r, 0)));
    EXPECT_EQ(y.at(r, 0), 0.0);
  }
}

TEST(LogitRectifier, TrainModeStandardizes) {
  std::mt19937_64 rng(13);
  auto st = LogitRectifierState::make(5);
  Tensor z = random_batch(32, 5, rng, 3.0);
  Tensor y = logit_rectify(z, st, Mode::train);
  for (std::size_t c = 0; c < 5; ++c) {
    auto col = column(y, c);
    const double v = pop_var(column(z, c));
    EXPECT_LT(std::abs(mean_of(col)), 1e-10);
    EXPECT_LT(std::abs(std::sqrt(pop_var(col)) - std::sqrt(v / (v + kDefaultEpsilon))), 1e-10);
  }
  EXPECT_THROW(logit_rectify(Tensor::zeros({1, 5}), st, Mode::train), std::invalid_argument);
}
