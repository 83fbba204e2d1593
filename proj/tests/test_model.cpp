#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "nbnlab/model.hpp"
#include "nbnlab/ops.hpp"

using namespace nbnlab;

namespace {

ModelConfig config_with(NormPolicy policy) {
  ModelConfig c;
  c.norm_policy = policy;
  return c;
}

Tensor random_input(std::size_t b, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> v(b * d);
  for (auto& x : v) x = n(rng);
  return Tensor::from({b, d}, std::move(v));
}

std::size_t count_in(const std::set<std::string>& a, const std::set<std::string>& b) {
  return static_cast<std::size_t>(
      std::count_if(a.begin(), a.end(), [&](const std::string& s) { return b.count(s) > 0; }));
}

}  // namespace

TEST(Slots, DefaultArchitecture) {
  auto slots = enumerate_slots(ModelConfig{});
  // stem + s0 (2, no width change) + s1 (2 + ds) + s2 (2 + ds + 2 + 2)
  EXPECT_EQ(slots.size(), 13u);
  EXPECT_EQ(slots.front().name, "stem.norm");
}

TEST(Slots, InsertionPolicies) {
  ModelConfig c;
  auto ours = insertion_positions(NormPolicy::ours, c);
  auto a = insertion_positions(NormPolicy::type_a, c);
  auto b = insertion_positions(NormPolicy::type_b, c);
  auto all = insertion_positions(NormPolicy::type_c, c);
  EXPECT_EQ(ours.size(), 4u);
  EXPECT_TRUE(ours.count("s2.b0.ds.norm"));
  EXPECT_TRUE(ours.count("s2.b2.norm2"));
  EXPECT_EQ(a.size(), 7u);
  EXPECT_EQ(b.size(), 3u);
  EXPECT_EQ(count_in(ours, a), ours.size());
  EXPECT_EQ(count_in(b, ours), 0u);
  EXPECT_EQ(count_in(a, all), a.size());
  EXPECT_EQ(all.size(), enumerate_slots(c).size());
  EXPECT_TRUE(insertion_positions(NormPolicy::none, c).empty());
  EXPECT_TRUE(insertion_positions(NormPolicy::baseline_bn, c).empty());
}

TEST(Slots, LastStageMustHaveThreeBlocks) {
  ModelConfig c;
  c.blocks = {1, 1, 2};
  EXPECT_THROW(insertion_positions(NormPolicy::ours, c), std::invalid_argument);
}

TEST(Policy, UnknownNameThrows) {
  EXPECT_EQ(norm_policy_from_string("ours"), NormPolicy::ours);
  EXPECT_THROW(norm_policy_from_string("typeZ"), std::invalid_argument);
}

TEST(Model, BaselineHasNoNbn) {
  Model m(config_with(NormPolicy::baseline_bn), 1);
  EXPECT_EQ(m.num_nbn_layers(), 0u);
  EXPECT_TRUE(m.magnitudes().empty());
  for (const NormLayer* n : m.norm_layers()) EXPECT_TRUE(n->is_bn());
}

TEST(Model, GlobalScopeSharesOneMagnitude) {
  Model m(config_with(NormPolicy::ours), 1);
  EXPECT_EQ(m.num_nbn_layers(), 4u);
  ASSERT_EQ(m.magnitudes().size(), 1u);
  const SharedMagnitude* g = m.magnitudes()[0].get();
  for (const NormLayer* n : m.norm_layers()) {
    if (!n->is_nbn()) continue;
    EXPECT_EQ(n->nbn().weight_magnitude.get(), g);
    EXPECT_EQ(n->nbn().bias_magnitude.get(), g);
  }
}

TEST(Model, PerLayerScope) {
  ModelConfig c = config_with(NormPolicy::ours);
  c.magnitude_scope = ShareScope::per_layer;
  Model m(c, 1);
  EXPECT_EQ(m.magnitudes().size(), 4u);
}

TEST(Model, OursAddsExactlyOneScalar) {
  Model base(config_with(NormPolicy::baseline_bn), 3);
  Model ours(config_with(NormPolicy::ours), 3);
  EXPECT_EQ(ours.num_learnable_scalars(), base.num_learnable_scalars() + 1);
}

TEST(Model, SameSeedSameBackboneAcrossPolicies) {
  Model base(config_with(NormPolicy::baseline_bn), 5);
  Model ours(config_with(NormPolicy::ours), 5);
  EXPECT_EQ(base.classifier().weight.to_vector(), ours.classifier().weight.to_vector());
}

TEST(Model, ZeroClassifierGivesZeroLogits) {
  Model m(config_with(NormPolicy::ours), 2);
  for (double& w : m.classifier().weight.mutable_data()) w = 0.0;
  for (double& b : m.classifier().bias.mutable_data()) b = 0.0;
  Tensor logits = m.forward(random_input(4, 32, 1), Mode::eval);
  for (double v : logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Model, EvalDeterministicAndBatchOfOne) {
  Model m(config_with(NormPolicy::ours), 2);
  Tensor x = random_input(1, 32, 4);
  EXPECT_EQ(m.forward(x, Mode::eval).to_vector(), m.forward(x, Mode::eval).to_vector());
  EXPECT_THROW(m.forward(x, Mode::train), std::invalid_argument);
}

TEST(Model, WrongInputWidthThrows) {
  Model m(config_with(NormPolicy::baseline_bn), 2);
  EXPECT_THROW(m.forward(random_input(4, 31, 1), Mode::eval), ShapeError);
}

TEST(Model, EveryParameterReceivesGradient) {
  for (NormPolicy p : {NormPolicy::ours, NormPolicy::type_c, NormPolicy::wn,
                       NormPolicy::baseline_bn, NormPolicy::none}) {
    ModelConfig c = config_with(p);
    c.use_logit_rectifier = p == NormPolicy::ours;
    Model m(c, 7);
    std::vector<std::size_t> labels(32);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 10;
    Tape tape;
    {
      TapeScope scope(tape);
      tape.backward(softmax_cross_entropy(m.forward(random_input(32, 32, 9), Mode::train), labels));
    }
    for (const Parameter& param : m.parameters()) {
      ASSERT_TRUE(param.tensor.has_grad()) << to_string(p) << " " << param.name;
      double mag = 0.0;
      for (double v : param.tensor.grad()) mag = std::max(mag, std::abs(v));
      EXPECT_GT(mag, 0.0) << to_string(p) << " " << param.name;
    }
  }
}

TEST(Model, VariancePenaltyZeroStrengthIsZero) {
  Model m(config_with(NormPolicy::baseline_bn), 1);
  EXPECT_EQ(m.variance_penalty(0.0).item(), 0.0);
  // Freshly initialized BN parameters are constant vectors.
  EXPECT_EQ(m.variance_penalty(1.0).item(), 0.0);
}

TEST(Model, FinalNormIsLastStageNorm2) {
  Model m(config_with(NormPolicy::ours), 1);
  EXPECT_EQ(m.final_norm().name(), "s2.b2.norm2");
  EXPECT_TRUE(m.final_norm().is_nbn());
}

TEST(Model, ConfigValidation) {
  ModelConfig c;
  c.num_classes = 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.widths = {32, 64};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.var_reg_strength = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
