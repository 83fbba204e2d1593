#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nbnlab/finite_diff.hpp"
#include "nbnlab/ops.hpp"
#include "nbnlab/tensor.hpp"

using namespace nbnlab;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = n(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST(Tensor, FactoriesAndAccessors) {
  Tensor z = Tensor::zeros({2, 3});
  EXPECT_EQ(z.numel(), 6u);
  EXPECT_EQ(z.ndim(), 2u);
  EXPECT_FALSE(z.requires_grad());
  Tensor f = Tensor::full({2}, 1.5);
  EXPECT_DOUBLE_EQ(f[1], 1.5);
  Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_DOUBLE_EQ(m.at(1, 0), 3.0);
  EXPECT_DOUBLE_EQ(Tensor::scalar(7).item(), 7.0);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor, CopiesAliasClonesDoNot) {
  Tensor a = Tensor::vector({1, 2});
  Tensor alias = a;
  Tensor copy = a.clone();
  a.mutable_data()[0] = 9;
  EXPECT_DOUBLE_EQ(alias[0], 9.0);
  EXPECT_DOUBLE_EQ(copy[0], 1.0);
  EXPECT_TRUE(alias.same_as(a));
  EXPECT_FALSE(copy.same_as(a));
}

TEST(Ops, ElementwiseAndBroadcast) {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor row = Tensor::vector({10, 20});
  Tensor s = add(x, row);
  EXPECT_EQ(s.to_vector(), (std::vector<double>{11, 22, 13, 24}));
  EXPECT_EQ(mul(x, Tensor::scalar(2)).to_vector(), (std::vector<double>{2, 4, 6, 8}));
  EXPECT_EQ(relu(Tensor::vector({-1, 0, 2})).to_vector(), (std::vector<double>{0, 0, 2}));
  EXPECT_THROW(add(x, Tensor::vector({1, 2, 3})), ShapeError);
}

TEST(Ops, MatmulAndLinear) {
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
  EXPECT_EQ(matmul(a, b).to_vector(), (std::vector<double>{58, 64, 139, 154}));
  Tensor w = Tensor::from({1, 3}, {1, 0, -1});
  Tensor y = linear(a, w, Tensor::vector({0.5}));
  EXPECT_EQ(y.to_vector(), (std::vector<double>{-1.5, -1.5}));
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Ops, Reductions) {
  Tensor x = Tensor::from({2, 2}, {1, 2, 3, 6});
  EXPECT_EQ(reduce_mean(x, {0}).to_vector(), (std::vector<double>{2, 4}));
  EXPECT_EQ(reduce_var(x, {0}, VarianceDivisor::population).to_vector(),
            (std::vector<double>{1, 4}));
  EXPECT_EQ(reduce_var(x, {0}, VarianceDivisor::sample).to_vector(),
            (std::vector<double>{2, 8}));
  EXPECT_DOUBLE_EQ(sum(x).item(), 12.0);
  EXPECT_THROW(reduce_mean(x, {2}), std::invalid_argument);
  EXPECT_DOUBLE_EQ(l2_norm(Tensor::vector({3, 4})).item(), 5.0);
}

TEST(Autodiff, SquareSum) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = Tensor::vector({1, -2, 3}, true);
  Tensor loss = sum(square(x));
  tape.backward(loss);
  EXPECT_EQ(x.grad_vector(), (std::vector<double>{2, -4, 6}));
}

TEST(Autodiff, NormGradientIsUnitVector) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = Tensor::vector({3, 4}, true);
  tape.backward(l2_norm(x));
  EXPECT_NEAR(x.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(x.grad()[1], 0.8, 1e-15);
}

TEST(Autodiff, DuplicatedInputAccumulates) {
  Tape tape;
  TapeScope scope(tape);
  Tensor x = Tensor::vector({2, 5}, true);
  tape.backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad_vector(), (std::vector<double>{4, 10}));
}

TEST(Autodiff, NoTapeMeansNoGraph) {
  Tensor x = Tensor::vector({1, 2}, true);
  Tensor y = sum(x);
  EXPECT_FALSE(y.requires_grad());
  Tape tape;
  TapeScope scope(tape);
  {
    NoGradScope off;
    sum(x);
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Autodiff, Deterministic) {
  auto run = [] {
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({8, 4}, rng);
    Tensor w = random_tensor({3, 4}, rng);
    Tape tape;
    TapeScope scope(tape);
    tape.backward(sum(square(relu(linear(x, w)))));
    return w.grad_vector();
  };
  EXPECT_EQ(run(), run());
}

TEST(Autodiff, FiniteDifferenceExamples) {
  Tensor x = Tensor::vector({0.5, -1.5});
  Tensor fd = finite_diff_grad([](const Tensor& t) { return sum(square(t)).item(); }, x, 1e-5);
  EXPECT_NEAR(fd[0], 1.0, 1e-8);
  EXPECT_NEAR(fd[1], -3.0, 1e-8);
  Tensor v = Tensor::vector({3, 4});
  Tensor g = finite_diff_grad([](const Tensor& t) { return l2_norm(t).item(); }, v, 1e-5);
  EXPECT_NEAR(g[0], 0.6, 1e-9);
  EXPECT_NEAR(g[1], 0.8, 1e-9);
}

TEST(Autodiff, RandomMlpMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor x = random_tensor({6, 5}, rng, false);
    Tensor w1 = random_tensor({7, 5}, rng);
    Tensor b1 = random_tensor({7}, rng);
    Tensor w2 = random_tensor({3, 7}, rng);
    std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2};
    auto loss_with = [&](const Tensor& w) {
      return softmax_cross_entropy(linear(relu(linear(x, w, b1)), w2), labels);
    };
    Tape tape;
    {
      TapeScope scope(tape);
      tape.backward(loss_with(w1));
    }
    Tensor fd = finite_diff_grad([&](const Tensor& w) { return loss_with(w).item(); }, w1, 1e-5);
    EXPECT_LT(max_relative_error(w1.grad(), fd.data()), 1e-6);
  }
}

TEST(Autodiff, RelativeErrorDefinition) {
  std::vector<double> a{1e-12, 200.0}, b{0.0, 202.0};
  EXPECT_NEAR(max_relative_error(a, b), 2.0 / 202.0, 1e-15);
}
