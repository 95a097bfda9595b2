/*
 * SPDX-License-Identifier: Apache-2.0
 */

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "distildoc/probability.hpp"
#include "distildoc/random.hpp"
#include "distildoc/tensor.hpp"

namespace distildoc {
namespace {

std::vector<double> random_values(Rng& rng, std::size_t n, double lo = -2.0, double hi = 2.0) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad = true) {
  const auto n = shape_size(shape);
  return Tensor(std::move(shape), random_values(rng, n), requires_grad);
}

// ---------------------------------------------------------------------------
// temp_softmax

TEST(TempSoftmax, ConstantLogitsAreUniform) {
  const std::vector<double> logits{4.2, 4.2, 4.2};
  for (double p : temp_softmax(logits, 1.0)) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
}

TEST(TempSoftmax, LogThreeClosedForm) {
  const std::vector<double> logits{0.0, std::log(3.0)};
  const auto p = temp_softmax(logits, 1.0);
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
}

TEST(TempSoftmax, MatchesHighPrecisionGolden) {
  // 40-digit evaluation of exp(x/2) / sum exp(x/2) for x = [2, 1, 0.1].
  const std::vector<double> golden{0.50168775709043703004, 0.30428900627781415835,
                                   0.19402323663174881161};
  const std::vector<double> logits{2.0, 1.0, 0.1};
  const auto p = temp_softmax(logits, 2.0);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(p[k], golden[k], 1e-15);
}

TEST(TempSoftmax, RejectsBadInput) {
  const std::vector<double> logits{1.0, 2.0};
  EXPECT_THROW(temp_softmax(logits, 0.0), std::domain_error);
  EXPECT_THROW(temp_softmax(logits, -1.0), std::domain_error);
  EXPECT_THROW(temp_softmax(std::vector<double>{}, 1.0), std::domain_error);
}

TEST(TempSoftmax, LargeLogitsOverSmallTemperatureStayFinite) {
  const std::vector<double> logits{1000.0, 999.0, -1000.0};
  const auto p = temp_softmax(logits, 0.1);
  for (double v : p) EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
}

TEST(TempSoftmaxProperty, SumsToOneAndIsShiftInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const auto k = static_cast<std::size_t>(rng.integer(1, 32));
    const auto logits = random_values(rng, k, -20.0, 20.0);
    const double tau = std::exp(rng.uniform(std::log(0.1), std::log(100.0)));
    const double shift = rng.uniform(-50.0, 50.0);
    auto shifted = logits;
    for (auto& x : shifted) x += shift;

    const auto p = temp_softmax(logits, tau);
    const auto q = temp_softmax(shifted, tau);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
    for (std::size_t i = 0; i < k; ++i) EXPECT_NEAR(p[i], q[i], 1e-12);
  }
}

TEST(TempSoftmaxProperty, EntropyNonDecreasingInTemperature) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const auto k = static_cast<std::size_t>(rng.integer(2, 16));
    auto logits = random_values(rng, k, -5.0, 5.0);
    logits[0] += 1.0;  // never constant
    double previous = -1.0;
    for (double tau = 0.1; tau <= 100.0; tau *= 1.25) {
      const double h = entropy(temp_softmax(logits, tau));
      EXPECT_GE(h, previous - 1e-12) << "tau=" << tau;
      previous = h;
    }
  }
}

// ---------------------------------------------------------------------------
// cross_entropy / kl_divergence

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(std::vector<double>{1.0, 0.0, 0.0}, 0), 0.0, 1e-9);
  EXPECT_NEAR(cross_entropy(std::vector<double>{0.25, 0.75}, 1), 0.28768207245178092744, 1e-15);
  const std::vector<double> uniform(4, 0.25);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_NEAR(cross_entropy(uniform, t), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, ClampsZeroProbability) {
  EXPECT_NEAR(cross_entropy(std::vector<double>{1.0, 0.0}, 1), -std::log(1e-12), 1e-9);
}

TEST(CrossEntropy, RejectsOutOfRangeTarget) {
  EXPECT_THROW(cross_entropy(std::vector<double>{0.5, 0.5}, 2), std::domain_error);
}

TEST(KlDivergence, Examples) {
  const std::vector<double> p{0.2, 0.3, 0.5};
  EXPECT_NEAR(kl_divergence(p, p), 0.0, 1e-12);
  EXPECT_NEAR(kl_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{0.5, 0.5}),
              0.69314718055994530942, 1e-15);
  EXPECT_NEAR(kl_divergence(std::vector<double>{0.75, 0.25}, std::vector<double>{0.25, 0.75}),
              0.5493061443340548457, 1e-15);
}

TEST(KlDivergence, RejectsLengthMismatch) {
  EXPECT_THROW(kl_divergence(std::vector<double>{1.0}, std::vector<double>{0.5, 0.5}),
               std::domain_error);
}

TEST(KlDivergenceProperty, GibbsInequality) {
  Rng rng(13);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto k = static_cast<std::size_t>(rng.integer(1, 12));
    const auto p = temp_softmax(random_values(rng, k, -4.0, 4.0), 1.0);
    const auto q = temp_softmax(random_values(rng, k, -4.0, 4.0), 1.0);
    const double d = kl_divergence(p, q);
    EXPECT_GE(d, 0.0);
    double gap = 0.0;
    for (std::size_t i = 0; i < k; ++i) gap = std::max(gap, std::abs(p[i] - q[i]));
    if (gap > 1e-3) {
      EXPECT_GT(d, 0.0);
    }
    EXPECT_NEAR(kl_divergence(p, p), 0.0, 1e-12);
  }
}

// ---------------------------------------------------------------------------
// Tensor / GradTape

TEST(Tensor, ValidatesShape) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), std::domain_error);
  EXPECT_THROW(Tensor(Shape{0}, std::vector<double>{}), std::domain_error);
  EXPECT_NO_THROW(Tensor(Shape{2, 3}, std::vector<double>(6)));
  EXPECT_TRUE(Tensor::scalar(3.0).is_scalar());
}

TEST(Backward, SumGivesOnes) {
  Rng rng(1);
  auto x = random_tensor(rng, {3, 4, 2});
  GradTape tape;
  tape.backward(sum(tape, x));
  ASSERT_TRUE(x.has_grad());
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesInput) {
  Rng rng(2);
  auto x = random_tensor(rng, {5, 3});
  GradTape tape;
  tape.backward(scale(tape, sum(tape, square(tape, x)), 0.5));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x.values()[i]);
}

TEST(Backward, RejectsNonScalarLoss) {
  Rng rng(3);
  auto x = random_tensor(rng, {2, 2});
  GradTape tape;
  auto y = scale(tape, x, 2.0);
  EXPECT_THROW(tape.backward(y), std::domain_error);
}

TEST(Backward, IdempotentWhenZeroedBetweenPasses) {
  Rng rng(4);
  auto x = random_tensor(rng, {2, 3});
  auto w = random_tensor(rng, {3, 2});
  GradTape tape;
  auto loss = sum(tape, tanh(tape, matmul(tape, x, w)));
  tape.backward(loss);
  const std::vector<double> first(w.grad().begin(), w.grad().end());
  w.zero_grad();
  x.zero_grad();
  tape.backward(loss);
  for (std::size_t i = 0; i < first.size(); ++i) EXPECT_EQ(w.grad()[i], first[i]);
}

TEST(Backward, LeafGradientsAccumulate) {
  auto x = Tensor(Shape{2}, {1.0, 2.0}, true);
  GradTape tape;
  auto loss = sum(tape, x);
  tape.backward(loss);
  tape.backward(loss);
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Rng rng(5);
  auto x = random_tensor(rng, {2, 3});
  auto c = random_tensor(rng, {2, 3}, false);
  GradTape tape;
  tape.backward(sum(tape, mul(tape, x, c)));
  EXPECT_TRUE(x.has_grad());
  EXPECT_FALSE(c.has_grad());
}

TEST(Backward, OpsOnConstantsAreNotRecorded) {
  Rng rng(6);
  auto c = random_tensor(rng, {2, 3}, false);
  GradTape tape;
  auto y = sum(tape, tanh(tape, c));
  EXPECT_EQ(tape.size(), 0U);
  EXPECT_FALSE(y.requires_grad());
}

// ---------------------------------------------------------------------------
// finite_difference_grad

TEST(FiniteDifference, IdentityOnScalar) {
  const auto g = finite_difference_grad([](const Tensor& t) { return t.item(); },
                                        Tensor::scalar(0.7), 1e-5);
  EXPECT_NEAR(g.item(), 1.0, 1e-10);
}

TEST(FiniteDifference, ExactForQuadratics) {
  const auto g = finite_difference_grad(
      [](const Tensor& t) { return t.item() * t.item(); }, Tensor::scalar(3.0), 1e-5);
  EXPECT_NEAR(g.item(), 6.0, 1e-8);
}

TEST(FiniteDifference, SoftmaxCrossEntropyMatchesClosedForm) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto k = static_cast<std::size_t>(rng.integer(2, 10));
    const auto target = static_cast<std::size_t>(rng.below(k));
    const Tensor x(Shape{k}, random_values(rng, k));
    auto f = [target](const Tensor& t) { return cross_entropy(temp_softmax(t.values(), 1.0), target); };
    const auto numeric = finite_difference_grad(f, x, 1e-5);
    auto analytic = temp_softmax(x.values(), 1.0);
    analytic[target] -= 1.0;
    for (std::size_t i = 0; i < k; ++i) EXPECT_NEAR(numeric.values()[i], analytic[i], 1e-6);
  }
}

// ---------------------------------------------------------------------------
// Every primitive against finite differences on random inputs (dims <= 32).

using UnaryOp = std::function<Tensor(GradTape&, const Tensor&)>;

// Projects op(x) onto a fixed random direction so every output coordinate
// contributes to the scalar being differentiated.
double check_unary(const UnaryOp& op, const Tensor& x, std::uint64_t seed) {
  Tensor probe_out;
  {
    GradTape tape;
    probe_out = op(tape, x.detach());
  }
  Rng rng(seed);
  const Tensor direction(probe_out.shape(), random_values(rng, probe_out.size()));

  auto value = [&](const Tensor& in) {
    GradTape tape;
    return sum(tape, mul(tape, op(tape, in), direction)).item();
  };
  Tensor leaf(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);
  GradTape tape;
  tape.backward(sum(tape, mul(tape, op(tape, leaf), direction)));
  const auto numeric = finite_difference_grad(value, x, 1e-5);
  return max_relative_error(leaf.grad(), numeric.values(), 1e-6);
}

TEST(PrimitiveGradients, MatchFiniteDifferences) {
  Rng rng(99);
  for (int trial = 0; trial < 25; ++trial) {
    const auto b = static_cast<std::size_t>(rng.integer(1, 4));
    const auto k = static_cast<std::size_t>(rng.integer(2, 8));
    const auto n = static_cast<std::size_t>(rng.integer(1, 6));
    const double tau = rng.uniform(0.5, 4.0);
    std::vector<int> labels(b);
    for (auto& y : labels) y = rng.integer(0, static_cast<int>(k) - 1);

    const auto other = random_tensor(rng, {b, k}, false);
    const auto weight = random_tensor(rng, {k, n}, false);
    const auto bias = random_tensor(rng, {k}, false);
    const auto x = random_tensor(rng, {b, k}, false);
    const auto seed = rng.next_u64();

    const std::vector<std::pair<const char*, UnaryOp>> ops{
        {"add", [&](GradTape& t, const Tensor& a) { return add(t, a, other); }},
        {"sub", [&](GradTape& t, const Tensor& a) { return sub(t, other, a); }},
        {"mul", [&](GradTape& t, const Tensor& a) { return mul(t, a, other); }},
        {"square", [&](GradTape& t, const Tensor& a) { return square(t, a); }},
        {"scale", [&](GradTape& t, const Tensor& a) { return scale(t, a, -1.7); }},
        {"tanh", [&](GradTape& t, const Tensor& a) { return tanh(t, a); }},
        {"matmul", [&](GradTape& t, const Tensor& a) { return matmul(t, a, weight); }},
        {"add_bias", [&](GradTape& t, const Tensor& a) { return add_bias(t, a, bias); }},
        {"reshape", [&](GradTape& t, const Tensor& a) { return reshape(t, a, {a.size()}); }},
        {"log_softmax", [&](GradTape& t, const Tensor& a) { return log_softmax(t, a, tau); }},
        {"log_softmax_masked",
         [&](GradTape& t, const Tensor& a) { return log_softmax(t, a, tau, labels); }},
        {"softmax", [&](GradTape& t, const Tensor& a) { return softmax(t, a, tau); }},
        {"pick", [&](GradTape& t, const Tensor& a) { return pick(t, a, labels); }},
    };
    for (const auto& [name, op] : ops) EXPECT_LT(check_unary(op, x, seed), 1e-6) << name;
  }
}

TEST(PrimitiveGradients, MatmulRightOperand) {
  Rng rng(100);
  const auto a = random_tensor(rng, {3, 5}, false);
  const auto b = random_tensor(rng, {5, 4}, false);
  EXPECT_LT(check_unary([&](GradTape& t, const Tensor& w) { return matmul(t, a, w); }, b, 5), 1e-6);
}

TEST(PrimitiveGradients, TokenOpsAndConvolution) {
  Rng rng(101);
  for (int trial = 0; trial < 10; ++trial) {
    const auto b = static_cast<std::size_t>(rng.integer(1, 2));
    const auto side = static_cast<std::size_t>(rng.integer(1, 3));
    const auto d = static_cast<std::size_t>(rng.integer(1, 3));
    const auto cout = static_cast<std::size_t>(rng.integer(1, 3));
    const auto tokens = random_tensor(rng, {b, side * side + 1, d}, false);
    const auto weight = random_tensor(rng, {cout, d, 3, 3}, false);
    const auto bias = random_tensor(rng, {cout}, false);
    const auto seed = rng.next_u64();

    EXPECT_LT(check_unary([](GradTape& t, const Tensor& x) { return take_token(t, x, 0); }, tokens, seed),
              1e-6);
    EXPECT_LT(check_unary([](GradTape& t, const Tensor& x) { return tokens_to_grid(t, x, true); },
                          tokens, seed),
              1e-6);
    auto conv_of_tokens = [&](GradTape& t, const Tensor& x) {
      return conv2d_same(t, tokens_to_grid(t, x, true), weight, bias);
    };
    EXPECT_LT(check_unary(conv_of_tokens, tokens, seed), 1e-6);
    EXPECT_LT(check_unary([&](GradTape& t, const Tensor& x) { return spatial_mean(t, conv_of_tokens(t, x)); },
                          tokens, seed),
              1e-6);

    GradTape shape_tape;
    const auto grid = tokens_to_grid(shape_tape, tokens, true).detach();
    EXPECT_LT(check_unary([&](GradTape& t, const Tensor& w) { return conv2d_same(t, grid, w, bias); },
                          weight, seed),
              1e-6);
    EXPECT_LT(check_unary([&](GradTape& t, const Tensor& bb) { return conv2d_same(t, grid, weight, bb); },
                          bias, seed),
              1e-6);
  }
}

TEST(TokenOps, GridLayoutAndErrors) {
  // B=1, T=5 (pooled token + 2x2), D=2; token s carries values (10s, 10s+1).
  std::vector<double> v;
  for (int s = 0; s < 5; ++s) {
    v.push_back(10.0 * s);
    v.push_back(10.0 * s + 1);
  }
  GradTape tape;
  const auto grid = tokens_to_grid(tape, Tensor(Shape{1, 5, 2}, v), true);
  EXPECT_EQ(grid.shape(), (Shape{1, 2, 2, 2}));
  // channel 0 holds the first feature of tokens 1..4 in row-major order
  EXPECT_EQ(grid.values()[0], 10.0);
  EXPECT_EQ(grid.values()[3], 40.0);
  EXPECT_EQ(grid.values()[4], 11.0);
  EXPECT_THROW(tokens_to_grid(tape, Tensor::zeros({1, 5, 2}), false), std::domain_error);
}

TEST(Conv2dSame, KnownValues) {
  // 1 channel 3x3 input of ones, kernel of ones: interior sees 9, edges 6, corners 4.
  GradTape tape;
  const auto out = conv2d_same(tape, Tensor::full({1, 1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0),
                               Tensor::zeros({1}));
  const std::vector<double> expected{4, 6, 4, 6, 9, 6, 4, 6, 4};
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(out.values()[i], expected[i]);
}

}  // namespace
}  // namespace distildoc
