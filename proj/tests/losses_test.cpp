// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "dq/errors.hpp"
#include "dq/losses.hpp"
#include "dq/model.hpp"
#include "gradient_suite.hpp"

namespace dq {
namespace {

using test::grad_check;
using test::plan_of;
using test::random_tensor;

// Two-class KL(softmax([1,0]) || [0.5,0.5]) in closed form.
double two_class_kl_oracle() {
  const double p = std::exp(1.0) / (std::exp(1.0) + 1.0);
  return p * std::log(p / 0.5) + (1.0 - p) * std::log((1.0 - p) / 0.5);
}

TEST(LossesTest, PredLossClosedForm) {
  EXPECT_NEAR(two_class_kl_oracle(), 0.11094407167172737, 1e-16);
  const double v = pred_loss(Tensor::from({1, 2}, {1, 0}), Tensor::from({1, 2}, {0, 0}), 1.0).item();
  EXPECT_NEAR(v, 0.11094407167172737, 1e-15);
}

TEST(LossesTest, PredLossBasics) {
  Rng rng(1);
  const Tensor z = random_tensor({3, 6}, rng, -2, 2);
  EXPECT_NEAR(pred_loss(z, z, 1.0).item(), 0.0, 1e-15);
  // Large temperature flattens the teacher onto the uniform student.
  EXPECT_LT(pred_loss(z, Tensor::zeros({3, 6}), 1e6).item(), 1e-10);
  EXPECT_THROW(pred_loss(z, z, 0.0), ParameterError);
  EXPECT_THROW(pred_loss(z, random_tensor({2, 6}, rng), 1.0), DimensionError);
}

TEST(LossesTest, PredLossMeanOverPositions) {
  const Tensor t = Tensor::from({2, 2}, {1, 0, 1, 0});
  const Tensor s = Tensor::from({2, 2}, {0, 0, 0, 0});
  EXPECT_NEAR(pred_loss(t, s, 1.0).item(), two_class_kl_oracle(), 1e-15);
}

TEST(LossesTest, SymmetricTemperatureScalesBySquare) {
  Rng rng(2);
  const Tensor zt = random_tensor({2, 5}, rng, -3, 3), zs = random_tensor({2, 5}, rng, -3, 3);
  const double t = 2.0;
  // Oracle: t^2 · KL(softmax(zt/t) || softmax(zs/t)) computed directly.
  double oracle = 0.0;
  for (std::size_t r = 0; r < 2; ++r) {
    double nt = 0, ns = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      nt += std::exp(zt.at(r, c) / t);
      ns += std::exp(zs.at(r, c) / t);
    }
    for (std::size_t c = 0; c < 5; ++c) {
      const double p = std::exp(zt.at(r, c) / t) / nt, q = std::exp(zs.at(r, c) / t) / ns;
      oracle += p * std::log(p / q);
    }
  }
  oracle = oracle * t * t / 2.0;
  EXPECT_NEAR(pred_loss(zt, zs, t, true).item(), oracle, 1e-13);
}

TEST(LossPropertyTest, PredLossNonNegativeAndZeroOnlyOnMatch) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed + 40);
    const Tensor zt = random_tensor({2, 4}, rng, -4, 4), zs = random_tensor({2, 4}, rng, -4, 4);
    const double v = pred_loss(zt, zs, 1.0).item();
    EXPECT_GE(v, 0.0);
    if (v < 1e-12) {
      const Tensor pt = softmax(zt, 1), ps = softmax(zs, 1);
      for (std::size_t k = 0; k < pt.numel(); ++k) EXPECT_NEAR(pt.values()[k], ps.values()[k], 1e-9);
    }
    // A shift of every logit in a row leaves the distributions unchanged.
    EXPECT_NEAR(pred_loss(zt, add_scalar(zt, 3.0), 1.0).item(), 0.0, 1e-12);
  }
}

TEST(LossesTest, HiddenLossHandCase) {
  // Scalar "hiddens": H_S = [1], [2]; H_T = [0], [3], [5]; W_A = [2]; f = (2, 3).
  std::vector<Tensor> s{Tensor::from({1, 1}, {1}), Tensor::from({1, 1}, {2})};
  std::vector<Tensor> t{Tensor::from({1, 1}, {0}), Tensor::from({1, 1}, {3}), Tensor::from({1, 1}, {5})};
  const Tensor w_a = Tensor::from({1, 1}, {2});
  LossWeights w;
  w.lambda = {0.5, 2.0};
  // (0.5·(6-1)^2 + 2·(10-2)^2) / 2 = (12.5 + 128) / 2
  EXPECT_DOUBLE_EQ(hidden_loss(s, t, plan_of({2, 3}), w_a, w).item(), 70.25);
  w.lambda = {0.0, 0.0};
  EXPECT_DOUBLE_EQ(hidden_loss(s, t, plan_of({2, 3}), w_a, w).item(), 0.0);
  EXPECT_THROW(hidden_loss(s, t, plan_of({1}), w_a, w), ConfigError);
  EXPECT_THROW(hidden_loss(s, t, plan_of({1, 4}), w_a, w), ConfigError);
}

TEST(LossesTest, HiddenLossZeroAtMatchedProjection) {
  Rng rng(3);
  const Tensor w_a = random_tensor({6, 4}, rng);
  std::vector<Tensor> t{random_tensor({3, 6}, rng), random_tensor({3, 6}, rng), random_tensor({3, 6}, rng)};
  std::vector<Tensor> s{matmul(t[0], w_a), matmul(t[2], w_a)};
  EXPECT_NEAR(hidden_loss(s, t, plan_of({1, 3}), w_a, {}).item(), 0.0, 1e-15);
}

TEST(LossPropertyTest, HiddenLossPermutationInvariant) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 80);
    const Tensor w_a = random_tensor({5, 3}, rng);
    std::vector<Tensor> t;
    for (int j = 0; j < 4; ++j) t.push_back(random_tensor({2, 5}, rng));
    std::vector<Tensor> s{random_tensor({2, 3}, rng), random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)};
    LossWeights w;
    w.lambda = {0.3, 1.0, 2.2};
    const double base = hidden_loss(s, t, plan_of({1, 2, 4}), w_a, w).item();
    LossWeights wp;
    wp.lambda = {2.2, 0.3, 1.0};
    const double perm = hidden_loss({s[2], s[0], s[1]}, t, plan_of({4, 1, 2}), w_a, wp).item();
    EXPECT_NEAR(perm, base, 1e-13);
  }
}

TEST(LossesTest, CrossEntropyMasksPadding) {
  const Tensor logits = Tensor::from({3, 3}, {2, 0, 0, 0, 1, 0, 5, 5, 5});
  const int labels[] = {2, 1, vocab::kPad};
  // Oracle: mean of -log softmax at the two unmasked positions.
  const double l0 = -std::log(1.0 / (std::exp(2.0) + 2.0));
  const double l1 = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
  EXPECT_NEAR(cross_entropy(logits, labels).item(), (l0 + l1) / 2.0, 1e-15);
  const int short_labels[] = {2, 1};
  EXPECT_THROW(cross_entropy(logits, short_labels), AlignmentError);
}

TEST(LossesTest, TotalLossArithmetic) {
  LossTerms terms;
  terms.pred = Tensor::scalar(1.5);
  terms.hidn = Tensor::scalar(0.5);
  terms.quan = Tensor::scalar(3.0);
  terms.ce = Tensor::scalar(4.0);
  const TotalLoss tl = total_loss(terms, LossWeights{});
  EXPECT_DOUBLE_EQ(tl.breakdown.l_kd, 2.0);
  EXPECT_DOUBLE_EQ(tl.breakdown.l_model, 6.0);
  EXPECT_DOUBLE_EQ(tl.objective.item(), 6.0);
  EXPECT_TRUE(loss_identities_hold(tl.breakdown, LossWeights{}));

  LossWeights ce_only;
  ce_only.alpha = 0.0;
  ce_only.gamma = 0.0;
  EXPECT_EQ(total_loss(terms, ce_only).breakdown.l_model, 4.0);
  LossWeights kd_only;
  kd_only.alpha = 1.0;
  kd_only.gamma = 0.0;
  EXPECT_EQ(total_loss(terms, kd_only).breakdown.l_model, 2.0);

  LossTerms ce_term;
  ce_term.ce = Tensor::scalar(2.0);
  const TotalLoss partial = total_loss(ce_term, LossWeights{});
  EXPECT_EQ(partial.breakdown.l_pred, 0.0);
  EXPECT_DOUBLE_EQ(partial.breakdown.l_model, 1.0);

  LossBreakdown broken = tl.breakdown;
  broken.l_model += 1e-9;
  EXPECT_FALSE(loss_identities_hold(broken, LossWeights{}));
}

TEST(LossesTest, WeightValidation) {
  LossWeights w;
  w.alpha = 1.5;
  EXPECT_THROW(w.validate(), ParameterError);
  w = {};
  w.temperature = -1;
  EXPECT_THROW(w.validate(), ParameterError);
  w = {};
  w.lambda = {1.0, -0.1};
  EXPECT_THROW(w.validate(), ParameterError);
  EXPECT_NO_THROW(LossWeights{}.validate());
}

// ---------------------------------------------------------------------------
// Gradient checks of the three assembled objectives with respect to the
// parameters of a two-layer toy student.

class ObjectiveGradTest : public ::testing::TestWithParam<test::GradCase> {};

TEST_P(ObjectiveGradTest, MatchesCentralDifferences) { EXPECT_LT(GetParam().worst(), 1e-4); }

INSTANTIATE_TEST_SUITE_P(Objectives, ObjectiveGradTest, ::testing::ValuesIn(test::objective_cases()),
                         [](const auto& info) { return info.param.name; });

TEST(LossGradTest, QuantLossMatchesFrozenGridDerivative) {
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor w = random_tensor({4, 5}, rng);
    const Tensor grid = fake_quantize(w, 4);
    std::vector<Tensor> in{w};
    // Same tape gradient, compared with central differences of the frozen-grid loss.
    const double analytic_vs_frozen =
        grad_check([&](const auto& x) { return mean(abs(sub(x[0], grid))); }, in, 1e-7);
    EXPECT_LT(analytic_vs_frozen, 1e-4);
    Tape tape;
    Tensor l;
    w.set_requires_grad(true);
    w.zero_grad();
    {
      TapeScope scope(tape);
      l = quant_loss(w, 4);
    }
    backward(l, tape);
    for (std::size_t k = 0; k < w.numel(); ++k) {
      const double r = w.values()[k] - grid.values()[k];
      const double expect = (r > 0) - (r < 0);
      EXPECT_DOUBLE_EQ(w.grad()[k], expect / 20.0);
    }
  }
}

}  // namespace
}  // namespace dq
