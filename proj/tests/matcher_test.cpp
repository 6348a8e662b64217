// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <limits>

#include "dq/errors.hpp"
#include "dq/matcher.hpp"
#include "matching_oracle.hpp"

namespace dq {
namespace {

using test::grad_check;
using test::random_cost;
using test::random_tensor;
using test::rdm_oracle;
using test::row_argmin_oracle;
using test::uniform_int;

TEST(MatcherTest, DmExamples) {
  EXPECT_EQ(match_dm(CostMatrix::from_rows({{1, 5, 9}, {7, 3, 2}})).f, (std::vector<int>{1, 3}));
  EXPECT_EQ(match_dm(CostMatrix::from_rows({{5, 1, 9}, {4, 9, 9}})).f, (std::vector<int>{2, 1}));
  EXPECT_EQ(match_dm(CostMatrix(3, 5, 2.0)).f, (std::vector<int>{1, 1, 1}));
}

TEST(MatcherTest, RdmExamples) {
  const MatchingPlan p = match_rdm(CostMatrix::from_rows({{5, 1, 9}, {4, 9, 9}}));
  EXPECT_EQ(p.f, (std::vector<int>{2, 3}));
  EXPECT_DOUBLE_EQ(p.total_cost(), 10.0);
  EXPECT_EQ(p.strategy, MatchStrategy::RDM);

  CostMatrix diag(3, 6, 1.0);
  for (std::size_t i = 0; i < 3; ++i) diag(i, i) = 0.0;
  EXPECT_EQ(match_rdm(diag).f, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(match_rdm(CostMatrix(4, 4, 3.0)).f, (std::vector<int>{1, 2, 3, 4}));
  EXPECT_THROW(match_rdm(CostMatrix(3, 2)), ConfigError);
}

TEST(MatcherTest, StaticMapping) {
  EXPECT_EQ(match_static(2, 4).f, (std::vector<int>{2, 4}));
  EXPECT_EQ(match_static(4, 4).f, (std::vector<int>{1, 2, 3, 4}));
  EXPECT_EQ(match_static(1, 1).f, (std::vector<int>{1}));
}

TEST(MatcherTest, MappingText) {
  const std::vector<int> f{1, 3, 4};
  EXPECT_EQ(format_mapping(f), "1,3,4");
  EXPECT_EQ(parse_mapping("1,3,4"), f);
  EXPECT_THROW(parse_mapping("1,x"), ConfigError);
  EXPECT_THROW(parse_mapping("0"), ConfigError);
}

TEST(MatcherOracleTest, ExhaustiveEquivalence) {
  const auto start = std::chrono::steady_clock::now();
  const test::SweepResult r = test::dm_rdm_sweep();
  EXPECT_EQ(r.mismatches, 0) << "over " << r.cases << " matrices";
  EXPECT_LT(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 10.0);
}

TEST(MatcherPropertyTest, RdmInvariants) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed + 555);
    const std::size_t m = static_cast<std::size_t>(uniform_int(rng, 1, 6));
    const std::size_t n = m + static_cast<std::size_t>(uniform_int(rng, 0, 6));
    const CostMatrix c = random_cost(m, n, rng, seed % 3 == 0);
    const MatchingPlan rdm = match_rdm(c);
    const MatchingPlan dm = match_dm(c);
    for (std::size_t i = 0; i < m; ++i) {
      EXPECT_GE(rdm.f[i], static_cast<int>(i + 1));
      EXPECT_LE(rdm.f[i], static_cast<int>(n));
      if (i > 0) {
        EXPECT_GT(rdm.f[i], rdm.f[i - 1]);
      }
    }
    EXPECT_GE(rdm.total_cost(), dm.total_cost());

    CostMatrix scaled = c;
    for (double& v : scaled.values) v *= 3.5;
    EXPECT_EQ(match_rdm(scaled).f, rdm.f);
    EXPECT_EQ(match_dm(scaled).f, dm.f);
    EXPECT_EQ(match_rdm(c), rdm);
  }
}

TEST(MatcherTest, HiddenCostMatrixAgainstPairwiseMse) {
  Rng rng(21);
  std::vector<Tensor> s{random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)};
  std::vector<Tensor> t{random_tensor({3, 5}, rng), random_tensor({3, 5}, rng), random_tensor({3, 5}, rng)};
  const Tensor w_a = random_tensor({5, 4}, rng);
  const CostMatrix c = hidden_cost_matrix(s, t, w_a);
  ASSERT_EQ(c.rows, 2u);
  ASSERT_EQ(c.cols, 3u);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t col = 0; col < 4; ++col) {
          double proj = 0.0;
          for (std::size_t k = 0; k < 5; ++k) proj += t[j].at(r, k) * w_a.at(k, col);
          acc += (proj - s[i].at(r, col)) * (proj - s[i].at(r, col));
        }
      }
      EXPECT_NEAR(c(i, j), acc / 12.0, 1e-12);
      EXPECT_GE(c(i, j), 0.0);
    }
  }
  EXPECT_THROW(hidden_cost_matrix({s[0], s[1], s[0], s[1]}, t, w_a), ConfigError);
  EXPECT_THROW(hidden_cost_matrix(s, t, random_tensor({4, 4}, rng)), DimensionError);
}

TEST(MatcherTest, HiddenCostZeroDiagonalAndPermutationInvariance) {
  Rng rng(22);
  const Tensor w_a = random_tensor({4, 4}, rng);
  std::vector<Tensor> t{random_tensor({5, 4}, rng), random_tensor({5, 4}, rng)};
  std::vector<Tensor> s{matmul(t[0], w_a), matmul(t[1], w_a)};
  const CostMatrix c = hidden_cost_matrix(s, t, w_a);
  EXPECT_NEAR(c(0, 0), 0.0, 1e-15);
  EXPECT_NEAR(c(1, 1), 0.0, 1e-15);

  // Reverse token order on both sides.
  auto reverse_rows = [](const Tensor& x) {
    std::vector<Tensor> rows;
    for (std::size_t r = x.dim(0); r-- > 0;) {
      std::vector<double> v(x.values().begin() + r * x.dim(1), x.values().begin() + (r + 1) * x.dim(1));
      rows.push_back(Tensor::from({1, x.dim(1)}, v));
    }
    return concat(rows, 0);
  };
  std::vector<Tensor> s2{reverse_rows(s[1]), reverse_rows(s[0])};
  std::vector<Tensor> t2{reverse_rows(t[0]), reverse_rows(t[1])};
  const CostMatrix c2 = hidden_cost_matrix(s2, t2, w_a);
  EXPECT_NEAR(c2(0, 1), c(1, 1), 1e-12);
  EXPECT_NEAR(c2(1, 0), c(0, 0), 1e-12);
}

TEST(MatcherTest, CostAccumulatorAverages) {
  CostAccumulator acc;
  EXPECT_TRUE(acc.empty());
  acc.add(CostMatrix::from_rows({{1, 2}}));
  acc.add(CostMatrix::from_rows({{3, 6}}));
  EXPECT_EQ(acc.count(), 2u);
  EXPECT_EQ(acc.average(), CostMatrix::from_rows({{2, 4}}));
  acc.reset();
  EXPECT_TRUE(acc.empty());
}

QuantizedTensor quant_of(const Tensor& w, int bits = 8) { return quantize_tensor(w, bits); }

TEST(MatcherTest, BridgeLossHandCase) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  QuantizedTensor q{{2, 2}, 2, 0.5, {1, 0, 0, 1}};
  EXPECT_DOUBLE_EQ(quant_bridge_loss(eye, eye, eye, q).item(), 0.25);
  QuantizedTensor exact{{2, 2}, 2, 0.5, {2, 0, 0, 2}};
  EXPECT_DOUBLE_EQ(quant_bridge_loss(eye, eye, eye, exact).item(), 0.0);
  EXPECT_THROW(quant_bridge_loss(eye, Tensor::zeros({3, 2}), eye, q), DimensionError);
}

TEST(MatcherTest, BridgeLossGradient) {
  Rng rng(5);
  const QuantizedTensor q = quant_of(random_tensor({3, 4}, rng));
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Rng r(seed);
    worst = std::max(worst, grad_check([&](const auto& in) { return quant_bridge_loss(in[0], in[1], in[2], q); },
                                       {random_tensor({5, 6}, r), random_tensor({3, 5}, r), random_tensor({6, 4}, r)}));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(MatcherTest, QuantMatchFindsPlantedLayer) {
  Rng rng(9);
  const std::size_t n_teacher = 5;
  const Tensor student_w = random_tensor({4, 6}, rng);
  const QuantizedTensor q = quant_of(student_w);
  std::vector<Tensor> teacher;
  for (std::size_t j = 0; j < n_teacher; ++j) teacher.push_back(random_tensor({4, 6}, rng));
  teacher[3] = scale(dequantize(q), 1.02);
  const Tensor w1 = near_identity(4, 4, 1, 1e-3), w2 = near_identity(6, 6, 2, 1e-3);
  const MatchingPlan p = match_quant(teacher, {q}, w1, w2);
  EXPECT_EQ(p.f, (std::vector<int>{4}));
  EXPECT_EQ(p.strategy, MatchStrategy::Quant);
  EXPECT_EQ(match_quant({teacher[0]}, {q}, w1, w2).f, (std::vector<int>{1}));
}

TEST(MatcherOracleTest, QuantMatchEqualsRowBruteForce) { EXPECT_EQ(test::quant_sweep().mismatches, 0); }

TEST(MatcherTest, ProjectionsAreNearIdentity) {
  const ModelConfig t = ModelConfig::desk_teacher(), s = ModelConfig::desk_student();
  const MatchProjections p = MatchProjections::init(t, s, 3);
  EXPECT_EQ(p.w_a.shape(), (Shape{static_cast<std::size_t>(t.d_model), static_cast<std::size_t>(s.d_model)}));
  EXPECT_EQ(p.w_1.shape(), (Shape{static_cast<std::size_t>(s.d_model), static_cast<std::size_t>(t.d_model)}));
  EXPECT_EQ(p.w_2.shape(), (Shape{static_cast<std::size_t>(t.d_ff), static_cast<std::size_t>(s.d_ff)}));
  for (std::size_t i = 0; i < p.w_a.dim(0); ++i) {
    for (std::size_t j = 0; j < p.w_a.dim(1); ++j) {
      const double target = i == j ? 1.0 : 0.0;
      EXPECT_LE(std::fabs(p.w_a.at(i, j) - target), 0.01);
    }
  }
  const MatchProjections copy = p.clone();
  EXPECT_NE(copy.w_a.values().data(), p.w_a.values().data());
}

}  // namespace
}  // namespace dq
