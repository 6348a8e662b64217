// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "dq/tensor.hpp"
#include "gradient_suite.hpp"

namespace dq {
namespace {

using test::random_tensor;

TEST(TensorTest, ConstructorsAndAccessors) {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_DOUBLE_EQ(t.at(1, 2), 6.0);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_DOUBLE_EQ(Tensor::scalar(2.5).item(), 2.5);
  EXPECT_THROW((void)t.item(), ContractError);
}

TEST(TensorTest, CopiesAliasClonesDoNot) {
  Tensor a = Tensor::zeros({2});
  Tensor alias = a;
  Tensor copy = a.clone();
  alias.mutable_values()[0] = 5.0;
  EXPECT_DOUBLE_EQ(a.values()[0], 5.0);
  EXPECT_DOUBLE_EQ(copy.values()[0], 0.0);
}

TEST(TensorTest, MatmulValues) {
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from({2, 1}, {5, 6});
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_DOUBLE_EQ(c.values()[0], 17.0);
  EXPECT_DOUBLE_EQ(c.values()[1], 39.0);
  EXPECT_THROW(matmul(a, Tensor::zeros({3, 1})), DimensionError);
}

TEST(TensorTest, SoftmaxRowsSumToOne) {
  Rng rng(3);
  const Tensor z = random_tensor({4, 7}, rng, -20.0, 20.0);
  const Tensor p = softmax(z, 1);
  for (std::size_t i = 0; i < 4; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 7; ++j) total += p.at(i, j);
    EXPECT_NEAR(total, 1.0, 1e-14);
  }
  const Tensor lp = log_softmax(z, 1);
  for (std::size_t k = 0; k < p.numel(); ++k) EXPECT_NEAR(std::exp(lp.values()[k]), p.values()[k], 1e-14);
}

TEST(TensorTest, GeluIsExactErfForm) {
  const Tensor x = Tensor::from({3}, {-1.0, 0.0, 1.0});
  const Tensor y = gelu(x);
  // x·Phi(x) with Phi(1) = 0.841344746068542948...
  EXPECT_NEAR(y.values()[2], 0.8413447460685429, 1e-15);
  EXPECT_NEAR(y.values()[0], -1.0 + 0.8413447460685429, 1e-15);
  EXPECT_DOUBLE_EQ(y.values()[1], 0.0);
}

TEST(TensorTest, LayerNormNormalizesRows) {
  Rng rng(5);
  const Tensor x = random_tensor({3, 8}, rng, -4.0, 4.0);
  const Tensor y = layer_norm(x, Tensor::full({8}, 1.0), Tensor::zeros({8}));
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 8; ++j) mean += y.at(i, j) / 8.0;
    for (std::size_t j = 0; j < 8; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean) / 8.0;
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var, 1.0, 1e-3);  // eps keeps it just under 1
  }
}

TEST(TensorTest, CausalAttentionFirstRowSeesOnlyFirstKey) {
  Rng rng(11);
  const Tensor q = random_tensor({3, 4}, rng), k = random_tensor({3, 4}, rng), v = random_tensor({3, 4}, rng);
  const Tensor o = attention(q, k, v, 2, true);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(o.at(0, c), v.at(0, c), 1e-15);
  EXPECT_THROW(attention(q, random_tensor({2, 4}, rng), random_tensor({2, 4}, rng), 2, true), DimensionError);
  EXPECT_THROW(attention(q, k, v, 3, false), DimensionError);
}

TEST(TensorTest, EmbeddingLookupRejectsBadIds) {
  const Tensor table = Tensor::from({2, 2}, {1, 2, 3, 4});
  const int ok[] = {1, 0};
  EXPECT_DOUBLE_EQ(embedding_lookup(table, ok).at(0, 1), 4.0);
  const int bad[] = {2};
  EXPECT_THROW(embedding_lookup(table, bad), std::out_of_range);
}

TEST(TensorTest, BackwardNeedsScalarLoss) {
  Tape tape;
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y;
  {
    TapeScope scope(tape);
    y = square(x);
  }
  EXPECT_THROW(backward(y, tape), ContractError);
}

TEST(TensorTest, NoTapeNoRecording) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  const Tensor y = sum(square(x));  // no scope active
  EXPECT_TRUE(tape.empty());
  EXPECT_DOUBLE_EQ(y.item(), 5.0);
}

TEST(TensorTest, GradientsAccumulateAcrossBackwardCalls) {
  Tensor x = Tensor::from({1}, {3.0}, true);
  for (int round = 0; round < 2; ++round) {
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = sum(square(x));
    }
    backward(y, tape);
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

// ---------------------------------------------------------------------------
// Finite-difference checks, one per differentiable operation.

class OperationGradTest : public ::testing::TestWithParam<test::GradCase> {};

TEST_P(OperationGradTest, MatchesCentralDifferences) { EXPECT_LT(GetParam().worst(), 1e-4); }

INSTANTIATE_TEST_SUITE_P(Ops, OperationGradTest, ::testing::ValuesIn(test::operation_cases()),
                         [](const auto& info) { return info.param.name; });

}  // namespace
}  // namespace dq
