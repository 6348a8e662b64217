// SPDX-License-Identifier: Apache-2.0
//
// Student -> teacher layer mapping for hidden-state distillation.
//
//   DM     each student layer takes the teacher layer with the lowest projected
//          hidden-state MSE, independently per row.
//   RDM    the mapping must be strictly increasing; the one with the lowest
//          summed cost is found by dynamic programming.
//   QUANT  rows are scored by how well a bridged teacher weight
//          W1·W_T·W2 reproduces the student's quantized weight.
//   STATIC evenly spaced fixed mapping.
//
// Layer indices in a plan are 1-based.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dq/model.hpp"
#include "dq/quantizer.hpp"
#include "dq/tensor.hpp"

namespace dq {

enum class MatchStrategy { DM, RDM, Quant, Static };
std::string_view match_strategy_name(MatchStrategy s);

/// Dense row-major M×N matrix of real costs.
struct CostMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  CostMatrix() = default;
  CostMatrix(std::size_t m, std::size_t n, double fill = 0.0) : rows(m), cols(n), values(m * n, fill) {}
  static CostMatrix from_rows(const std::vector<std::vector<double>>& rows);

  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  bool operator==(const CostMatrix&) const = default;
};

struct MatchingPlan {
  std::vector<int> f;  // f[i] = teacher layer (1-based) for student layer i+1
  MatchStrategy strategy = MatchStrategy::DM;
  CostMatrix cost;
  long refresh_step = 0;

  /// Sum of cost(i, f(i)) over student layers.
  double total_cost() const;
  bool operator==(const MatchingPlan&) const = default;
};

/// "1,3,4"
std::string format_mapping(std::span<const int> f);
std::vector<int> parse_mapping(std::string_view text);

/// Learned maps used by the matcher and the distillation losses.
///   w_a: [d_teacher × d_student], applied as H_T · w_a
///   w_1: [d_student × d_teacher], w_2: [ff_teacher × ff_student] so that
///        w_1 · W_T · w_2 has the shape of the student's W
struct MatchProjections {
  Tensor w_a, w_1, w_2;

  /// Identity padded or truncated to shape, plus uniform noise of `noise`.
  static MatchProjections init(const ModelConfig& teacher, const ModelConfig& student, std::uint64_t seed,
                               double noise = 0.01);
  MatchProjections clone() const;
};

Tensor near_identity(std::size_t rows, std::size_t cols, std::uint64_t seed, double noise);

/// cost(i, j) = mean over tokens and features of (H_T[j]·W_A - H_S[i])^2.
/// Throws ConfigError when the student is deeper than the teacher.
CostMatrix hidden_cost_matrix(const std::vector<Tensor>& student_hiddens, const std::vector<Tensor>& teacher_hiddens,
                              const Tensor& w_a);

/// Running mean of cost matrices over a refresh window.
class CostAccumulator {
 public:
  void add(const CostMatrix& c);
  bool empty() const { return count_ == 0; }
  std::size_t count() const { return count_; }
  CostMatrix average() const;
  void reset();

 private:
  CostMatrix sum_;
  std::size_t count_ = 0;
};

/// Row-wise argmin, ties to the smallest teacher index.
MatchingPlan match_dm(const CostMatrix& cost);

/// Strictly increasing f minimizing the summed cost, ties resolved toward the
/// lexicographically smallest f. O(M·N).
MatchingPlan match_rdm(const CostMatrix& cost);

/// f(i) = round(i·N/M) for i = 1..M.
MatchingPlan match_static(std::size_t student_layers, std::size_t teacher_layers);

/// mean|W1·W_T·W2 - alpha·codes|
Tensor quant_bridge_loss(const Tensor& teacher_weight, const Tensor& w_1, const Tensor& w_2,
                         const QuantizedTensor& student_quant);

/// cost(i, j) = quant_bridge_loss(teacher_weights[j], W1, W2, student_quant[i]).
CostMatrix quant_cost_matrix(const std::vector<Tensor>& teacher_weights,
                             const std::vector<QuantizedTensor>& student_quant, const Tensor& w_1,
                             const Tensor& w_2);

/// Row argmin of the bridge cost (or the monotone DP over it when
/// `monotone` is set). The plan is tagged Quant either way.
MatchingPlan match_quant(const std::vector<Tensor>& teacher_weights, const std::vector<QuantizedTensor>& student_quant,
                         const Tensor& w_1, const Tensor& w_2, bool monotone = false);

}  // namespace dq
