// SPDX-License-Identifier: Apache-2.0
//
// Distillation objective:
//   l_kd    = l_pred + l_hidn
//   l_model = alpha·l_kd + gamma·l_quan + (1 - alpha)·l_ce

#pragma once

#include <span>
#include <vector>

#include "dq/matcher.hpp"
#include "dq/tensor.hpp"
#include "dq/vocab.hpp"

namespace dq {

struct LossWeights {
  double alpha = 0.5;
  double gamma = 1.0;
  double temperature = 1.0;
  /// Per student layer; empty means 1 for every layer.
  std::vector<double> lambda;
  /// Divide the student logits by the temperature too and scale by t^2.
  bool symmetric_temperature = false;

  /// Throws ParameterError outside alpha in [0,1], gamma >= 0, t > 0, lambda >= 0.
  void validate() const;
  double lambda_at(std::size_t layer) const;
};

struct LossBreakdown {
  double l_pred = 0.0, l_hidn = 0.0, l_kd = 0.0, l_quan = 0.0, l_ce = 0.0, l_model = 0.0;
  bool operator==(const LossBreakdown&) const = default;
};

/// KL(softmax(z_T / t) || softmax(z_S)), averaged over positions. The teacher
/// side is a constant.
Tensor pred_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature,
                 bool symmetric_temperature = false);

/// (1/M) Σ_i lambda_i · MSE(H_S[i], H_T[f(i)] · W_A). Teacher hiddens are constants.
Tensor hidden_loss(const std::vector<Tensor>& student_hiddens, const std::vector<Tensor>& teacher_hiddens,
                   const MatchingPlan& plan, const Tensor& w_a, const LossWeights& weights);

/// Token-level cross-entropy averaged over positions whose label is not `ignore`.
/// Throws AlignmentError when labels and logit rows differ in count.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, int ignore = vocab::kPad);

/// Undefined tensors count as zero.
struct LossTerms {
  Tensor pred, hidn, quan, ce;
};

struct TotalLoss {
  Tensor objective;
  LossBreakdown breakdown;
};

TotalLoss total_loss(const LossTerms& terms, const LossWeights& weights);

/// Single-sequence convenience: computes the cross-entropy from the student's
/// logits and labels, then combines.
TotalLoss total_loss(const Tensor& pred, const Tensor& hidn, const Tensor& quan, const Tensor& student_logits,
                     std::span<const int> labels, const LossWeights& weights);

/// True when l_kd and l_model match their definitions within `tol`
/// (relative to max(1, |term|)).
bool loss_identities_hold(const LossBreakdown& b, const LossWeights& weights, double tol = 1e-12);

}  // namespace dq
