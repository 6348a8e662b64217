// SPDX-License-Identifier: Apache-2.0

#include "dq/losses.hpp"

#include <cmath>

namespace dq {

void LossWeights::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("alpha must be in [0, 1]");
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw ParameterError("gamma must be >= 0");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ParameterError("temperature must be > 0");
  for (double l : lambda)
    if (!(l >= 0.0) || !std::isfinite(l)) throw ParameterError("lambda weights must be >= 0");
}

double LossWeights::lambda_at(std::size_t layer) const {
  if (lambda.empty()) return 1.0;
  if (layer >= lambda.size()) throw ConfigError("no lambda weight for student layer " + std::to_string(layer + 1));
  return lambda[layer];
}

Tensor pred_loss(const Tensor& teacher_logits, const Tensor& student_logits, double temperature,
                 bool symmetric_temperature) {
  if (!(temperature > 0.0)) throw ParameterError("temperature must be > 0");
  if (teacher_logits.shape() != student_logits.shape())
    throw DimensionError("pred_loss: teacher logits " + shape_str(teacher_logits.shape()) + " vs student logits " +
                         shape_str(student_logits.shape()));
  if (student_logits.rank() != 2) throw DimensionError("pred_loss: logits must be [positions × vocab]");
  const double inv_t = 1.0 / temperature;
  const Tensor log_p = log_softmax(scale(teacher_logits.detach(), inv_t), 1);
  const Tensor log_q = log_softmax(symmetric_temperature ? scale(student_logits, inv_t) : student_logits, 1);
  // Σ p·(log p - log q) / positions, with p and log p constant.
  const auto positions = static_cast<double>(student_logits.dim(0));
  Tensor p = Tensor::zeros(log_p.shape());
  {
    auto pv = p.mutable_values();
    const auto lp = log_p.values();
    for (std::size_t k = 0; k < pv.size(); ++k) pv[k] = std::exp(lp[k]) / positions;
  }
  Tensor kl = sum(mul(p, sub(log_p, log_q)));
  return symmetric_temperature ? scale(kl, temperature * temperature) : kl;
}

Tensor hidden_loss(const std::vector<Tensor>& student_hiddens, const std::vector<Tensor>& teacher_hiddens,
                   const MatchingPlan& plan, const Tensor& w_a, const LossWeights& weights) {
  const std::size_t m = student_hiddens.size(), n = teacher_hiddens.size();
  if (m == 0) throw ConfigError("hidden_loss: no student layers");
  if (plan.f.size() != m)
    throw ConfigError("hidden_loss: plan covers " + std::to_string(plan.f.size()) + " layers, student has " +
                      std::to_string(m));
  Tensor total;
  for (std::size_t i = 0; i < m; ++i) {
    const int j = plan.f[i];
    if (j < 1 || static_cast<std::size_t>(j) > n)
      throw ConfigError("hidden_loss: plan maps student layer " + std::to_string(i + 1) + " to missing teacher layer " +
                        std::to_string(j));
    Tensor term = scale(mse(student_hiddens[i], matmul(teacher_hiddens[j - 1].detach(), w_a)), weights.lambda_at(i));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(m));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, int ignore) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [positions × vocab]");
  if (labels.size() != logits.dim(0))
    throw AlignmentError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits.dim(0)) + " logit rows");
  const std::size_t v = logits.dim(1);
  std::size_t count = 0;
  for (int y : labels) {
    if (y == ignore) continue;
    if (y < 0 || static_cast<std::size_t>(y) >= v) throw VocabularyError("label " + std::to_string(y) + " outside vocabulary");
    ++count;
  }
  if (count == 0) return Tensor::scalar(0.0);
  Tensor pick = Tensor::zeros(logits.shape());
  auto pv = pick.mutable_values();
  for (std::size_t t = 0; t < labels.size(); ++t)
    if (labels[t] != ignore) pv[t * v + static_cast<std::size_t>(labels[t])] = -1.0 / static_cast<double>(count);
  return sum(mul(log_softmax(logits, 1), pick));
}

namespace {

double value_or_zero(const Tensor& t) { return t.defined() ? t.item() : 0.0; }

Tensor weighted(const Tensor& t, double w) { return t.defined() ? scale(t, w) : Tensor{}; }

Tensor plus(const Tensor& a, const Tensor& b) {
  if (!a.defined()) return b;
  if (!b.defined()) return a;
  return add(a, b);
}

}  // namespace

TotalLoss total_loss(const LossTerms& terms, const LossWeights& weights) {
  weights.validate();
  TotalLoss out;
  const Tensor kd = plus(terms.pred, terms.hidn);
  Tensor objective = plus(plus(weighted(kd, weights.alpha), weighted(terms.quan, weights.gamma)),
                          weighted(terms.ce, 1.0 - weights.alpha));
  out.objective = objective.defined() ? objective : Tensor::scalar(0.0);
  auto& b = out.breakdown;
  b.l_pred = value_or_zero(terms.pred);
  b.l_hidn = value_or_zero(terms.hidn);
  b.l_kd = value_or_zero(kd);
  b.l_quan = value_or_zero(terms.quan);
  b.l_ce = value_or_zero(terms.ce);
  b.l_model = out.objective.item();
  return out;
}

TotalLoss total_loss(const Tensor& pred, const Tensor& hidn, const Tensor& quan, const Tensor& student_logits,
                     std::span<const int> labels, const LossWeights& weights) {
  return total_loss(LossTerms{pred, hidn, quan, cross_entropy(student_logits, labels)}, weights);
}

bool loss_identities_hold(const LossBreakdown& b, const LossWeights& w, double tol) {
  const auto close = [tol](double got, double want) {
    return std::fabs(got - want) <= tol * std::max(1.0, std::fabs(want));
  };
  return close(b.l_kd, b.l_pred + b.l_hidn) &&
         close(b.l_model, w.alpha * b.l_kd + w.gamma * b.l_quan + (1.0 - w.alpha) * b.l_ce);
}

}  // namespace dq
