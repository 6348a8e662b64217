// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient cases shared by the unit tests and the
// acceptance binary. Every case reports its worst relative error over ten
// seeded points.

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dq/losses.hpp"
#include "dq/model.hpp"
#include "dq/quantizer.hpp"
#include "test_util.hpp"

namespace dq::test {

struct GradCase {
  std::string name;
  std::function<double()> worst;
};

inline constexpr int kGradSeeds = 10;

using InputMaker = std::function<std::vector<Tensor>(Rng&)>;
using Scalar = std::function<Tensor(const std::vector<Tensor>&)>;

inline GradCase op_case(std::string name, InputMaker make, Scalar f) {
  return {std::move(name), [make = std::move(make), f = std::move(f)] {
            double worst = 0.0;
            for (std::uint64_t seed = 1; seed <= kGradSeeds; ++seed) {
              Rng rng(seed * 977);
              worst = std::max(worst, grad_check(f, make(rng)));
            }
            return worst;
          }};
}

/// One case per differentiable tensor operation.
inline std::vector<GradCase> operation_cases() {
  const auto pair23 = [](Rng& r) { return std::vector{random_tensor({2, 3}, r), random_tensor({2, 3}, r)}; };
  const auto one23 = [](Rng& r) { return std::vector{random_tensor({2, 3}, r)}; };
  const auto one35 = [](Rng& r) { return std::vector{random_tensor({3, 5}, r, -3.0, 3.0)}; };
  const auto pair34 = [](Rng& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({3, 4}, r)}; };
  std::vector<GradCase> cases;
  cases.push_back(op_case(
      "matmul", [](Rng& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({4, 2}, r)}; },
      [](const auto& in) { return weighted_sum(matmul(in[0], in[1]), 1); }));
  cases.push_back(op_case(
      "linear",
      [](Rng& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({4, 5}, r), random_tensor({5}, r)}; },
      [](const auto& in) { return weighted_sum(linear(in[0], in[1], in[2]), 2); }));
  cases.push_back(op_case("add", pair23, [](const auto& in) { return weighted_sum(add(in[0], in[1]), 3); }));
  cases.push_back(op_case("sub", pair23, [](const auto& in) { return weighted_sum(sub(in[0], in[1]), 4); }));
  cases.push_back(op_case("mul", pair23, [](const auto& in) { return weighted_sum(mul(in[0], in[1]), 5); }));
  cases.push_back(op_case("scale", one23, [](const auto& in) { return weighted_sum(scale(in[0], -1.7), 6); }));
  cases.push_back(op_case("add_scalar", one23, [](const auto& in) { return weighted_sum(add_scalar(in[0], 0.3), 7); }));
  cases.push_back(op_case("square", one23, [](const auto& in) { return weighted_sum(square(in[0]), 8); }));
  cases.push_back(op_case("abs", one23, [](const auto& in) { return weighted_sum(abs(in[0]), 9); }));
  cases.push_back(op_case("exp", one23, [](const auto& in) { return weighted_sum(exp(in[0]), 10); }));
  cases.push_back(op_case("relu", one23, [](const auto& in) { return weighted_sum(relu(in[0]), 11); }));
  cases.push_back(op_case("gelu", one23, [](const auto& in) { return weighted_sum(gelu(in[0]), 12); }));
  cases.push_back(op_case(
      "log", [](Rng& r) { return std::vector{random_tensor({2, 3}, r, 0.2, 3.0)}; },
      [](const auto& in) { return weighted_sum(log(in[0]), 13); }));
  cases.push_back(op_case("softmax", one35, [](const auto& in) { return weighted_sum(softmax(in[0], 1), 14); }));
  cases.push_back(
      op_case("log_softmax", one35, [](const auto& in) { return weighted_sum(log_softmax(in[0], 1), 15); }));
  cases.push_back(op_case("softmax_axis0", one35, [](const auto& in) { return weighted_sum(softmax(in[0], 0), 16); }));
  cases.push_back(op_case(
      "layer_norm",
      [](Rng& r) { return std::vector{random_tensor({3, 6}, r, -2, 2), random_tensor({6}, r), random_tensor({6}, r)}; },
      [](const auto& in) { return weighted_sum(layer_norm(in[0], in[1], in[2]), 17); }));
  cases.push_back(op_case(
      "transpose", [](Rng& r) { return std::vector{random_tensor({3, 4}, r)}; },
      [](const auto& in) { return weighted_sum(transpose(in[0]), 18); }));
  cases.push_back(op_case(
      "concat_rows", [](Rng& r) { return std::vector{random_tensor({2, 3}, r), random_tensor({1, 3}, r)}; },
      [](const auto& in) { return weighted_sum(concat({in[0], in[1]}, 0), 19); }));
  cases.push_back(op_case(
      "concat_cols", [](Rng& r) { return std::vector{random_tensor({2, 3}, r), random_tensor({2, 2}, r)}; },
      [](const auto& in) { return weighted_sum(concat({in[0], in[1]}, 1), 20); }));
  cases.push_back(op_case(
      "embedding_lookup", [](Rng& r) { return std::vector{random_tensor({5, 3}, r)}; },
      [](const auto& in) {
        const int ids[] = {4, 0, 4, 2};
        return weighted_sum(embedding_lookup(in[0], ids), 21);
      }));
  cases.push_back(op_case("sum", pair34, [](const auto& in) { return sum(mul(in[0], in[1])); }));
  cases.push_back(op_case("mean", pair34, [](const auto& in) { return mean(mul(in[0], in[1])); }));
  cases.push_back(op_case("mse", pair34, [](const auto& in) { return mse(in[0], in[1]); }));
  cases.push_back(op_case(
      "attention_causal",
      [](Rng& r) { return std::vector{random_tensor({4, 6}, r), random_tensor({4, 6}, r), random_tensor({4, 6}, r)}; },
      [](const auto& in) { return weighted_sum(attention(in[0], in[1], in[2], 2, true), 22); }));
  cases.push_back(op_case(
      "attention_cross",
      [](Rng& r) { return std::vector{random_tensor({2, 6}, r), random_tensor({5, 6}, r), random_tensor({5, 6}, r)}; },
      [](const auto& in) { return weighted_sum(attention(in[0], in[1], in[2], 3, false), 23); }));
  // x feeds two branches; both contributions must reach x.
  cases.push_back(op_case("fan_out", one23,
                          [](const auto& in) { return weighted_sum(add(mul(in[0], in[0]), gelu(in[0])), 24); }));
  return cases;
}

inline MatchingPlan plan_of(std::vector<int> f) {
  MatchingPlan p;
  p.f = std::move(f);
  p.strategy = MatchStrategy::RDM;
  return p;
}

/// A three-layer teacher and a narrower two-layer student on one example.
struct Toy {
  SeqModel teacher, student;
  Tensor w_a;
  std::map<std::string, Tensor> grids;  // quantization grids at the unperturbed weights
  std::vector<int> src{4, 9, 12, 7}, dec_in, labels;

  explicit Toy(std::uint64_t seed) {
    ModelConfig tc;
    tc.n_enc_layers = 1;
    tc.n_dec_layers = 3;
    tc.d_model = 8;
    tc.n_heads = 2;
    tc.d_ff = 12;
    tc.max_len = 8;
    ModelConfig sc = tc;
    sc.n_dec_layers = 2;
    sc.d_model = 6;
    sc.d_ff = 10;
    teacher = SeqModel::init(tc, Role::Teacher, seed);
    student = SeqModel::init(sc, Role::Student, seed + 1);
    Rng rng(seed + 2);
    w_a = random_tensor({8, 6}, rng);
    dec_in = {vocab::kBos, 10, 11, 13};
    labels = {10, 11, 13, vocab::kEos};
    // |W - G| has a kink wherever a weight sits on its grid point. Move such
    // weights 1e-4 off the grid so finite differences stay on one side.
    for (const auto& name : quantizable_names(sc, false)) {
      Tensor& w = student.params.get(name);
      const Tensor g = fake_quantize(w, 8);
      auto v = w.mutable_values();
      for (std::size_t k = 0; k < v.size(); ++k)
        if (std::fabs(v[k] - g.values()[k]) < 1e-4) v[k] = g.values()[k] + (v[k] < g.values()[k] ? -1e-4 : 1e-4);
      grids.emplace(name, g);
    }
  }

  std::vector<Tensor> params() const {
    std::vector<Tensor> out;
    for (const auto& e : student.params.entries()) out.push_back(e.tensor);
    out.push_back(w_a);
    return out;
  }
};

inline GradCase objective_case(std::string name, std::function<Tensor(Toy&)> objective) {
  return {std::move(name), [objective = std::move(objective)] {
            double worst = 0.0;
            for (std::uint64_t seed = 1; seed <= kGradSeeds; ++seed) {
              Toy toy(seed * 31);
              worst =
                  std::max(worst, grad_check([&](const auto&) { return objective(toy); }, toy.params(), 1e-5, 12, seed));
            }
            return worst;
          }};
}

/// The prediction loss, the hidden loss and the joint objective, each with
/// respect to every student parameter and W_A.
inline std::vector<GradCase> objective_cases() {
  std::vector<GradCase> cases;
  cases.push_back(objective_case("prediction_loss", [](Toy& toy) {
    const Tensor zt = forward_with_hiddens(toy.teacher, toy.src, toy.dec_in).logits.detach();
    return pred_loss(zt, forward_with_hiddens(toy.student, toy.src, toy.dec_in).logits, 1.0);
  }));
  cases.push_back(objective_case("hidden_loss", [](Toy& toy) {
    auto t = forward_with_hiddens(toy.teacher, toy.src, toy.dec_in).decoder_hiddens;
    for (auto& h : t) h = h.detach();
    const auto s = forward_with_hiddens(toy.student, toy.src, toy.dec_in).decoder_hiddens;
    LossWeights w;
    w.lambda = {0.7, 1.3};
    return hidden_loss(s, t, plan_of({1, 3}), toy.w_a, w);
  }));
  // The quantization term holds each grid fixed, which is the function
  // quant_loss differentiates.
  cases.push_back(objective_case("joint_objective", [](Toy& toy) {
    const auto t = forward_with_hiddens(toy.teacher, toy.src, toy.dec_in);
    const auto s = forward_with_hiddens(toy.student, toy.src, toy.dec_in);
    std::vector<Tensor> th;
    for (const auto& h : t.decoder_hiddens) th.push_back(h.detach());
    Tensor quan;
    for (const auto& name : quantizable_names(toy.student.config, false)) {
      const Tensor& w = toy.student.params.get(name);
      const Tensor term = mean(abs(sub(w, toy.grids.at(name))));
      quan = quan.defined() ? add(quan, term) : term;
    }
    LossTerms terms;
    terms.pred = pred_loss(t.logits.detach(), s.logits, 1.0);
    terms.hidn = hidden_loss(s.decoder_hiddens, th, plan_of({2, 3}), toy.w_a, {});
    terms.quan = quan;
    terms.ce = cross_entropy(s.logits, toy.labels);
    return total_loss(terms, LossWeights{}).objective;
  }));
  return cases;
}

}  // namespace dq::test
