// SPDX-License-Identifier: Apache-2.0

#include "dq/matcher.hpp"

#include <charconv>
#include <cmath>
#include <limits>
#include <sstream>

#include "dq/random.hpp"

namespace dq {

std::string_view match_strategy_name(MatchStrategy s) {
  switch (s) {
    case MatchStrategy::DM: return "dm";
    case MatchStrategy::RDM: return "rdm";
    case MatchStrategy::Quant: return "quant";
    case MatchStrategy::Static: return "static";
  }
  return "?";
}

CostMatrix CostMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty() || rows[0].empty()) throw DimensionError("cost matrix needs at least one entry");
  CostMatrix c(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != c.cols) throw DimensionError("cost matrix rows differ in length");
    for (std::size_t j = 0; j < c.cols; ++j) c(i, j) = rows[i][j];
  }
  return c;
}

double MatchingPlan::total_cost() const {
  double total = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) total += cost(i, static_cast<std::size_t>(f[i] - 1));
  return total;
}

std::string format_mapping(std::span<const int> f) {
  std::ostringstream os;
  for (std::size_t i = 0; i < f.size(); ++i) os << (i ? "," : "") << f[i];
  return os.str();
}

std::vector<int> parse_mapping(std::string_view text) {
  std::vector<int> f;
  std::string item;
  std::istringstream is{std::string(text)};
  while (std::getline(is, item, ',')) {
    int v = 0;
    const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc{} || end != item.data() + item.size() || v < 1)
      throw ConfigError("bad layer mapping '" + std::string(text) + "'");
    f.push_back(v);
  }
  return f;
}

// ---------------------------------------------------------------------------
// Projections

Tensor near_identity(std::size_t rows, std::size_t cols, std::uint64_t seed, double noise) {
  Rng rng(seed);
  Tensor t = Tensor::zeros({rows, cols});
  auto v = t.mutable_values();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) v[i * cols + j] = (i == j ? 1.0 : 0.0) + rng.uniform(-noise, noise);
  return t;
}

MatchProjections MatchProjections::init(const ModelConfig& teacher, const ModelConfig& student, std::uint64_t seed,
                                        double noise) {
  const auto dt = static_cast<std::size_t>(teacher.d_model), ds = static_cast<std::size_t>(student.d_model);
  const auto ft = static_cast<std::size_t>(teacher.d_ff), fs = static_cast<std::size_t>(student.d_ff);
  return {near_identity(dt, ds, seed * 3 + 1, noise), near_identity(ds, dt, seed * 3 + 2, noise),
          near_identity(ft, fs, seed * 3 + 3, noise)};
}

MatchProjections MatchProjections::clone() const { return {w_a.clone(), w_1.clone(), w_2.clone()}; }

// ---------------------------------------------------------------------------
// Hidden-state costs

CostMatrix hidden_cost_matrix(const std::vector<Tensor>& student_hiddens, const std::vector<Tensor>& teacher_hiddens,
                              const Tensor& w_a) {
  const std::size_t m = student_hiddens.size(), n = teacher_hiddens.size();
  if (m == 0 || n == 0) throw ConfigError("hidden_cost_matrix: no layers");
  if (m > n)
    throw ConfigError("student deeper than teacher (" + std::to_string(m) + " > " + std::to_string(n) + " layers)");
  CostMatrix cost(m, n);
  for (std::size_t j = 0; j < n; ++j) {
    // Projection is shared by every student row, so compute it once per teacher layer.
    const Tensor projected = matmul(teacher_hiddens[j].detach(), w_a.detach());
    for (std::size_t i = 0; i < m; ++i) {
      const Tensor& hs = student_hiddens[i];
      if (hs.shape() != projected.shape())
        throw DimensionError("hidden_cost_matrix: student " + shape_str(hs.shape()) + " vs projected teacher " +
                             shape_str(projected.shape()));
      const auto a = hs.values(), b = projected.values();
      double total = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) total += (b[k] - a[k]) * (b[k] - a[k]);
      cost(i, j) = total / static_cast<double>(a.size());
    }
  }
  return cost;
}

void CostAccumulator::add(const CostMatrix& c) {
  if (count_ == 0) {
    sum_ = c;
  } else {
    if (c.rows != sum_.rows || c.cols != sum_.cols) throw DimensionError("CostAccumulator: shape changed mid-window");
    for (std::size_t k = 0; k < c.values.size(); ++k) sum_.values[k] += c.values[k];
  }
  ++count_;
}

CostMatrix CostAccumulator::average() const {
  if (count_ == 0) throw ContractError("CostAccumulator: empty window");
  CostMatrix avg = sum_;
  for (double& v : avg.values) v /= static_cast<double>(count_);
  return avg;
}

void CostAccumulator::reset() {
  sum_ = CostMatrix{};
  count_ = 0;
}

// ---------------------------------------------------------------------------
// Matching

namespace {

void check_costs(const CostMatrix& cost) {
  if (cost.rows == 0 || cost.cols == 0) throw ConfigError("empty cost matrix");
  for (double v : cost.values)
    if (!std::isfinite(v)) throw ConfigError("cost matrix has non-finite entries");
}

}  // namespace

MatchingPlan match_dm(const CostMatrix& cost) {
  check_costs(cost);
  MatchingPlan plan;
  plan.strategy = MatchStrategy::DM;
  plan.cost = cost;
  for (std::size_t i = 0; i < cost.rows; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < cost.cols; ++j)
      if (cost(i, j) < cost(i, best)) best = j;
    plan.f.push_back(static_cast<int>(best) + 1);
  }
  return plan;
}

MatchingPlan match_rdm(const CostMatrix& cost) {
  check_costs(cost);
  const std::size_t m = cost.rows, n = cost.cols;
  if (m > n) throw ConfigError("student deeper than teacher (" + std::to_string(m) + " > " + std::to_string(n) + " layers)");
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // tail(i, j): least cost of rows i..m-1 given f(i) = j. Row i can only use
  // columns i..n-m+i so the remaining rows still fit.
  CostMatrix tail(m, n, kInf);
  for (std::size_t j = m - 1; j < n; ++j) tail(m - 1, j) = cost(m - 1, j);
  for (std::size_t i = m - 1; i-- > 0;) {
    double best_after = kInf;  // min of tail(i+1, j') over j' > j
    for (std::size_t j = n - m + i + 1; j-- > i;) {
      best_after = std::min(best_after, tail(i + 1, j + 1));
      tail(i, j) = cost(i, j) + best_after;
    }
  }
  // Forward pass: at every row take the smallest column that still achieves
  // the optimum, which yields the lexicographically smallest optimal f.
  MatchingPlan plan;
  plan.strategy = MatchStrategy::RDM;
  plan.cost = cost;
  std::size_t lo = 0;
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t best = lo;
    for (std::size_t j = lo; j <= n - m + i; ++j)
      if (tail(i, j) < tail(i, best)) best = j;
    plan.f.push_back(static_cast<int>(best) + 1);
    lo = best + 1;
  }
  return plan;
}

MatchingPlan match_static(std::size_t student_layers, std::size_t teacher_layers) {
  if (student_layers == 0 || student_layers > teacher_layers)
    throw ConfigError("static matching needs 1 <= student layers <= teacher layers");
  MatchingPlan plan;
  plan.strategy = MatchStrategy::Static;
  plan.cost = CostMatrix(student_layers, teacher_layers);
  for (std::size_t i = 1; i <= student_layers; ++i)
    plan.f.push_back(static_cast<int>((2 * i * teacher_layers + student_layers) / (2 * student_layers)));
  return plan;
}

Tensor quant_bridge_loss(const Tensor& teacher_weight, const Tensor& w_1, const Tensor& w_2,
                         const QuantizedTensor& student_quant) {
  const Tensor bridged = matmul(matmul(w_1, teacher_weight), w_2);
  const Tensor q = dequantize(student_quant);
  if (bridged.shape() != q.shape())
    throw DimensionError("quant_bridge_loss: bridged teacher weight " + shape_str(bridged.shape()) +
                         " vs student weight " + shape_str(q.shape()));
  return mean(abs(sub(bridged, q)));
}

CostMatrix quant_cost_matrix(const std::vector<Tensor>& teacher_weights,
                             const std::vector<QuantizedTensor>& student_quant, const Tensor& w_1,
                             const Tensor& w_2) {
  const std::size_t m = student_quant.size(), n = teacher_weights.size();
  if (m == 0 || n == 0) throw ConfigError("quant_cost_matrix: no layers");
  if (m > n) throw ConfigError("student deeper than teacher (" + std::to_string(m) + " > " + std::to_string(n) + " layers)");
  CostMatrix cost(m, n);
  const Tensor w1 = w_1.detach(), w2 = w_2.detach();
  for (std::size_t j = 0; j < n; ++j) {
    const Tensor bridged = matmul(matmul(w1, teacher_weights[j].detach()), w2);
    for (std::size_t i = 0; i < m; ++i) {
      const Tensor q = dequantize(student_quant[i]);
      if (bridged.shape() != q.shape())
        throw DimensionError("quant_cost_matrix: bridged teacher weight " + shape_str(bridged.shape()) +
                             " vs student weight " + shape_str(q.shape()));
      const auto a = bridged.values(), b = q.values();
      double total = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) total += std::fabs(a[k] - b[k]);
      cost(i, j) = total / static_cast<double>(a.size());
    }
  }
  return cost;
}

MatchingPlan match_quant(const std::vector<Tensor>& teacher_weights, const std::vector<QuantizedTensor>& student_quant,
                         const Tensor& w_1, const Tensor& w_2, bool monotone) {
  const CostMatrix cost = quant_cost_matrix(teacher_weights, student_quant, w_1, w_2);
  MatchingPlan plan = monotone ? match_rdm(cost) : match_dm(cost);
  plan.strategy = MatchStrategy::Quant;
  return plan;
}

}  // namespace dq
