// SPDX-License-Identifier: Apache-2.0

#include "dq/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "dq/random.hpp"

namespace dq {

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::None: return "none";
    case Strategy::Logits: return "logits";
    case Strategy::DM: return "dm";
    case Strategy::RDM: return "rdm";
    case Strategy::DQ: return "dq";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  for (Strategy s : {Strategy::None, Strategy::Logits, Strategy::DM, Strategy::RDM, Strategy::DQ})
    if (strategy_name(s) == name) return s;
  throw ConfigError("unknown strategy '" + std::string(name) + "' (expected none, logits, dm, rdm or dq)");
}

void TrainConfig::validate() const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be > 0");
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
  if (refresh_interval < 0) throw ConfigError("refresh_interval must be >= 0");
  (void)max_level(bits);
  weights.validate();
}

double lr_at(long step, const TrainConfig& config) {
  if (step < 0) throw ContractError("lr_at: negative step");
  if (config.warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
  if (step >= config.warmup_steps) return config.peak_lr;
  return config.peak_lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
}

// ---------------------------------------------------------------------------
// Optimizer

void adam_update(std::span<double> w, std::span<const double> g, std::span<double> m, std::span<double> v, long t,
                 double lr, const AdamHyper& h) {
  if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size())
    throw ContractError("adam_update: block sizes differ");
  if (t < 1) throw ContractError("adam_update: step count starts at 1");
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t k = 0; k < w.size(); ++k) {
    m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
    v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
    const double m_hat = m[k] / c1;
    const double v_hat = v[k] / c2;
    w[k] -= lr * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

void Adam::step(const std::vector<Tensor>& params, double lr) {
  if (t_ == 0) {
    for (const auto& p : params) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  } else if (params.size() != m_.size()) {
    throw ContractError("Adam: parameter list changed between steps");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].requires_grad() || !params[i].has_grad())
      throw ContractError("Adam: missing gradient for trainable parameter #" + std::to_string(i));
    if (params[i].numel() != m_[i].size()) throw ContractError("Adam: parameter shape changed between steps");
  }
  ++t_;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    adam_update(p.mutable_values(), p.grad(), m_[i], v_[i], t_, lr, hyper_);
  }
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto p : params)
      if (p.has_grad())
        for (double& g : p.mutable_grad()) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Metrics log

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, const TrainLog& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "kind,step,lr,l_pred,l_hidn,l_kd,l_quan,l_ce,l_model,strategy,mapping\n";
  // Plan rows precede the step row they were computed in.
  std::size_t p = 0;
  for (const auto& s : log.steps) {
    for (; p < log.plans.size() && log.plans[p].refresh_step <= s.step; ++p)
      out << "plan," << log.plans[p].refresh_step << ",,,,,,,," << match_strategy_name(log.plans[p].strategy) << ",\""
          << format_mapping(log.plans[p].f) << "\"\n";
    const auto& l = s.loss;
    out << "step," << s.step << ',' << num(s.lr) << ',' << num(l.l_pred) << ',' << num(l.l_hidn) << ','
        << num(l.l_kd) << ',' << num(l.l_quan) << ',' << num(l.l_ce) << ',' << num(l.l_model) << ",,\n";
  }
  for (; p < log.plans.size(); ++p)
    out << "plan," << log.plans[p].refresh_step << ",,,,,,,," << match_strategy_name(log.plans[p].strategy) << ",\""
        << format_mapping(log.plans[p].f) << "\"\n";
}

// ---------------------------------------------------------------------------
// Distiller

void check_corpus_fits(const Corpus& corpus, const ModelConfig& config) {
  if (config.vocab_size != vocab::kSize)
    throw ConfigError("model vocabulary has " + std::to_string(config.vocab_size) + " tokens, the tokenizer " +
                      std::to_string(vocab::kSize));
  for (Split s : {Split::Train, Split::Dev, Split::Test})
    for (const auto& ex : corpus.split(s)) {
      if (ex.lang < 0 || ex.lang >= vocab::kMaxLanguages)
        throw ConfigError("language id " + std::to_string(ex.lang) + " has no token");
      const std::size_t longest = std::max(ex.source.size(), ex.target.size()) + 2;
      if (longest > static_cast<std::size_t>(config.max_len))
        throw ConfigError("sequence of " + std::to_string(longest) + " tokens exceeds max_len " +
                          std::to_string(config.max_len));
    }
}

Distiller::Distiller(const TrainConfig& config, const Corpus& corpus, const SeqModel* teacher, SeqModel student)
    : config_(config), corpus_(corpus), teacher_(teacher), student_(student.clone()) {
  config_.validate();
  check_corpus_fits(corpus_, student_.config);
  if (config_.strategy != Strategy::None) {
    if (teacher_ == nullptr) throw ConfigError("strategy " + std::string(strategy_name(config_.strategy)) + " needs a teacher");
    check_corpus_fits(corpus_, teacher_->config);
    if (teacher_->config.vocab_size != student_.config.vocab_size)
      throw ConfigError("teacher and student vocabularies differ");
  }
  const std::size_t n_train = corpus_.train.size();
  const long per_epoch = static_cast<long>((n_train + static_cast<std::size_t>(config_.batch_size) - 1) /
                                           static_cast<std::size_t>(config_.batch_size));
  interval_ = config_.refresh_interval > 0 ? config_.refresh_interval : std::max(1L, per_epoch);

  student_.set_trainable(true);
  student_.set_encoder_trainable(!config_.freeze_encoder);
  student_.provenance.strategy = std::string(strategy_name(config_.strategy));
  student_.provenance.seed = config_.seed;

  for (const auto& ex : corpus_.train) {
    src_.push_back(source_tokens(ex));
    std::vector<int> tgt = target_tokens(ex);
    dec_in_.emplace_back(tgt.begin(), tgt.end() - 1);
    labels_.emplace_back(tgt.begin() + 1, tgt.end());
  }
  if (config_.freeze_encoder)
    for (const auto& s : src_) enc_cache_.push_back(encode(student_, s).output.detach());

  if (config_.strategy != Strategy::None) {
    const bool hidden = uses_hidden();
    for (std::size_t i = 0; i < n_train; ++i) {
      const EncoderOutput enc = encode(*teacher_, src_[i]);
      DecoderOutput dec = decode(*teacher_, enc.output, dec_in_[i]);
      TeacherTrace trace;
      trace.logits = dec.logits.detach();
      if (hidden)
        for (const auto& h : dec.hiddens) trace.hiddens.push_back(h.detach());
      teacher_cache_.push_back(std::move(trace));
    }
    proj_ = MatchProjections::init(teacher_->config, student_.config, config_.seed);
    if (student_.config.n_dec_layers > teacher_->config.n_dec_layers && hidden)
      throw ConfigError("student deeper than teacher (" + std::to_string(student_.config.n_dec_layers) + " > " +
                        std::to_string(teacher_->config.n_dec_layers) + " decoder layers)");
  }

  for (auto& e : student_.params.entries())
    if (e.tensor.requires_grad()) trainables_.push_back(e.tensor);
  if (uses_hidden()) {
    proj_.w_a.set_requires_grad(true);
    trainables_.push_back(proj_.w_a);
  }
  if (config_.strategy == Strategy::DQ) {
    for (int l = 0; l < teacher_->config.n_dec_layers; ++l)
      teacher_representatives_.push_back(teacher_->params.get(representative_weight_name(l)).detach());
    proj_.w_1.set_requires_grad(true);
    proj_.w_2.set_requires_grad(true);
    trainables_.push_back(proj_.w_1);
    trainables_.push_back(proj_.w_2);
    for (const auto& name : quantizable_names(student_.config, !config_.freeze_encoder))
      if (student_.params.get(name).requires_grad()) quant_names_.push_back(name);
  }
}

bool Distiller::uses_hidden() const {
  return config_.strategy == Strategy::DM || config_.strategy == Strategy::RDM || config_.strategy == Strategy::DQ;
}

std::vector<QuantizedTensor> Distiller::student_representatives() const {
  std::vector<QuantizedTensor> reps;
  for (int l = 0; l < student_.config.n_dec_layers; ++l)
    reps.push_back(quantize_tensor(student_.params.get(representative_weight_name(l)), config_.bits));
  return reps;
}

void Distiller::maybe_refresh(const std::vector<DecoderOutput>& outputs, std::span<const std::size_t> batch) {
  const bool hidden_costs = config_.strategy == Strategy::DM || config_.strategy == Strategy::RDM;
  if (hidden_costs)
    for (std::size_t b = 0; b < batch.size(); ++b)
      window_.add(hidden_cost_matrix(outputs[b].hiddens, teacher_cache_[batch[b]].hiddens, proj_.w_a));

  if (plan_ && (step_ - 1) % interval_ != 0) {
    if (step_ - plan_->refresh_step >= interval_) throw ContractError("matching plan is older than its refresh window");
    return;
  }
  MatchingPlan plan;
  if (config_.strategy == Strategy::DM) {
    plan = match_dm(window_.average());
  } else if (config_.strategy == Strategy::RDM) {
    plan = match_rdm(window_.average());
  } else {
    plan = match_quant(teacher_representatives_, student_representatives(), proj_.w_1, proj_.w_2,
                       config_.monotone_quant);
  }
  window_.reset();
  plan.refresh_step = step_;
  plan_ = plan;
  log_.plans.push_back(std::move(plan));
}

// Summed over tensors and over student layers, one term per layer.
Tensor Distiller::quantization_term() {
  // Weight part: how far the trainable weights sit from their own grid.
  Tensor weights;
  for (const auto& name : quant_names_) {
    Tensor term = quant_loss(student_.params.get(name), config_.bits);
    weights = weights.defined() ? add(weights, term) : term;
  }
  // Bridge part: trains W1, W2 towards the matched quantized student weights.
  const auto reps = student_representatives();
  Tensor bridge;
  for (std::size_t i = 0; i < reps.size(); ++i) {
    const auto j = static_cast<std::size_t>(plan_->f[i] - 1);
    Tensor term = quant_bridge_loss(teacher_representatives_[j], proj_.w_1, proj_.w_2, reps[i]);
    bridge = bridge.defined() ? add(bridge, term) : term;
  }
  return add(weights, bridge);
}

LossBreakdown Distiller::step(std::span<const std::size_t> batch) {
  if (batch.empty()) throw ContractError("Distiller::step: empty batch");
  for (std::size_t idx : batch)
    if (idx >= src_.size()) throw ContractError("Distiller::step: example index out of range");
  ++step_;
  const double lr = lr_at(step_, config_);

  Tape tape;
  TotalLoss total;
  {
    TapeScope scope(tape);
    std::vector<DecoderOutput> outputs;
    outputs.reserve(batch.size());
    for (std::size_t idx : batch) {
      const Tensor enc = config_.freeze_encoder ? enc_cache_[idx] : encode(student_, src_[idx]).output;
      outputs.push_back(decode(student_, enc, dec_in_[idx]));
    }
    if (config_.strategy == Strategy::DM || config_.strategy == Strategy::RDM || config_.strategy == Strategy::DQ)
      maybe_refresh(outputs, batch);

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    const auto accumulate = [](Tensor& acc, const Tensor& t) { acc = acc.defined() ? add(acc, t) : t; };
    LossTerms terms;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::size_t idx = batch[b];
      accumulate(terms.ce, cross_entropy(outputs[b].logits, labels_[idx]));
      if (config_.strategy != Strategy::None)
        accumulate(terms.pred, pred_loss(teacher_cache_[idx].logits, outputs[b].logits, config_.weights.temperature,
                                         config_.weights.symmetric_temperature));
      if (uses_hidden())
        accumulate(terms.hidn,
                   hidden_loss(outputs[b].hiddens, teacher_cache_[idx].hiddens, *plan_, proj_.w_a, config_.weights));
    }
    terms.ce = scale(terms.ce, inv_b);
    if (terms.pred.defined()) terms.pred = scale(terms.pred, inv_b);
    if (terms.hidn.defined()) terms.hidn = scale(terms.hidn, inv_b);
    if (config_.strategy == Strategy::DQ) terms.quan = quantization_term();
    total = total_loss(terms, config_.weights);
  }
  if (!loss_identities_hold(total.breakdown, config_.weights))
    throw ContractError("loss identities violated at step " + std::to_string(step_));

  for (auto& p : trainables_) p.zero_grad();
  backward(total.objective, tape);
  tape.clear();
  clip_grad_norm(trainables_, config_.clip_norm);
  adam_.step(trainables_, lr);
  log_.steps.push_back({step_, lr, total.breakdown});
  return total.breakdown;
}

// ---------------------------------------------------------------------------
// Runs

TrainResult run_training(const TrainConfig& config, const Corpus& corpus, const SeqModel* teacher, SeqModel student) {
  Distiller run(config, corpus, teacher, std::move(student));
  std::vector<std::size_t> order(corpus.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(config.seed ^ 0x5eedULL);
  const auto bs = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t len = std::min(bs, order.size() - start);
      run.step(std::span<const std::size_t>(order).subspan(start, len));
    }
  }
  TrainResult result{run.student().clone(), run.projections().clone(), run.log()};
  result.student.set_trainable(false);
  return result;
}

TrainResult train_teacher(const TrainConfig& config, const Corpus& corpus, const ModelConfig& model_config) {
  TrainConfig c = config;
  c.strategy = Strategy::None;
  c.freeze_encoder = false;
  TrainResult r = run_training(c, corpus, nullptr, SeqModel::init(model_config, Role::Teacher, c.seed));
  r.student.role = Role::Teacher;
  r.student.provenance.strategy = "teacher";
  return r;
}

SeqModel finalize_quantized(const SeqModel& model, int bits, bool include_encoder) {
  // Scales are rounded to f32 up front so a q8 checkpoint reloads the exact
  // dequantized values.
  const ScaleRule f32_scale = [](std::span<const double> v, int b) {
    return static_cast<double>(static_cast<float>(max_abs_scale(v, b)));
  };
  SeqModel q = model.clone();
  for (const auto& name : quantizable_names(q.config, include_encoder)) {
    QuantizedTensor codes = quantize_tensor(q.params.get(name), bits, f32_scale);
    Tensor values = dequantize(codes);
    auto dst = q.params.get(name).mutable_values();
    std::copy(values.values().begin(), values.values().end(), dst.begin());
    q.quantized[name] = std::move(codes);
  }
  return q;
}

double model_quant_loss(const SeqModel& model, int bits) {
  const auto names = quantizable_names(model.config, false);
  double total = 0.0;
  for (const auto& name : names) total += quant_loss(model.params.get(name).detach(), bits).item();
  return total / static_cast<double>(names.size());
}

QuantKdResult run_quant_kd(TrainConfig config, const Corpus& corpus, const SeqModel& teacher, SeqModel student) {
  config.strategy = Strategy::RDM;
  QuantKdResult r;
  r.distilled = run_training(config, corpus, &teacher, std::move(student));
  r.post_hoc_quant_loss = model_quant_loss(r.distilled.student, config.bits);
  r.quantized = finalize_quantized(r.distilled.student, config.bits);
  r.quantized.provenance.strategy = "quant_kd";
  return r;
}

}  // namespace dq
