// SPDX-License-Identifier: Apache-2.0
//
// Training loop: Adam with linear warmup, frozen teacher, optional frozen
// student encoder, per-window matching refresh and the joint quantization
// term. Steps are numbered from 1; step s trains with lr_at(s).

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dq/data.hpp"
#include "dq/losses.hpp"
#include "dq/matcher.hpp"
#include "dq/model.hpp"

namespace dq {

enum class Strategy { None, Logits, DM, RDM, DQ };
std::string_view strategy_name(Strategy s);
/// Throws ConfigError for anything but none/logits/dm/rdm/dq.
Strategy parse_strategy(std::string_view name);

struct TrainConfig {
  Strategy strategy = Strategy::RDM;
  int epochs = 20;
  int batch_size = 16;
  double peak_lr = 1e-3;
  int warmup_steps = 500;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int bits = 8;
  bool freeze_encoder = true;
  int refresh_interval = 0;  // steps; 0 means once per epoch
  bool monotone_quant = false;
  std::uint64_t seed = 0;
  LossWeights weights;

  void validate() const;
};

/// peak_lr · min(step, warmup) / warmup.
double lr_at(long step, const TrainConfig& config);

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update of a flat parameter block; `t` is the
/// 1-based step count.
void adam_update(std::span<double> w, std::span<const double> g, std::span<double> m, std::span<double> v, long t,
                 double lr, const AdamHyper& hyper = {});

class Adam {
 public:
  explicit Adam(AdamHyper hyper = {}) : hyper_(hyper) {}

  /// Updates every tensor from its gradient. The parameter list must be the
  /// same (same order, same shapes) on every call. Throws ContractError for
  /// a parameter without a gradient or a changed list.
  void step(const std::vector<Tensor>& params, double lr);
  long steps() const { return t_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  AdamHyper hyper_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Rescales gradients so their global L2 norm is at most max_norm. Returns
/// the norm before clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

struct StepRecord {
  long step = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<MatchingPlan> plans;
};

/// kind,step,lr,l_pred,l_hidn,l_kd,l_quan,l_ce,l_model,strategy,mapping
void write_metrics_csv(const std::filesystem::path& path, const TrainLog& log);

/// Teacher activations on one training example; constants during distillation.
struct TeacherTrace {
  std::vector<Tensor> hiddens;
  Tensor logits;
};

/// Owns the student, the projections and the optimizer for one training run.
class Distiller {
 public:
  /// `teacher` may be null only for Strategy::None. The teacher is never
  /// modified; the student is deep-copied, so the caller's model is untouched.
  Distiller(const TrainConfig& config, const Corpus& corpus, const SeqModel* teacher, SeqModel student);

  /// Forward, loss, backward and one Adam update over train examples `batch`.
  LossBreakdown step(std::span<const std::size_t> batch);

  long steps_done() const { return step_; }
  long refresh_interval() const { return interval_; }
  const SeqModel& student() const { return student_; }
  SeqModel& student() { return student_; }
  const MatchProjections& projections() const { return proj_; }
  const std::optional<MatchingPlan>& plan() const { return plan_; }
  const TrainLog& log() const { return log_; }

 private:
  bool uses_hidden() const;
  void maybe_refresh(const std::vector<DecoderOutput>& outputs, std::span<const std::size_t> batch);
  Tensor quantization_term();
  std::vector<QuantizedTensor> student_representatives() const;

  TrainConfig config_;
  const Corpus& corpus_;
  const SeqModel* teacher_;
  SeqModel student_;
  MatchProjections proj_;
  Adam adam_;
  long step_ = 0;
  long interval_ = 1;
  std::optional<MatchingPlan> plan_;
  CostAccumulator window_;
  TrainLog log_;

  std::vector<std::vector<int>> src_, dec_in_, labels_;
  std::vector<Tensor> enc_cache_;  // frozen student encoder outputs
  std::vector<TeacherTrace> teacher_cache_;
  std::vector<Tensor> teacher_representatives_;
  std::vector<std::string> quant_names_;  // trainable quantizable tensors
  std::vector<Tensor> trainables_;
};

struct TrainResult {
  SeqModel student;
  MatchProjections projections;
  TrainLog log;
};

/// Seeded epochs of shuffled minibatches. Throws ConfigError when the corpus
/// does not fit the model (vocabulary, language ids, lengths).
TrainResult run_training(const TrainConfig& config, const Corpus& corpus, const SeqModel* teacher, SeqModel student);

/// Supervised training of a fresh teacher (strategy NONE, encoder trainable).
TrainResult train_teacher(const TrainConfig& config, const Corpus& corpus, const ModelConfig& model_config);

/// Hard-quantizes every tensor in quantizable_names(): parameters become the
/// dequantized values and the integer codes are kept in `quantized`.
SeqModel finalize_quantized(const SeqModel& model, int bits, bool include_encoder = true);

/// Mean over the decoder's quantizable tensors of quant_loss at `bits`.
double model_quant_loss(const SeqModel& model, int bits);

/// Separate compression baseline: RDM distillation, then post-training quantization.
struct QuantKdResult {
  TrainResult distilled;
  SeqModel quantized;
  double post_hoc_quant_loss = 0.0;
};
QuantKdResult run_quant_kd(TrainConfig config, const Corpus& corpus, const SeqModel& teacher, SeqModel student);

/// Fails with ConfigError if the corpus cannot be fed to a model of `config`.
void check_corpus_fits(const Corpus& corpus, const ModelConfig& config);

}  // namespace dq
