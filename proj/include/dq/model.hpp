// SPDX-License-Identifier: Apache-2.0
//
// Whisper-shaped encoder-decoder transformer (pre-norm blocks, sinusoidal
// positions, decoder output tied to the decoder token embedding) that exposes
// the residual stream after every block.

#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dq/quantizer.hpp"
#include "dq/tensor.hpp"
#include "dq/vocab.hpp"

namespace dq {

struct ModelConfig {
  int n_enc_layers = 4;
  int n_dec_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 128;
  int vocab_size = vocab::kSize;
  int max_len = 32;
  Activation activation = Activation::Gelu;

  /// Throws ConfigError on non-positive counts or d_model % n_heads != 0.
  void validate() const;

  static ModelConfig desk_teacher();
  static ModelConfig desk_student();
  /// 12/12 layers, width 768, 12 heads, FF 3072.
  static ModelConfig paper_scale(int vocab_size);

  bool operator==(const ModelConfig&) const = default;
};

enum class Role { Teacher, Student };
std::string_view role_name(Role role);
Role parse_role(std::string_view name);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered, uniquely named parameter tensors.
class ParamStore {
 public:
  Tensor& add(std::string name, Tensor tensor);
  bool contains(std::string_view name) const;
  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);

  std::size_t size() const { return entries_.size(); }
  std::size_t element_count() const;
  const std::vector<NamedTensor>& entries() const { return entries_; }
  std::vector<NamedTensor>& entries() { return entries_; }

 private:
  std::vector<NamedTensor> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Provenance {
  std::string strategy = "none";
  std::uint64_t seed = 0;
  bool operator==(const Provenance&) const = default;
};

struct SeqModel {
  ModelConfig config;
  Role role = Role::Student;
  ParamStore params;
  Provenance provenance;
  /// Integer codes of hard-quantized weights; their float values in `params`
  /// are the dequantized ones.
  std::map<std::string, QuantizedTensor> quantized;

  /// Seeded symmetric-uniform initialization (bound 1/sqrt(fan_in)).
  static SeqModel init(const ModelConfig& config, Role role, std::uint64_t seed);

  /// Deep copy; the copy shares no storage with this model.
  SeqModel clone() const;

  /// Toggles requires_grad on every encoder parameter (enc.*).
  void set_encoder_trainable(bool on);
  void set_trainable(bool on);
};

/// Closed-form parameter count implied by a configuration.
std::size_t param_count(const ModelConfig& config);

/// Names of every attention / feed-forward projection matrix, in parameter
/// order.
std::vector<std::string> linear_weight_names(const ModelConfig& config, bool include_encoder = true);

/// Everything stored as integer codes in a quantized model: the token
/// embeddings (the decoder's doubles as the output projection) and the
/// weight and bias of every projection. Layer norms stay real-valued.
std::vector<std::string> quantizable_names(const ModelConfig& config, bool include_encoder = true);

/// Name of the weight that stands for decoder (or encoder) block `layer` when
/// comparing teacher and student weights: the first feed-forward projection.
std::string representative_weight_name(int layer, bool encoder = false);

struct EncoderOutput {
  std::vector<Tensor> hiddens;  // one [src_len × d] per block
  Tensor output;                // final-norm output fed to cross-attention
};

struct DecoderOutput {
  std::vector<Tensor> hiddens;  // one [tgt_len × d] per block
  Tensor logits;                // [tgt_len × vocab]
};

struct LayerActivations {
  std::vector<Tensor> encoder_hiddens;
  std::vector<Tensor> decoder_hiddens;
  Tensor logits;
};

/// Checks ids against the vocabulary and the length against max_len.
void check_tokens(const ModelConfig& config, std::span<const int> ids, const char* what);

EncoderOutput encode(const SeqModel& model, std::span<const int> src_tokens);
/// Teacher-forced decoder pass over `tgt_tokens` against a precomputed
/// encoder output. Causal self-attention.
DecoderOutput decode(const SeqModel& model, const Tensor& encoder_output, std::span<const int> tgt_tokens);

LayerActivations forward_with_hiddens(const SeqModel& model, std::span<const int> src_tokens,
                                      std::span<const int> tgt_tokens);

struct DecodeOptions {
  int bos = vocab::kBos;
  int eos = vocab::kEos;
};

/// Argmax decoding (ties to the lowest id) until EOS or `max_steps` tokens.
/// The returned list excludes BOS and EOS.
std::vector<int> greedy_decode(const SeqModel& model, std::span<const int> src_tokens, int max_steps,
                               const DecodeOptions& options = {});

enum class StorageDtype { F64, F32, Q8 };
std::string_view dtype_name(StorageDtype dtype);
StorageDtype parse_dtype(std::string_view name);

/// Exact byte size of the checkpoint save_checkpoint() would write.
std::size_t serialized_size(const SeqModel& model, StorageDtype dtype);

}  // namespace dq
