// SPDX-License-Identifier: Apache-2.0

#include "dq/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <utility>

#include "dq/random.hpp"

namespace dq {

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
  const auto positive = [](int v, const char* what) {
    if (v < 1) throw ConfigError(std::string(what) + " must be >= 1, got " + std::to_string(v));
  };
  positive(n_enc_layers, "n_enc_layers");
  positive(n_dec_layers, "n_dec_layers");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(vocab_size, "vocab_size");
  positive(max_len, "max_len");
  if (d_model % n_heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
}

ModelConfig ModelConfig::desk_teacher() { return ModelConfig{}; }

ModelConfig ModelConfig::desk_student() {
  ModelConfig c;
  c.n_enc_layers = 2;
  c.n_dec_layers = 2;
  c.d_model = 32;
  c.n_heads = 4;
  c.d_ff = 64;
  return c;
}

ModelConfig ModelConfig::paper_scale(int vocab_size) {
  ModelConfig c;
  c.n_enc_layers = 12;
  c.n_dec_layers = 12;
  c.d_model = 768;
  c.n_heads = 12;
  c.d_ff = 3072;
  c.vocab_size = vocab_size;
  c.max_len = 448;
  return c;
}

std::string_view role_name(Role role) { return role == Role::Teacher ? "teacher" : "student"; }

Role parse_role(std::string_view name) {
  if (name == "teacher") return Role::Teacher;
  if (name == "student") return Role::Student;
  throw ConfigError("unknown model role '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Parameters

Tensor& ParamStore::add(std::string name, Tensor tensor) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(tensor)});
  return entries_.back().tensor;
}

bool ParamStore::contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

const Tensor& ParamStore::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("no parameter named '" + std::string(name) + "'");
  return entries_[it->second].tensor;
}

Tensor& ParamStore::get(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const ParamStore&>(*this).get(name));
}

std::size_t ParamStore::element_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.numel();
  return n;
}

namespace {

const char* const kAttnMatrices[] = {"wq", "wk", "wv", "wo"};
const char* const kAttnBiases[] = {"bq", "bk", "bv", "bo"};

std::string enc_layer(int l) { return "enc.layers." + std::to_string(l) + "."; }
std::string dec_layer(int l) { return "dec.layers." + std::to_string(l) + "."; }

struct Initializer {
  ParamStore& store;
  Rng& rng;

  void uniform(const std::string& name, Shape shape, double bound) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.mutable_values()) v = rng.uniform(-bound, bound);
    store.add(name, t);
  }
  void linear(const std::string& w, const std::string& b, std::size_t in, std::size_t out) {
    uniform(w, {in, out}, 1.0 / std::sqrt(static_cast<double>(in)));
    store.add(b, Tensor::zeros({out}));
  }
  void norm(const std::string& prefix, std::size_t d) {
    store.add(prefix + "g", Tensor::full({d}, 1.0));
    store.add(prefix + "b", Tensor::zeros({d}));
  }
  void attention(const std::string& prefix, std::size_t d) {
    for (int i = 0; i < 4; ++i) linear(prefix + kAttnMatrices[i], prefix + kAttnBiases[i], d, d);
  }
  void feed_forward(const std::string& prefix, std::size_t d, std::size_t f) {
    linear(prefix + "w1", prefix + "b1", d, f);
    linear(prefix + "w2", prefix + "b2", f, d);
  }
};

}  // namespace

SeqModel SeqModel::init(const ModelConfig& config, Role role, std::uint64_t seed) {
  config.validate();
  SeqModel m;
  m.config = config;
  m.role = role;
  m.provenance.seed = seed;
  Rng rng(seed);
  Initializer init{m.params, rng};
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto f = static_cast<std::size_t>(config.d_ff);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const double emb_bound = 1.0 / std::sqrt(static_cast<double>(d));

  init.uniform("enc.embed", {v, d}, emb_bound);
  for (int l = 0; l < config.n_enc_layers; ++l) {
    const auto p = enc_layer(l);
    init.norm(p + "ln1.", d);
    init.attention(p + "attn.", d);
    init.norm(p + "ln2.", d);
    init.feed_forward(p + "ff.", d, f);
  }
  init.norm("enc.ln_f.", d);

  init.uniform("dec.embed", {v, d}, emb_bound);
  for (int l = 0; l < config.n_dec_layers; ++l) {
    const auto p = dec_layer(l);
    init.norm(p + "ln1.", d);
    init.attention(p + "self_attn.", d);
    init.norm(p + "ln2.", d);
    init.attention(p + "cross_attn.", d);
    init.norm(p + "ln3.", d);
    init.feed_forward(p + "ff.", d, f);
  }
  init.norm("dec.ln_f.", d);
  return m;
}

SeqModel SeqModel::clone() const {
  SeqModel m;
  m.config = config;
  m.role = role;
  m.provenance = provenance;
  m.quantized = quantized;
  for (const auto& e : params.entries()) {
    Tensor t = e.tensor.clone();
    t.set_requires_grad(e.tensor.requires_grad());
    m.params.add(e.name, t);
  }
  return m;
}

void SeqModel::set_encoder_trainable(bool on) {
  for (auto& e : params.entries())
    if (e.name.rfind("enc.", 0) == 0) e.tensor.set_requires_grad(on);
}

void SeqModel::set_trainable(bool on) {
  for (auto& e : params.entries()) e.tensor.set_requires_grad(on);
}

std::size_t param_count(const ModelConfig& c) {
  c.validate();
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t f = static_cast<std::size_t>(c.d_ff);
  const std::size_t v = static_cast<std::size_t>(c.vocab_size);
  const std::size_t attn = 4 * d * d + 4 * d;
  const std::size_t ff = 2 * d * f + f + d;
  const std::size_t norm = 2 * d;
  const std::size_t enc_block = attn + ff + 2 * norm;
  const std::size_t dec_block = 2 * attn + ff + 3 * norm;
  return 2 * v * d + static_cast<std::size_t>(c.n_enc_layers) * enc_block +
         static_cast<std::size_t>(c.n_dec_layers) * dec_block + 2 * norm;
}

std::vector<std::string> linear_weight_names(const ModelConfig& c, bool include_encoder) {
  std::vector<std::string> names;
  if (include_encoder)
    for (int l = 0; l < c.n_enc_layers; ++l) {
      for (const char* w : kAttnMatrices) names.push_back(enc_layer(l) + "attn." + w);
      names.push_back(enc_layer(l) + "ff.w1");
      names.push_back(enc_layer(l) + "ff.w2");
    }
  for (int l = 0; l < c.n_dec_layers; ++l) {
    for (const char* w : kAttnMatrices) names.push_back(dec_layer(l) + "self_attn." + w);
    for (const char* w : kAttnMatrices) names.push_back(dec_layer(l) + "cross_attn." + w);
    names.push_back(dec_layer(l) + "ff.w1");
    names.push_back(dec_layer(l) + "ff.w2");
  }
  return names;
}

std::vector<std::string> quantizable_names(const ModelConfig& c, bool include_encoder) {
  std::vector<std::string> names;
  const auto add_linear = [&](const std::string& prefix, const char* const* ws, const char* const* bs, int n) {
    for (int i = 0; i < n; ++i) {
      names.push_back(prefix + ws[i]);
      names.push_back(prefix + bs[i]);
    }
  };
  const char* const ff_w[] = {"w1", "w2"};
  const char* const ff_b[] = {"b1", "b2"};
  if (include_encoder) {
    names.push_back("enc.embed");
    for (int l = 0; l < c.n_enc_layers; ++l) {
      add_linear(enc_layer(l) + "attn.", kAttnMatrices, kAttnBiases, 4);
      add_linear(enc_layer(l) + "ff.", ff_w, ff_b, 2);
    }
  }
  names.push_back("dec.embed");
  for (int l = 0; l < c.n_dec_layers; ++l) {
    add_linear(dec_layer(l) + "self_attn.", kAttnMatrices, kAttnBiases, 4);
    add_linear(dec_layer(l) + "cross_attn.", kAttnMatrices, kAttnBiases, 4);
    add_linear(dec_layer(l) + "ff.", ff_w, ff_b, 2);
  }
  return names;
}

std::string representative_weight_name(int layer, bool encoder) {
  return (encoder ? enc_layer(layer) : dec_layer(layer)) + "ff.w1";
}

// ---------------------------------------------------------------------------
// Forward pass

namespace {

const Tensor& positional_encoding(std::size_t len, std::size_t d) {
  thread_local std::map<std::pair<std::size_t, std::size_t>, Tensor> cache;
  auto key = std::make_pair(len, d);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  std::vector<double> pe(len * d);
  for (std::size_t pos = 0; pos < len; ++pos)
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe[pos * d + i] = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d) pe[pos * d + i + 1] = std::cos(static_cast<double>(pos) * freq);
    }
  return cache.emplace(key, Tensor::from({len, d}, std::move(pe))).first->second;
}

Tensor embed(const Tensor& table, std::span<const int> ids) {
  const std::size_t d = table.dim(1);
  Tensor x = scale(embedding_lookup(table, ids), std::sqrt(static_cast<double>(d)));
  return add(x, positional_encoding(ids.size(), d));
}

Tensor norm(const ParamStore& p, const std::string& prefix, const Tensor& x) {
  return layer_norm(x, p.get(prefix + "g"), p.get(prefix + "b"));
}

Tensor proj(const ParamStore& p, const std::string& prefix, const char* w, const char* b, const Tensor& x) {
  return linear(x, p.get(prefix + w), p.get(prefix + b));
}

Tensor self_attention(const ParamStore& p, const std::string& prefix, const Tensor& x, std::size_t heads,
                      bool causal) {
  Tensor q = proj(p, prefix, "wq", "bq", x);
  Tensor k = proj(p, prefix, "wk", "bk", x);
  Tensor v = proj(p, prefix, "wv", "bv", x);
  return proj(p, prefix, "wo", "bo", attention(q, k, v, heads, causal));
}

Tensor feed_forward(const ParamStore& p, const std::string& prefix, const Tensor& x, Activation act) {
  return proj(p, prefix, "w2", "b2", activate(proj(p, prefix, "w1", "b1", x), act));
}

}  // namespace

void check_tokens(const ModelConfig& config, std::span<const int> ids, const char* what) {
  if (ids.empty()) throw ConfigError(std::string(what) + " sequence is empty");
  if (ids.size() > static_cast<std::size_t>(config.max_len))
    throw ConfigError(std::string(what) + " length " + std::to_string(ids.size()) + " exceeds max_len " +
                      std::to_string(config.max_len));
  for (int id : ids)
    if (id < 0 || id >= config.vocab_size)
      throw VocabularyError(std::string(what) + " token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(config.vocab_size));
}

EncoderOutput encode(const SeqModel& model, std::span<const int> src_tokens) {
  const auto& c = model.config;
  const auto& p = model.params;
  check_tokens(c, src_tokens, "source");
  const auto heads = static_cast<std::size_t>(c.n_heads);
  EncoderOutput out;
  Tensor x = embed(p.get("enc.embed"), src_tokens);
  for (int l = 0; l < c.n_enc_layers; ++l) {
    const auto pre = enc_layer(l);
    x = add(x, self_attention(p, pre + "attn.", norm(p, pre + "ln1.", x), heads, false));
    x = add(x, feed_forward(p, pre + "ff.", norm(p, pre + "ln2.", x), c.activation));
    out.hiddens.push_back(x);
  }
  out.output = norm(p, "enc.ln_f.", x);
  return out;
}

DecoderOutput decode(const SeqModel& model, const Tensor& encoder_output, std::span<const int> tgt_tokens) {
  const auto& c = model.config;
  const auto& p = model.params;
  check_tokens(c, tgt_tokens, "target");
  if (encoder_output.rank() != 2 || encoder_output.dim(1) != static_cast<std::size_t>(c.d_model))
    throw DimensionError("decode: encoder output " + shape_str(encoder_output.shape()) + " does not match d_model");
  const auto heads = static_cast<std::size_t>(c.n_heads);
  DecoderOutput out;
  const Tensor& table = p.get("dec.embed");
  Tensor y = embed(table, tgt_tokens);
  for (int l = 0; l < c.n_dec_layers; ++l) {
    const auto pre = dec_layer(l);
    y = add(y, self_attention(p, pre + "self_attn.", norm(p, pre + "ln1.", y), heads, true));
    {
      const auto xa = pre + "cross_attn.";
      Tensor q = proj(p, xa, "wq", "bq", norm(p, pre + "ln2.", y));
      Tensor k = proj(p, xa, "wk", "bk", encoder_output);
      Tensor v = proj(p, xa, "wv", "bv", encoder_output);
      y = add(y, proj(p, xa, "wo", "bo", attention(q, k, v, heads, false)));
    }
    y = add(y, feed_forward(p, pre + "ff.", norm(p, pre + "ln3.", y), c.activation));
    out.hiddens.push_back(y);
  }
  out.logits = matmul(norm(p, "dec.ln_f.", y), transpose(table));
  return out;
}

LayerActivations forward_with_hiddens(const SeqModel& model, std::span<const int> src_tokens,
                                      std::span<const int> tgt_tokens) {
  check_tokens(model.config, tgt_tokens, "target");
  EncoderOutput enc = encode(model, src_tokens);
  DecoderOutput dec = decode(model, enc.output, tgt_tokens);
  return {std::move(enc.hiddens), std::move(dec.hiddens), std::move(dec.logits)};
}

namespace {

Tensor row_of(const Tensor& t, std::size_t i) {
  const std::size_t d = t.dim(1);
  const auto v = t.values().subspan(i * d, d);
  return Tensor::from({1, d}, std::vector<double>(v.begin(), v.end()));
}

void append_row(std::vector<double>& rows, const Tensor& row) {
  rows.insert(rows.end(), row.values().begin(), row.values().end());
}

}  // namespace

std::vector<int> greedy_decode(const SeqModel& model, std::span<const int> src_tokens, int max_steps,
                               const DecodeOptions& options) {
  std::vector<int> hypothesis;
  if (max_steps <= 0) return hypothesis;
  const auto& c = model.config;
  const auto& p = model.params;
  const EncoderOutput enc = encode(model, src_tokens);
  const auto heads = static_cast<std::size_t>(c.n_heads);
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto layers = static_cast<std::size_t>(c.n_dec_layers);
  const int limit = std::min(max_steps, c.max_len);

  // Causal attention makes earlier rows independent of later tokens, so each
  // step only runs the newest row against cached keys and values. Row-wise
  // arithmetic is identical to a full teacher-forced pass.
  std::vector<Tensor> cross_k, cross_v;
  for (std::size_t l = 0; l < layers; ++l) {
    const auto xa = dec_layer(static_cast<int>(l)) + "cross_attn.";
    cross_k.push_back(proj(p, xa, "wk", "bk", enc.output));
    cross_v.push_back(proj(p, xa, "wv", "bv", enc.output));
  }
  std::vector<std::vector<double>> self_k(layers), self_v(layers);
  const Tensor& table = p.get("dec.embed");
  const Tensor table_t = transpose(table);
  const Tensor& pe = positional_encoding(static_cast<std::size_t>(limit), d);

  int token = options.bos;
  for (int step = 0; step < limit; ++step) {
    check_tokens(c, std::span<const int>(&token, 1), "target");
    const int ids[] = {token};
    Tensor y = add(scale(embedding_lookup(table, ids), std::sqrt(static_cast<double>(d))),
                   row_of(pe, static_cast<std::size_t>(step)));
    const std::size_t len = static_cast<std::size_t>(step) + 1;
    for (std::size_t l = 0; l < layers; ++l) {
      const auto pre = dec_layer(static_cast<int>(l));
      {
        const auto sa = pre + "self_attn.";
        const Tensor h = norm(p, pre + "ln1.", y);
        const Tensor q = proj(p, sa, "wq", "bq", h);
        append_row(self_k[l], proj(p, sa, "wk", "bk", h));
        append_row(self_v[l], proj(p, sa, "wv", "bv", h));
        const Tensor k = Tensor::from({len, d}, self_k[l]);
        const Tensor v = Tensor::from({len, d}, self_v[l]);
        y = add(y, proj(p, sa, "wo", "bo", attention(q, k, v, heads, false)));
      }
      {
        const auto xa = pre + "cross_attn.";
        const Tensor q = proj(p, xa, "wq", "bq", norm(p, pre + "ln2.", y));
        y = add(y, proj(p, xa, "wo", "bo", attention(q, cross_k[l], cross_v[l], heads, false)));
      }
      y = add(y, feed_forward(p, pre + "ff.", norm(p, pre + "ln3.", y), c.activation));
    }
    const Tensor logits = matmul(norm(p, "dec.ln_f.", y), table_t);
    const auto row = logits.values();
    // First maximum wins, which breaks ties toward the lowest id.
    const int best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == options.eos) break;
    hypothesis.push_back(best);
    token = best;
  }
  return hypothesis;
}

std::string_view dtype_name(StorageDtype dtype) {
  switch (dtype) {
    case StorageDtype::F64: return "f64";
    case StorageDtype::F32: return "f32";
    case StorageDtype::Q8: return "q8";
  }
  return "?";
}

StorageDtype parse_dtype(std::string_view name) {
  if (name == "f64") return StorageDtype::F64;
  if (name == "f32") return StorageDtype::F32;
  if (name == "q8") return StorageDtype::Q8;
  throw ConfigError("unknown storage dtype '" + std::string(name) + "'");
}

}  // namespace dq
