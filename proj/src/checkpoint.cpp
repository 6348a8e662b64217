// SPDX-License-Identifier: Apache-2.0

#include "dq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace dq {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

enum : std::uint8_t { kCodeF64 = 0, kCodeF32 = 1, kCodeQ8 = 2 };

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

nlohmann::json config_json(const ModelConfig& c) {
  return {{"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers}, {"d_model", c.d_model},
          {"n_heads", c.n_heads},           {"d_ff", c.d_ff},                 {"vocab_size", c.vocab_size},
          {"max_len", c.max_len},           {"activation", c.activation == Activation::Gelu ? "gelu" : "relu"}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_enc_layers = j.at("n_enc_layers").get<int>();
  c.n_dec_layers = j.at("n_dec_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  const auto act = j.at("activation").get<std::string>();
  if (act != "gelu" && act != "relu") throw ConfigError("unknown activation '" + act + "'");
  c.activation = act == "gelu" ? Activation::Gelu : Activation::Relu;
  c.validate();
  return c;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what), sizeof(T));
    return v;
  }
  const char* take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError(CheckpointError::Kind::Truncated, std::string("checkpoint truncated while reading ") + what);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::string serialize(const SeqModel& model, StorageDtype dtype, bool report_clamps) {
  if (dtype == StorageDtype::Q8 && model.quantized.empty())
    throw ConfigError("q8 storage needs a quantized model (quantize it first)");
  nlohmann::json meta = {{"config", config_json(model.config)},
                         {"role", role_name(model.role)},
                         {"strategy", model.provenance.strategy},
                         {"seed", model.provenance.seed}};
  if (!model.quantized.empty()) meta["bits"] = model.quantized.begin()->second.bits;
  const std::string meta_text = meta.dump();

  std::string out = "DQWC";
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta_text.size()));
  out += meta_text;
  const auto& entries = model.params.entries();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  std::size_t clamped = 0;
  for (const auto& e : entries) {
    const QuantizedTensor* q = nullptr;
    if (dtype == StorageDtype::Q8)
      if (auto it = model.quantized.find(e.name); it != model.quantized.end() && it->second.bits <= 8) q = &it->second;
    const std::uint8_t code = q ? kCodeQ8 : (dtype == StorageDtype::F64 ? kCodeF64 : kCodeF32);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    put<std::uint8_t>(out, code);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(e.tensor.rank()));
    for (std::size_t d : e.tensor.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    if (code == kCodeQ8) {
      for (std::int32_t c : q->codes) {
        if (c > 127) ++clamped;
        put<std::int8_t>(out, static_cast<std::int8_t>(std::min(c, 127)));
      }
      put<float>(out, static_cast<float>(q->scale));
    } else if (code == kCodeF64) {
      for (double v : e.tensor.values()) put<double>(out, v);
    } else {
      for (double v : e.tensor.values()) put<float>(out, static_cast<float>(v));
    }
  }
  if (clamped > 0 && report_clamps) std::clog << "checkpoint: clamped " << clamped << " code(s) of +128 to +127 for int8 storage\n";
  return out;
}

}  // namespace

std::string serialize_checkpoint(const SeqModel& model, StorageDtype dtype) { return serialize(model, dtype, true); }

SeqModel deserialize_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (std::memcmp(bytes.data(), "DQWC", std::min<std::size_t>(bytes.size(), 4)) != 0)
    throw CheckpointError(CheckpointError::Kind::BadMagic, "not a checkpoint (bad magic)");
  in.take(4, "magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointError::Kind::BadVersion,
                          "unsupported checkpoint version " + std::to_string(version));
  const auto meta_len = in.get<std::uint32_t>("metadata length");
  const std::string meta_text(in.take(meta_len, "metadata"), meta_len);

  SeqModel model;
  int bits = 0;
  try {
    const auto meta = nlohmann::json::parse(meta_text);
    model = SeqModel::init(config_from_json(meta.at("config")), parse_role(meta.at("role").get<std::string>()), 0);
    model.provenance.strategy = meta.at("strategy").get<std::string>();
    model.provenance.seed = meta.at("seed").get<std::uint64_t>();
    if (meta.contains("bits")) bits = meta.at("bits").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointError::Kind::BadContent, std::string("bad checkpoint metadata: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(CheckpointError::Kind::BadContent, std::string("bad checkpoint metadata: ") + e.what());
  }

  const auto count = in.get<std::uint32_t>("tensor count");
  if (count != model.params.size())
    throw CheckpointError(CheckpointError::Kind::BadContent, "checkpoint has " + std::to_string(count) +
                                                                 " tensors, the configuration implies " +
                                                                 std::to_string(model.params.size()));
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name_len = in.get<std::uint16_t>("name length");
    const std::string name(in.take(name_len, "tensor name"), name_len);
    const auto code = in.get<std::uint8_t>("dtype");
    if (code > kCodeQ8)
      throw CheckpointError(CheckpointError::Kind::UnknownDtype,
                            "tensor '" + name + "' has unknown dtype code " + std::to_string(code));
    const auto rank = in.get<std::uint8_t>("rank");
    Shape shape;
    for (std::uint8_t r = 0; r < rank; ++r) shape.push_back(in.get<std::uint32_t>("extent"));
    if (!model.params.contains(name))
      throw CheckpointError(CheckpointError::Kind::BadContent, "unexpected tensor '" + name + "'");
    Tensor& dst = model.params.get(name);
    if (dst.shape() != shape)
      throw CheckpointError(CheckpointError::Kind::BadContent, "tensor '" + name + "' has shape " + shape_str(shape) +
                                                                   ", expected " + shape_str(dst.shape()));
    auto values = dst.mutable_values();
    if (code == kCodeQ8) {
      QuantizedTensor q;
      q.shape = shape;
      q.bits = bits > 0 ? bits : 8;
      const char* raw = in.take(values.size(), "q8 codes");
      for (std::size_t i = 0; i < values.size(); ++i) q.codes.push_back(static_cast<std::int8_t>(raw[i]));
      q.scale = static_cast<double>(in.get<float>("q8 scale"));
      const Tensor deq = dequantize(q);
      std::copy(deq.values().begin(), deq.values().end(), values.begin());
      model.quantized[name] = std::move(q);
    } else if (code == kCodeF64) {
      for (double& v : values) v = in.get<double>("f64 payload");
    } else {
      for (double& v : values) v = static_cast<double>(in.get<float>("f32 payload"));
    }
  }
  if (!in.done()) throw CheckpointError(CheckpointError::Kind::BadContent, "trailing bytes after the last tensor");
  return model;
}

void save_checkpoint(const SeqModel& model, const std::filesystem::path& path, StorageDtype dtype) {
  const std::string bytes = serialize_checkpoint(model, dtype);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

SeqModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

std::size_t serialized_size(const SeqModel& model, StorageDtype dtype) {
  return serialize(model, dtype, false).size();
}

}  // namespace dq
