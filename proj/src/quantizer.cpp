// SPDX-License-Identifier: Apache-2.0

#include "dq/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace dq {

std::int32_t max_level(int bits) {
  if (bits < 2 || bits > 30) throw ParameterError("quantization width must be in [2, 30] bits, got " + std::to_string(bits));
  return std::int32_t{1} << (bits - 1);
}

std::vector<std::int32_t> level_set(int bits) {
  const std::int32_t top = max_level(bits);
  std::vector<std::int32_t> levels;
  levels.reserve(static_cast<std::size_t>(2 * top + 1));
  for (std::int32_t c = -top; c <= top; ++c) levels.push_back(c);
  return levels;
}

double max_abs_scale(std::span<const double> values, int bits) {
  double m = 0.0;
  for (double v : values) m = std::max(m, std::fabs(v));
  return m / static_cast<double>(max_level(bits));
}

QuantizedTensor quantize_tensor(const Tensor& w, int bits, const ScaleRule& rule) {
  const std::int32_t top = max_level(bits);
  QuantizedTensor q;
  q.shape = w.shape();
  q.bits = bits;
  q.codes.assign(w.numel(), 0);
  const auto values = w.values();
  for (double v : values)
    if (!std::isfinite(v)) throw ParameterError("quantize_tensor: non-finite weight");
  q.scale = rule(values, bits);
  if (!(q.scale > 0.0)) {
    q.scale = 0.0;
    return q;
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double r = values[i] / q.scale;
    // ceil(|r| - 0.5) rounds to nearest with exact halves going toward zero.
    double mag = std::ceil(std::fabs(r) - 0.5);
    mag = std::min(mag, static_cast<double>(top));
    const auto code = static_cast<std::int32_t>(mag);
    q.codes[i] = r < 0.0 ? -code : code;
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  const std::int32_t top = max_level(q.bits);
  if (!(q.scale >= 0.0) || !std::isfinite(q.scale)) throw CorruptionError("dequantize: invalid scale");
  std::vector<double> values(q.codes.size());
  for (std::size_t i = 0; i < q.codes.size(); ++i) {
    if (q.codes[i] > top || q.codes[i] < -top)
      throw CorruptionError("dequantize: code " + std::to_string(q.codes[i]) + " outside the " +
                            std::to_string(q.bits) + "-bit level set");
    values[i] = q.scale * static_cast<double>(q.codes[i]);
  }
  return Tensor::from(q.shape, std::move(values));
}

Tensor fake_quantize(const Tensor& w, int bits) { return dequantize(quantize_tensor(w, bits)); }

Tensor quant_loss(const Tensor& w, int bits) {
  const Tensor q = fake_quantize(w, bits);
  return mean(abs(sub(w, q)));
}

}  // namespace dq
