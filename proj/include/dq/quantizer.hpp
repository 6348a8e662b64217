// SPDX-License-Identifier: Apache-2.0
//
// n-bit uniform weight quantization with one scale per tensor. The integer
// level set is {0, ±1, ..., ±2^(n-1)}: 2^n + 1 levels, both extremes
// included, so an n-bit tensor spans exactly [-alpha·2^(n-1), alpha·2^(n-1)].

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dq/tensor.hpp"

namespace dq {

struct QuantizedTensor {
  Shape shape;
  int bits = 8;
  double scale = 0.0;  // alpha
  std::vector<std::int32_t> codes;

  bool operator==(const QuantizedTensor&) const = default;
};

/// Largest code magnitude, 2^(bits-1). Throws ParameterError for bits < 2.
std::int32_t max_level(int bits);

/// Sorted level set {-2^(n-1), ..., -1, 0, 1, ..., 2^(n-1)}.
std::vector<std::int32_t> level_set(int bits);

/// Picks alpha for a tensor. The default maps max|W| onto the outermost level.
using ScaleRule = std::function<double(std::span<const double> values, int bits)>;
double max_abs_scale(std::span<const double> values, int bits);

/// Nearest level for each element of W/alpha, ties toward zero. An all-zero
/// tensor gets alpha = 0 and all-zero codes.
QuantizedTensor quantize_tensor(const Tensor& w, int bits, const ScaleRule& rule = max_abs_scale);

/// alpha × codes. Throws CorruptionError for codes outside the level set.
Tensor dequantize(const QuantizedTensor& q);

/// dequantize(quantize_tensor(w, bits)) as a plain tensor.
Tensor fake_quantize(const Tensor& w, int bits);

/// mean|W - Q(W)|. Differentiable in W with Q(W) held constant, so the
/// gradient is sign(W - Q(W)) / numel.
Tensor quant_loss(const Tensor& w, int bits);

}  // namespace dq
