// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>

namespace dq {

/// Operand extents do not line up.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke an API precondition (non-scalar loss, missing grad, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid model / training / corpus configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Out-of-range hyperparameter (bit width, temperature, sizes).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Token id or symbol outside the vocabulary.
class VocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Labels and logits do not line up.
class AlignmentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Stored data violates its own invariants (e.g. a code outside the level set).
class CorruptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A metric was requested on inputs where it is not defined.
class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

}  // namespace dq
