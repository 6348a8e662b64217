// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dq/data.hpp"
#include "dq/model.hpp"

namespace dq {

/// Unit-cost Levenshtein distance.
std::size_t edit_distance(std::span<const int> hypothesis, std::span<const int> reference);
std::size_t edit_distance(std::string_view hypothesis, std::string_view reference);

/// edit_distance / |reference|; may exceed 1. Throws UndefinedMetricError for
/// an empty reference.
double cer(std::span<const int> hypothesis, std::span<const int> reference);
double cer(std::string_view hypothesis, std::string_view reference);

/// reference / model rounded to two decimals. Throws ParameterError for a
/// non-positive size.
double compression_ratio(double reference_bytes, double model_bytes);

struct LanguageScore {
  int lang = 0;
  std::string name;
  std::size_t utterances = 0;
  std::size_t edits = 0;
  std::size_t reference_symbols = 0;
  double cer = 0.0;  // edits / reference_symbols, pooled over the language
  bool operator==(const LanguageScore&) const = default;
};

struct EvalReport {
  std::string strategy;
  int bits = 0;  // 0 for real-valued weights
  std::uint64_t seed = 0;
  std::vector<LanguageScore> languages;  // ordered by language id
  double avg_cer = 0.0;                  // unweighted mean of the per-language CERs
  std::size_t model_bytes = 0;
  std::size_t reference_bytes = 0;
  double compression = 0.0;

  bool operator==(const EvalReport&) const = default;
};

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);

/// Keyed columns first: strategy,bits,seed, then the measurements.
std::string results_csv_header();
std::string report_to_csv_row(const EvalReport& report);
EvalReport report_from_csv_row(const std::string& row);

struct EvalOptions {
  int max_steps = 0;  // 0: the model's max_len - 1
  /// Size of the model the compression ratio refers to; 0 uses model_bytes.
  std::size_t reference_bytes = 0;
};

/// Greedy-decodes every example of `split` and scores it. Model bytes come
/// from serialized_size() in q8 when the model carries quantized codes,
/// f32 otherwise.
EvalReport evaluate(const SeqModel& model, const Corpus& corpus, Split split, const EvalOptions& options = {});

/// Appends one row to `path`, writing the header first if the file is new.
/// Holds an exclusive advisory lock while writing; fails fast if another
/// writer holds it.
void append_results_row(const std::filesystem::path& path, const EvalReport& report);
std::vector<EvalReport> read_results_csv(const std::filesystem::path& path);

struct SummaryRow {
  std::string strategy;
  int bits = 0;
  std::size_t runs = 0;
  double avg_cer = 0.0;       // mean over runs
  double size_bytes = 0.0;    // mean over runs
  double compression = 0.0;
};

/// Groups rows by (strategy, bits) in first-appearance order and averages.
std::vector<SummaryRow> summarize(const std::vector<EvalReport>& reports);
std::string summary_csv(const std::vector<SummaryRow>& rows);
std::string summary_table(const std::vector<SummaryRow>& rows);

}  // namespace dq
