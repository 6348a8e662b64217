// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic transduction corpora: several "languages", each a
// fixed rule mapping a source symbol string to a target string, optionally
// with substitution noise on the source side.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "dq/errors.hpp"
#include "dq/vocab.hpp"

namespace dq {

enum class Rule { Copy, Reverse, Cipher, BigramLexicon };
std::string_view rule_name(Rule rule);
Rule parse_rule(std::string_view name);

struct LanguageSpec {
  int id = 0;
  std::string name;
  std::string alphabet;
  Rule rule = Rule::Copy;
  double noise_rate = 0.0;
  std::uint64_t rule_seed = 0;

  void validate() const;

  /// Clean source -> target. A pure function of (spec, clean).
  std::string transduce(std::string_view clean) const;

  /// Image of alphabet[i] under the substitution cipher.
  std::string cipher_table() const;
  /// Output symbol for (previous, current) at [prev * |alphabet| + cur].
  std::string bigram_table() const;

  bool operator==(const LanguageSpec&) const = default;
};

/// Four languages of increasing difficulty: copy, reverse, cipher, bigram.
std::vector<LanguageSpec> default_languages();

struct Example {
  int lang = 0;
  std::string source;  // as presented to the model (after noise)
  std::string target;
  bool operator==(const Example&) const = default;
};

enum class Split { Train, Dev, Test };
std::string_view split_name(Split split);

struct SplitSizes {
  int train = 500;
  int dev = 50;
  int test = 100;
};

struct LengthRange {
  int min = 4;
  int max = 16;
};

struct Corpus {
  std::vector<LanguageSpec> languages;
  std::vector<Example> train, dev, test;

  const std::vector<Example>& split(Split s) const;
  std::vector<Example>& split(Split s);
  const LanguageSpec& language(int id) const;
  bool operator==(const Corpus&) const = default;
};

/// Per-language counts exactly as requested; sources are distinct across all
/// splits of a language, so no test pair can occur in train.
Corpus gen_corpus(const std::vector<LanguageSpec>& specs, const SplitSizes& sizes, std::uint64_t seed,
                  const LengthRange& lengths = {});

/// [<lang>, symbols..., <eos>]
std::vector<int> source_tokens(const Example& ex);
/// [<bos>, symbols..., <eos>]
std::vector<int> target_tokens(const Example& ex);

/// Line format: lang_id<TAB>source<TAB>target
void write_examples(const std::filesystem::path& path, const std::vector<Example>& examples);
std::vector<Example> read_examples(const std::filesystem::path& path);

/// languages.json plus train.tsv / dev.tsv / test.tsv.
void save_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace dq
