// SPDX-License-Identifier: Apache-2.0
//
// Character tokenizer. Special tokens occupy a fixed block of low ids that
// never changes between runs:
//
//   0 <pad>  1 <bos>  2 <eos>  3..10 <lang0>..<lang7>  11..36 'a'..'z'

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dq::vocab {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kFirstLanguage = 3;
inline constexpr int kMaxLanguages = 8;
inline constexpr int kFirstSymbol = kFirstLanguage + kMaxLanguages;
inline constexpr std::string_view kSymbols = "abcdefghijklmnopqrstuvwxyz";
inline constexpr int kSize = kFirstSymbol + static_cast<int>(kSymbols.size());

/// Token id of language `lang` (0-based).
int language_token(int lang);
bool is_special(int id);
bool is_symbol(char c);

int symbol_id(char c);
char id_symbol(int id);

/// Symbol ids without any specials.
std::vector<int> encode_symbols(std::string_view text);

/// [BOS, symbols..., EOS]; the empty string encodes to [BOS, EOS].
std::vector<int> tokenize(std::string_view text);

/// Symbols of `ids` with every special token dropped.
std::string detokenize(std::span<const int> ids);

/// Printable form of any id, specials included (for logs).
std::string token_name(int id);

}  // namespace dq::vocab
