// SPDX-License-Identifier: Apache-2.0

#include "dq/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dq/random.hpp"

namespace dq {

// ---------------------------------------------------------------------------
// Tokenizer

namespace vocab {

int language_token(int lang) {
  if (lang < 0 || lang >= kMaxLanguages) throw VocabularyError("language index " + std::to_string(lang) + " out of range");
  return kFirstLanguage + lang;
}

bool is_special(int id) { return id >= 0 && id < kFirstSymbol; }

bool is_symbol(char c) { return kSymbols.find(c) != std::string_view::npos; }

int symbol_id(char c) {
  const auto pos = kSymbols.find(c);
  if (pos == std::string_view::npos) throw VocabularyError(std::string("unknown symbol '") + c + "'");
  return kFirstSymbol + static_cast<int>(pos);
}

char id_symbol(int id) {
  if (id < kFirstSymbol || id >= kSize) throw VocabularyError("token id " + std::to_string(id) + " is not a symbol");
  return kSymbols[static_cast<std::size_t>(id - kFirstSymbol)];
}

std::vector<int> encode_symbols(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(symbol_id(c));
  return ids;
}

std::vector<int> tokenize(std::string_view text) {
  std::vector<int> ids{kBos};
  for (char c : text) ids.push_back(symbol_id(c));
  ids.push_back(kEos);
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= kSize) throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
    if (!is_special(id)) out.push_back(id_symbol(id));
  }
  return out;
}

std::string token_name(int id) {
  if (id == kPad) return "<pad>";
  if (id == kBos) return "<bos>";
  if (id == kEos) return "<eos>";
  if (id >= kFirstLanguage && id < kFirstSymbol) return "<lang" + std::to_string(id - kFirstLanguage) + ">";
  return std::string(1, id_symbol(id));
}

}  // namespace vocab

// ---------------------------------------------------------------------------
// Languages

std::string_view rule_name(Rule rule) {
  switch (rule) {
    case Rule::Copy: return "copy";
    case Rule::Reverse: return "reverse";
    case Rule::Cipher: return "cipher";
    case Rule::BigramLexicon: return "bigram";
  }
  return "?";
}

Rule parse_rule(std::string_view name) {
  if (name == "copy") return Rule::Copy;
  if (name == "reverse") return Rule::Reverse;
  if (name == "cipher") return Rule::Cipher;
  if (name == "bigram") return Rule::BigramLexicon;
  throw ConfigError("unknown transduction rule '" + std::string(name) + "'");
}

void LanguageSpec::validate() const {
  if (id < 0 || id >= vocab::kMaxLanguages) throw ConfigError("language id " + std::to_string(id) + " out of range");
  if (alphabet.size() < 2) throw ConfigError("language '" + name + "' needs at least two symbols");
  std::set<char> seen;
  for (char c : alphabet) {
    if (!vocab::is_symbol(c))
      throw ConfigError("language '" + name + "' uses symbol '" + std::string(1, c) + "' missing from the vocabulary");
    if (!seen.insert(c).second) throw ConfigError("language '" + name + "' repeats symbol '" + std::string(1, c) + "'");
  }
  if (!(noise_rate >= 0.0 && noise_rate < 1.0)) throw ConfigError("noise rate must be in [0, 1)");
}

std::string LanguageSpec::cipher_table() const {
  std::string perm = alphabet;
  Rng rng(rule_seed);
  rng.shuffle(perm);
  return perm;
}

std::string LanguageSpec::bigram_table() const {
  const std::size_t a = alphabet.size();
  std::string table(a * a, alphabet[0]);
  Rng rng(rule_seed ^ 0x9e3779b97f4a7c15ULL);
  for (auto& c : table) c = alphabet[rng.index(a)];
  return table;
}

std::string LanguageSpec::transduce(std::string_view clean) const {
  switch (rule) {
    case Rule::Copy: return std::string(clean);
    case Rule::Reverse: return std::string(clean.rbegin(), clean.rend());
    case Rule::Cipher: {
      const std::string perm = cipher_table();
      std::string out;
      for (char c : clean) out.push_back(perm[alphabet.find(c)]);
      return out;
    }
    case Rule::BigramLexicon: {
      // Each output symbol depends on the current and the previous input
      // symbol; the first symbol pairs with itself.
      const std::string table = bigram_table();
      const std::size_t a = alphabet.size();
      std::string out;
      for (std::size_t i = 0; i < clean.size(); ++i) {
        const std::size_t prev = alphabet.find(clean[i == 0 ? 0 : i - 1]);
        const std::size_t cur = alphabet.find(clean[i]);
        out.push_back(table[prev * a + cur]);
      }
      return out;
    }
  }
  return {};
}

std::vector<LanguageSpec> default_languages() {
  return {
      {0, "copy", "abcdefghijkl", Rule::Copy, 0.0, 101},
      {1, "reverse", "abcdefghijkl", Rule::Reverse, 0.0, 202},
      {2, "cipher", "efghijklmnop", Rule::Cipher, 0.0, 303},
      {3, "bigram", "abcdef", Rule::BigramLexicon, 0.0, 404},
  };
}

// ---------------------------------------------------------------------------
// Corpus

std::string_view split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
  }
  return "?";
}

const std::vector<Example>& Corpus::split(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Dev: return dev;
    case Split::Test: return test;
  }
  return train;
}

std::vector<Example>& Corpus::split(Split s) {
  return const_cast<std::vector<Example>&>(static_cast<const Corpus&>(*this).split(s));
}

const LanguageSpec& Corpus::language(int id) const {
  for (const auto& l : languages)
    if (l.id == id) return l;
  throw ConfigError("corpus has no language " + std::to_string(id));
}

Corpus gen_corpus(const std::vector<LanguageSpec>& specs, const SplitSizes& sizes, std::uint64_t seed,
                  const LengthRange& lengths) {
  if (specs.empty()) throw ConfigError("gen_corpus: no languages");
  if (sizes.train < 1 || sizes.dev < 1 || sizes.test < 1) throw ConfigError("gen_corpus: split sizes must be >= 1");
  if (lengths.min < 1 || lengths.max < lengths.min) throw ConfigError("gen_corpus: bad length range");
  std::set<int> ids;
  for (const auto& s : specs) {
    s.validate();
    if (!ids.insert(s.id).second) throw ConfigError("duplicate language id " + std::to_string(s.id));
  }

  Corpus corpus;
  corpus.languages = specs;
  for (const auto& spec : specs) {
    Rng rng(seed * 0x100000001b3ULL + static_cast<std::uint64_t>(spec.id) * 0x9e3779b97f4a7c15ULL + 1);
    std::set<std::string> used;
    const auto draw = [&](std::vector<Example>& out, int count) {
      int attempts = 0;
      while (count > 0) {
        if (++attempts > 1000 * (count + 1000))
          throw ConfigError("language '" + spec.name + "' cannot supply enough distinct sequences");
        const std::size_t len =
            static_cast<std::size_t>(lengths.min) + rng.index(static_cast<std::size_t>(lengths.max - lengths.min + 1));
        std::string clean(len, ' ');
        for (auto& c : clean) c = spec.alphabet[rng.index(spec.alphabet.size())];
        if (!used.insert(clean).second) continue;
        std::string noisy = clean;
        if (spec.noise_rate > 0.0)
          for (auto& c : noisy)
            if (rng.uniform() < spec.noise_rate) {
              // Substitute a different symbol of the same alphabet.
              const std::size_t cur = spec.alphabet.find(c);
              const std::size_t shift = 1 + rng.index(spec.alphabet.size() - 1);
              c = spec.alphabet[(cur + shift) % spec.alphabet.size()];
            }
        out.push_back({spec.id, std::move(noisy), spec.transduce(clean)});
        --count;
      }
    };
    draw(corpus.train, sizes.train);
    draw(corpus.dev, sizes.dev);
    draw(corpus.test, sizes.test);
  }
  return corpus;
}

std::vector<int> source_tokens(const Example& ex) {
  std::vector<int> ids{vocab::language_token(ex.lang)};
  for (char c : ex.source) ids.push_back(vocab::symbol_id(c));
  ids.push_back(vocab::kEos);
  return ids;
}

std::vector<int> target_tokens(const Example& ex) { return vocab::tokenize(ex.target); }

// ---------------------------------------------------------------------------
// Files

void write_examples(const std::filesystem::path& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& ex : examples) out << ex.lang << '\t' << ex.source << '\t' << ex.target << '\n';
}

std::vector<Example> read_examples(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<Example> examples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": expected three tab-separated fields");
    Example ex;
    ex.lang = std::stoi(line.substr(0, t1));
    ex.source = line.substr(t1 + 1, t2 - t1 - 1);
    ex.target = line.substr(t2 + 1);
    for (char c : ex.source + ex.target)
      if (!vocab::is_symbol(c))
        throw VocabularyError(path.string() + ":" + std::to_string(line_no) + ": unknown symbol '" + std::string(1, c) + "'");
    examples.push_back(std::move(ex));
  }
  return examples;
}

void save_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  nlohmann::json langs = nlohmann::json::array();
  for (const auto& l : corpus.languages)
    langs.push_back({{"id", l.id},
                     {"name", l.name},
                     {"alphabet", l.alphabet},
                     {"rule", rule_name(l.rule)},
                     {"noise_rate", l.noise_rate},
                     {"rule_seed", l.rule_seed}});
  std::ofstream(dir / "languages.json") << langs.dump(2) << '\n';
  for (Split s : {Split::Train, Split::Dev, Split::Test})
    write_examples(dir / (std::string(split_name(s)) + ".tsv"), corpus.split(s));
}

Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream in(dir / "languages.json");
  if (!in) throw ConfigError("no corpus at " + dir.string() + " (languages.json missing)");
  const auto langs = nlohmann::json::parse(in);
  Corpus corpus;
  for (const auto& j : langs) {
    LanguageSpec l;
    l.id = j.at("id").get<int>();
    l.name = j.at("name").get<std::string>();
    l.alphabet = j.at("alphabet").get<std::string>();
    l.rule = parse_rule(j.at("rule").get<std::string>());
    l.noise_rate = j.at("noise_rate").get<double>();
    l.rule_seed = j.at("rule_seed").get<std::uint64_t>();
    l.validate();
    corpus.languages.push_back(std::move(l));
  }
  for (Split s : {Split::Train, Split::Dev, Split::Test})
    corpus.split(s) = read_examples(dir / (std::string(split_name(s)) + ".tsv"));
  for (Split s : {Split::Train, Split::Dev, Split::Test})
    for (const auto& ex : corpus.split(s)) (void)corpus.language(ex.lang);
  return corpus;
}

}  // namespace dq
