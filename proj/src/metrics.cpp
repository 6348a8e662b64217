// SPDX-License-Identifier: Apache-2.0

#include "dq/metrics.hpp"

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace dq {

namespace {

template <class Seq>
std::size_t levenshtein(const Seq& a, const Seq& b) {
  // One rolling row over the reference.
  std::vector<std::size_t> row(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({up + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(item);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

}  // namespace

std::size_t edit_distance(std::span<const int> hypothesis, std::span<const int> reference) {
  return levenshtein(hypothesis, reference);
}

std::size_t edit_distance(std::string_view hypothesis, std::string_view reference) {
  return levenshtein(hypothesis, reference);
}

double cer(std::span<const int> hypothesis, std::span<const int> reference) {
  if (reference.empty()) throw UndefinedMetricError("CER of an empty reference is undefined");
  return static_cast<double>(edit_distance(hypothesis, reference)) / static_cast<double>(reference.size());
}

double cer(std::string_view hypothesis, std::string_view reference) {
  if (reference.empty()) throw UndefinedMetricError("CER of an empty reference is undefined");
  return static_cast<double>(edit_distance(hypothesis, reference)) / static_cast<double>(reference.size());
}

double compression_ratio(double reference_bytes, double model_bytes) {
  if (!(reference_bytes > 0.0) || !(model_bytes > 0.0)) throw ParameterError("compression_ratio: sizes must be > 0");
  return std::round(reference_bytes / model_bytes * 100.0) / 100.0;
}

// ---------------------------------------------------------------------------
// Serialization

std::string report_to_json(const EvalReport& r) {
  nlohmann::json langs = nlohmann::json::array();
  for (const auto& l : r.languages)
    langs.push_back({{"lang", l.lang},
                     {"name", l.name},
                     {"utterances", l.utterances},
                     {"edits", l.edits},
                     {"reference_symbols", l.reference_symbols},
                     {"cer", l.cer}});
  const nlohmann::json j = {{"strategy", r.strategy},       {"bits", r.bits},
                            {"seed", r.seed},               {"languages", langs},
                            {"avg_cer", r.avg_cer},         {"model_bytes", r.model_bytes},
                            {"reference_bytes", r.reference_bytes}, {"compression", r.compression}};
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  EvalReport r;
  r.strategy = j.at("strategy").get<std::string>();
  r.bits = j.at("bits").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& l : j.at("languages"))
    r.languages.push_back({l.at("lang").get<int>(), l.at("name").get<std::string>(),
                           l.at("utterances").get<std::size_t>(), l.at("edits").get<std::size_t>(),
                           l.at("reference_symbols").get<std::size_t>(), l.at("cer").get<double>()});
  r.avg_cer = j.at("avg_cer").get<double>();
  r.model_bytes = j.at("model_bytes").get<std::size_t>();
  r.reference_bytes = j.at("reference_bytes").get<std::size_t>();
  r.compression = j.at("compression").get<double>();
  return r;
}

std::string results_csv_header() {
  return "strategy,bits,seed,avg_cer,model_bytes,reference_bytes,compression,languages";
}

// languages: id=name:utterances/edits/reference_symbols joined by ';'
std::string report_to_csv_row(const EvalReport& r) {
  std::ostringstream os;
  os << r.strategy << ',' << r.bits << ',' << r.seed << ',' << num(r.avg_cer) << ',' << r.model_bytes << ','
     << r.reference_bytes << ',' << num(r.compression) << ',';
  for (std::size_t i = 0; i < r.languages.size(); ++i) {
    const auto& l = r.languages[i];
    os << (i ? ";" : "") << l.lang << '=' << l.name << ':' << l.utterances << '/' << l.edits << '/'
       << l.reference_symbols;
  }
  return os.str();
}

EvalReport report_from_csv_row(const std::string& row) {
  const auto f = split_on(row, ',');
  if (f.size() != 8) throw CorruptionError("results row has " + std::to_string(f.size()) + " fields, expected 8");
  EvalReport r;
  try {
    r.strategy = f[0];
    r.bits = std::stoi(f[1]);
    r.seed = std::stoull(f[2]);
    r.avg_cer = std::stod(f[3]);
    r.model_bytes = std::stoull(f[4]);
    r.reference_bytes = std::stoull(f[5]);
    r.compression = std::stod(f[6]);
    if (!f[7].empty())
      for (const auto& item : split_on(f[7], ';')) {
        const auto eq = item.find('='), colon = item.find(':');
        const auto parts = split_on(item.substr(colon + 1), '/');
        if (eq == std::string::npos || colon == std::string::npos || parts.size() != 3)
          throw CorruptionError("bad language field '" + item + "'");
        LanguageScore l;
        l.lang = std::stoi(item.substr(0, eq));
        l.name = item.substr(eq + 1, colon - eq - 1);
        l.utterances = std::stoull(parts[0]);
        l.edits = std::stoull(parts[1]);
        l.reference_symbols = std::stoull(parts[2]);
        l.cer = static_cast<double>(l.edits) / static_cast<double>(l.reference_symbols);
        r.languages.push_back(std::move(l));
      }
  } catch (const std::logic_error& e) {
    throw CorruptionError(std::string("unparsable results row: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport evaluate(const SeqModel& model, const Corpus& corpus, Split split, const EvalOptions& options) {
  if (model.config.vocab_size != vocab::kSize)
    throw ConfigError("model vocabulary has " + std::to_string(model.config.vocab_size) + " tokens, the corpus " +
                      std::to_string(vocab::kSize));
  const int max_steps = options.max_steps > 0 ? options.max_steps : model.config.max_len - 1;
  // Pooled per language so the report does not depend on example order.
  std::map<int, LanguageScore> scores;
  for (const auto& l : corpus.languages) scores[l.id] = LanguageScore{l.id, l.name, 0, 0, 0, 0.0};
  for (const auto& ex : corpus.split(split)) {
    auto it = scores.find(ex.lang);
    if (it == scores.end()) throw ConfigError("example of unknown language " + std::to_string(ex.lang));
    if (ex.target.empty()) throw UndefinedMetricError("CER of an empty reference is undefined");
    const auto hyp = greedy_decode(model, source_tokens(ex), max_steps);
    const auto ref = vocab::encode_symbols(ex.target);
    it->second.utterances += 1;
    it->second.edits += edit_distance(hyp, ref);
    it->second.reference_symbols += ref.size();
  }
  EvalReport r;
  r.strategy = model.provenance.strategy;
  r.seed = model.provenance.seed;
  if (!model.quantized.empty()) r.bits = model.quantized.begin()->second.bits;
  double total = 0.0;
  for (auto& [id, s] : scores) {
    if (s.utterances == 0) continue;
    s.cer = static_cast<double>(s.edits) / static_cast<double>(s.reference_symbols);
    total += s.cer;
    r.languages.push_back(s);
  }
  if (r.languages.empty()) throw UndefinedMetricError("evaluate: split has no examples");
  r.avg_cer = total / static_cast<double>(r.languages.size());
  r.model_bytes = serialized_size(model, model.quantized.empty() ? StorageDtype::F32 : StorageDtype::Q8);
  r.reference_bytes = options.reference_bytes > 0 ? options.reference_bytes : r.model_bytes;
  r.compression = compression_ratio(static_cast<double>(r.reference_bytes), static_cast<double>(r.model_bytes));
  return r;
}

// ---------------------------------------------------------------------------
// Results table

void append_results_row(const std::filesystem::path& path, const EvalReport& report) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw std::runtime_error("cannot open " + path.string());
  if (::flock(fd, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd);
    throw std::runtime_error(path.string() + " is locked by another writer");
  }
  std::string text;
  if (::lseek(fd, 0, SEEK_END) == 0) text = results_csv_header() + "\n";
  text += report_to_csv_row(report) + "\n";
  const ssize_t written = ::write(fd, text.data(), text.size());
  ::flock(fd, LOCK_UN);
  ::close(fd);
  if (written != static_cast<ssize_t>(text.size())) throw std::runtime_error("short write to " + path.string());
}

std::vector<EvalReport> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::vector<EvalReport> rows;
  if (!std::getline(in, line)) return rows;
  if (line != results_csv_header()) throw CorruptionError(path.string() + ": unexpected header");
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(report_from_csv_row(line));
  return rows;
}

std::vector<SummaryRow> summarize(const std::vector<EvalReport>& reports) {
  std::vector<SummaryRow> rows;
  std::vector<double> reference;
  for (const auto& r : reports) {
    auto it = std::find_if(rows.begin(), rows.end(),
                           [&](const SummaryRow& s) { return s.strategy == r.strategy && s.bits == r.bits; });
    if (it == rows.end()) {
      rows.push_back({r.strategy, r.bits, 0, 0.0, 0.0, 0.0});
      reference.push_back(0.0);
      it = rows.end() - 1;
    }
    const auto k = static_cast<std::size_t>(it - rows.begin());
    it->runs += 1;
    it->avg_cer += r.avg_cer;
    it->size_bytes += static_cast<double>(r.model_bytes);
    reference[k] += static_cast<double>(r.reference_bytes);
  }
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto n = static_cast<double>(rows[k].runs);
    rows[k].avg_cer /= n;
    rows[k].size_bytes /= n;
    rows[k].compression = compression_ratio(reference[k] / n, rows[k].size_bytes);
  }
  return rows;
}

std::string summary_csv(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << "strategy,bits,runs,avg_cer_percent,size_bytes,compression\n";
  for (const auto& r : rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s,%d,%zu,%.2f,%.0f,%.2f\n", r.strategy.c_str(), r.bits, r.runs,
                  100.0 * r.avg_cer, r.size_bytes, r.compression);
    os << buf;
  }
  return os.str();
}

std::string summary_table(const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-12s %5s %5s %10s %12s %9s\n", "strategy", "bits", "runs", "Avg CER%", "Size(B)",
                "Compres.");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-12s %5d %5zu %10.2f %12.0f %8.2fx\n", r.strategy.c_str(), r.bits, r.runs,
                  100.0 * r.avg_cer, r.size_bytes, r.compression);
    os << buf;
  }
  return os.str();
}

}  // namespace dq
