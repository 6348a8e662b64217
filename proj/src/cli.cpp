// SPDX-License-Identifier: Apache-2.0

#include "dq/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dq/checkpoint.hpp"
#include "dq/data.hpp"
#include "dq/metrics.hpp"
#include "dq/trainer.hpp"

namespace dq {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kToolVersion = "dqw 1.0.0";

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DependencyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Settings {
  std::string out;
  std::string data;
  std::string teacher;
  std::string model;
  std::string reference;
  std::string split = "test";
  std::string strategy = "rdm";
  int bits = 8;
  double alpha = 0.5;
  double gamma = 1.0;
  double temp = 1.0;
  bool symmetric_temperature = false;
  bool freeze_encoder = true;
  bool monotone_quant = false;
  int refresh_interval = 0;
  std::uint64_t seed = 0;
  std::optional<int> epochs;
  int batch_size = 16;
  double lr = 1e-3;
  int warmup_steps = 500;
  double clip_norm = 1.0;
  int train_size = 500;
  int dev_size = 50;
  int test_size = 100;
};

json settings_json(const Settings& s, int default_epochs) {
  return {{"out", s.out},
          {"data", s.data},
          {"teacher", s.teacher},
          {"model", s.model},
          {"reference", s.reference},
          {"split", s.split},
          {"strategy", s.strategy},
          {"bits", s.bits},
          {"alpha", s.alpha},
          {"gamma", s.gamma},
          {"temp", s.temp},
          {"symmetric_temperature", s.symmetric_temperature},
          {"freeze_encoder", s.freeze_encoder},
          {"monotone_quant", s.monotone_quant},
          {"refresh_interval", s.refresh_interval},
          {"seed", s.seed},
          {"epochs", s.epochs.value_or(default_epochs)},
          {"batch_size", s.batch_size},
          {"lr", s.lr},
          {"warmup_steps", s.warmup_steps},
          {"clip_norm", s.clip_norm},
          {"train_size", s.train_size},
          {"dev_size", s.dev_size},
          {"test_size", s.test_size}};
}

// Registers flags on a subcommand and remembers how to apply each setting
// from the config file and from the command line.
class Binder {
 public:
  Binder(CLI::App* app, Settings& s) : app_(app), s_(s) {}

  template <class T>
  Binder& opt(const std::string& flag, const std::string& key, T Settings::*field, const std::string& help) {
    auto tmp = std::make_shared<T>();
    CLI::Option* o = app_->add_option(flag, *tmp, help);
    add(key, field, o, tmp);
    return *this;
  }

  Binder& epochs(const std::string& help) {
    auto tmp = std::make_shared<int>();
    CLI::Option* o = app_->add_option("--epochs", *tmp, help);
    config_.push_back([this](const json& j) {
      if (j.contains("epochs")) s_.epochs = j.at("epochs").get<int>();
    });
    flags_.push_back([this, o, tmp] {
      if (o->count() > 0) s_.epochs = *tmp;
    });
    return *this;
  }

  Binder& flag(const std::string& flags, const std::string& key, bool Settings::*field, const std::string& help) {
    auto tmp = std::make_shared<bool>(false);
    CLI::Option* o = app_->add_flag(flags, *tmp, help);
    add(key, field, o, tmp);
    return *this;
  }

  /// DQ_SEED, then the config file, then explicit flags.
  void resolve(const json& config) const {
    if (const char* env = std::getenv("DQ_SEED"); env != nullptr && *env != '\0') {
      try {
        s_.seed = std::stoull(env);
      } catch (const std::exception&) {
        throw UsageError(std::string("DQ_SEED is not an integer: '") + env + "'");
      }
    }
    for (const auto& f : config_) f(config);
    for (const auto& f : flags_) f();
  }

 private:
  template <class T>
  void add(const std::string& key, T Settings::*field, CLI::Option* o, std::shared_ptr<T> tmp) {
    config_.push_back([this, key, field](const json& j) {
      if (!j.contains(key)) return;
      try {
        s_.*field = j.at(key).get<T>();
      } catch (const json::exception&) {
        throw UsageError("config key '" + key + "' has the wrong type");
      }
    });
    flags_.push_back([this, field, o, tmp] {
      if (o->count() > 0) s_.*field = *tmp;
    });
  }

  CLI::App* app_;
  Settings& s_;
  std::vector<std::function<void(const json&)>> config_;
  std::vector<std::function<void()>> flags_;
};

const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> k;
    const json defaults = settings_json(Settings{}, 0);
    for (const auto& [key, value] : defaults.items()) k.insert(key);
    return k;
  }();
  return keys;
}

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw DependencyError("cannot read config file " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config file " + path + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw UsageError("config file " + path + " must hold a JSON object");
  for (const auto& [key, value] : j.items())
    if (!known_config_keys().count(key)) throw UsageError("unknown config key '" + key + "'");
  return j;
}

void require_path(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing --") + what);
  if (!fs::exists(path)) throw DependencyError(std::string(what) + " not found: " + path);
}

void require_out(const Settings& s) {
  if (s.out.empty()) throw UsageError("missing --out");
  fs::create_directories(s.out);
}

Strategy strategy_of(const Settings& s) {
  try {
    return parse_strategy(s.strategy);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

TrainConfig train_config(const Settings& s, int default_epochs) {
  TrainConfig c;
  c.strategy = strategy_of(s);
  c.epochs = s.epochs.value_or(default_epochs);
  c.batch_size = s.batch_size;
  c.peak_lr = s.lr;
  c.warmup_steps = s.warmup_steps;
  c.clip_norm = s.clip_norm;
  c.bits = s.bits;
  c.freeze_encoder = s.freeze_encoder;
  c.refresh_interval = s.refresh_interval;
  c.monotone_quant = s.monotone_quant;
  c.seed = s.seed;
  c.weights.alpha = s.alpha;
  c.weights.gamma = s.gamma;
  c.weights.temperature = s.temp;
  c.weights.symmetric_temperature = s.symmetric_temperature;
  c.validate();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_manifest(const Settings& s, const std::string& command, const std::string& run, int default_epochs,
                    const std::vector<std::string>& outputs, const json& measurements = json::object()) {
  json manifest = {{"tool", kToolVersion},
                   {"command", command},
                   {"config", settings_json(s, default_epochs)},
                   {"outputs", outputs}};
  if (!measurements.empty()) manifest["measurements"] = measurements;
  write_text(fs::path(s.out) / (run + ".manifest.json"), manifest.dump(2) + "\n");
}

void record_eval(const Settings& s, const std::string& run, const EvalReport& report, std::ostream& out) {
  write_text(fs::path(s.out) / (run + ".eval.json"), report_to_json(report) + "\n");
  append_results_row(fs::path(s.out) / "results.csv", report);
  char line[160];
  std::snprintf(line, sizeof line, "%s: avg CER %.2f%%, %zu bytes, %.2fx\n", run.c_str(), 100.0 * report.avg_cer,
                report.model_bytes, report.compression);
  out << line;
}

Split split_of(const Settings& s) {
  for (Split sp : {Split::Train, Split::Dev, Split::Test})
    if (split_name(sp) == s.split) return sp;
  throw UsageError("unknown split '" + s.split + "'");
}

// ---------------------------------------------------------------------------
// Commands

constexpr int kTeacherEpochs = 30;
constexpr int kStudentEpochs = 20;

void cmd_gen_data(const Settings& s, std::ostream& out) {
  require_out(s);
  const Corpus corpus = gen_corpus(default_languages(), {s.train_size, s.dev_size, s.test_size}, s.seed);
  save_corpus(s.out, corpus);
  write_manifest(s, "gen-data", "gen-data", 0, {"languages.json", "train.tsv", "dev.tsv", "test.tsv"});
  out << "wrote " << corpus.train.size() << "/" << corpus.dev.size() << "/" << corpus.test.size()
      << " train/dev/test examples to " << s.out << "\n";
}

void cmd_train_teacher(const Settings& s, std::ostream& out) {
  require_path(s.data, "data");
  require_out(s);
  const Corpus corpus = load_corpus(s.data);
  TrainConfig c = train_config(s, kTeacherEpochs);
  const TrainResult r = train_teacher(c, corpus, ModelConfig::desk_teacher());
  const std::string run = "teacher";
  save_checkpoint(r.student, fs::path(s.out) / (run + ".dqwc"), StorageDtype::F32);
  write_metrics_csv(fs::path(s.out) / (run + ".metrics.csv"), r.log);
  // Evaluate what was written, so reported numbers match the file on disk.
  const SeqModel saved = load_checkpoint(fs::path(s.out) / (run + ".dqwc"));
  record_eval(s, run, evaluate(saved, corpus, split_of(s)), out);
  write_manifest(s, "train-teacher", run, kTeacherEpochs,
                 {run + ".dqwc", run + ".metrics.csv", run + ".eval.json", "results.csv"});
}

void cmd_distill(const Settings& s, std::ostream& out) {
  const Strategy strategy = strategy_of(s);
  require_path(s.data, "data");
  if (s.teacher.empty()) throw DependencyError("distill needs a teacher checkpoint (--teacher)");
  require_path(s.teacher, "teacher");
  require_out(s);
  const Corpus corpus = load_corpus(s.data);
  const SeqModel teacher = load_checkpoint(s.teacher);
  const TrainConfig c = train_config(s, kStudentEpochs);
  TrainResult r = run_training(c, corpus, &teacher, SeqModel::init(ModelConfig::desk_student(), Role::Student, s.seed));
  const std::string run = std::string(strategy_name(strategy)) + "_s" + std::to_string(s.seed);
  const fs::path ckpt = fs::path(s.out) / (run + ".dqwc");
  if (strategy == Strategy::DQ)
    save_checkpoint(finalize_quantized(r.student, c.bits), ckpt, c.bits <= 8 ? StorageDtype::Q8 : StorageDtype::F32);
  else
    save_checkpoint(r.student, ckpt, StorageDtype::F32);
  write_metrics_csv(fs::path(s.out) / (run + ".metrics.csv"), r.log);
  const SeqModel saved = load_checkpoint(ckpt);
  EvalOptions options;
  options.reference_bytes = serialized_size(teacher, StorageDtype::F32);
  record_eval(s, run, evaluate(saved, corpus, split_of(s), options), out);
  // Measured on the float weights, before any export quantization.
  write_manifest(s, "distill", run, kStudentEpochs,
                 {run + ".dqwc", run + ".metrics.csv", run + ".eval.json", "results.csv"},
                 {{"quant_loss", model_quant_loss(r.student, c.bits)}});
}

void cmd_quantize(const Settings& s, std::ostream& out) {
  require_path(s.model, "model");
  require_out(s);
  const SeqModel model = load_checkpoint(s.model);
  SeqModel q = finalize_quantized(model, s.bits);
  if (model.quantized.empty()) q.provenance.strategy += "+ptq";
  const std::string run = fs::path(s.model).stem().string() + "_q" + std::to_string(s.bits);
  save_checkpoint(q, fs::path(s.out) / (run + ".dqwc"), s.bits <= 8 ? StorageDtype::Q8 : StorageDtype::F32);
  const double loss = model_quant_loss(model, s.bits);
  write_manifest(s, "quantize", run, 0, {run + ".dqwc"}, {{"quant_loss", loss}});
  out << "wrote " << (fs::path(s.out) / (run + ".dqwc")).string() << " (quantization loss " << loss << ")\n";
}

void cmd_evaluate(const Settings& s, std::ostream& out) {
  require_path(s.model, "model");
  require_path(s.data, "data");
  require_out(s);
  const Corpus corpus = load_corpus(s.data);
  const SeqModel model = load_checkpoint(s.model);
  EvalOptions options;
  if (!s.reference.empty()) {
    require_path(s.reference, "reference");
    options.reference_bytes = serialized_size(load_checkpoint(s.reference), StorageDtype::F32);
  }
  const std::string run = fs::path(s.model).stem().string();
  record_eval(s, run, evaluate(model, corpus, split_of(s), options), out);
  write_manifest(s, "evaluate", run + ".evaluate", 0, {run + ".eval.json", "results.csv"});
}

void cmd_report(const Settings& s, std::ostream& out) {
  if (s.out.empty()) throw UsageError("missing --out");
  const fs::path results = fs::path(s.out) / "results.csv";
  if (!fs::exists(results)) throw DependencyError("no results table at " + results.string());
  const auto rows = summarize(read_results_csv(results));
  write_text(fs::path(s.out) / "report.csv", summary_csv(rows));
  out << summary_table(rows);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Joint distillation and quantization of small encoder-decoder models", "dqw"};
  app.require_subcommand(1);
  Settings s;
  std::string config_path;

  struct Command {
    CLI::App* app;
    std::unique_ptr<Binder> binder;
    std::function<void(const Settings&, std::ostream&)> run;
  };
  std::vector<Command> commands;
  const auto add_command = [&](const char* name, const char* help, auto run) -> Binder& {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON file with default settings");
    commands.push_back({sub, std::make_unique<Binder>(sub, s), run});
    Binder& b = *commands.back().binder;
    b.opt("--out", "out", &Settings::out, "output directory");
    return b;
  };
  const auto train_options = [](Binder& b) {
    b.opt("--data", "data", &Settings::data, "corpus directory")
        .opt("--seed", "seed", &Settings::seed, "random seed")
        .opt("--batch-size", "batch_size", &Settings::batch_size, "examples per step")
        .opt("--lr", "lr", &Settings::lr, "peak learning rate")
        .opt("--warmup-steps", "warmup_steps", &Settings::warmup_steps, "linear warmup length")
        .opt("--clip-norm", "clip_norm", &Settings::clip_norm, "global gradient norm limit (<= 0: off)")
        .opt("--split", "split", &Settings::split, "evaluation split (train, dev, test)");
  };

  add_command("gen-data", "generate the synthetic corpus", cmd_gen_data)
      .opt("--seed", "seed", &Settings::seed, "random seed")
      .opt("--train-size", "train_size", &Settings::train_size, "train examples per language")
      .opt("--dev-size", "dev_size", &Settings::dev_size, "dev examples per language")
      .opt("--test-size", "test_size", &Settings::test_size, "test examples per language");

  train_options(add_command("train-teacher", "train the teacher with cross-entropy", cmd_train_teacher)
                    .epochs("training epochs (default 30)"));

  Binder& distill = add_command("distill", "distill a student from a teacher", cmd_distill);
  train_options(distill);
  distill.opt("--teacher", "teacher", &Settings::teacher, "teacher checkpoint")
      .opt("--strategy", "strategy", &Settings::strategy, "none, logits, dm, rdm or dq")
      .opt("--bits", "bits", &Settings::bits, "quantization width")
      .opt("--alpha", "alpha", &Settings::alpha, "distillation vs cross-entropy mix")
      .opt("--gamma", "gamma", &Settings::gamma, "quantization loss weight")
      .opt("--temp", "temp", &Settings::temp, "teacher temperature")
      .opt("--refresh-interval", "refresh_interval", &Settings::refresh_interval, "steps between plan refreshes (0: per epoch)")
      .flag("--freeze-encoder,!--no-freeze-encoder", "freeze_encoder", &Settings::freeze_encoder, "keep the student encoder fixed")
      .flag("--monotone-quant", "monotone_quant", &Settings::monotone_quant, "constrain quantization-guided matching to increasing maps")
      .flag("--symmetric-temperature", "symmetric_temperature", &Settings::symmetric_temperature, "soften the student too and scale by t^2")
      .epochs("training epochs (default 20)");

  add_command("quantize", "post-training quantization of a checkpoint", cmd_quantize)
      .opt("--model", "model", &Settings::model, "checkpoint to quantize")
      .opt("--bits", "bits", &Settings::bits, "quantization width");

  add_command("evaluate", "score a checkpoint and append to results.csv", cmd_evaluate)
      .opt("--model", "model", &Settings::model, "checkpoint to evaluate")
      .opt("--data", "data", &Settings::data, "corpus directory")
      .opt("--reference", "reference", &Settings::reference, "checkpoint whose f32 size is the ratio reference")
      .opt("--split", "split", &Settings::split, "evaluation split (train, dev, test)");

  add_command("report", "summarize results.csv per strategy", cmd_report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "dqw: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    for (auto& c : commands)
      if (c.app->parsed()) {
        c.binder->resolve(read_config(config_path));
        c.run(s, out);
      }
    return kExitOk;
  } catch (const UsageError& e) {
    err << "dqw: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DependencyError& e) {
    err << "dqw: " << e.what() << "\n";
    return kExitMissingDependency;
  } catch (const std::exception& e) {
    err << "dqw: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace dq
