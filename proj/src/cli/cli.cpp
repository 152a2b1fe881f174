// Copyright 2026 The MARE Authors
// SPDX-License-Identifier: Apache-2.0

#include "mare/cli.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <initializer_list>
#include <sstream>

#include "CLI11.hpp"
#include "mare/checkpoint.hpp"
#include "mare/error.hpp"
#include "mare/eval.hpp"

#ifndef MARE_VERSION
#define MARE_VERSION "0.0.0"
#endif
#ifndef MARE_GIT_DESCRIBE
#define MARE_GIT_DESCRIBE ""
#endif

namespace mare::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

std::optional<std::uint64_t> seed_in(const json& j) {
  if (j.is_object() && j.contains("seed")) return j["seed"].get<std::uint64_t>();
  return std::nullopt;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Rejects keys outside `allowed` so that typos do not pass silently.
void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  check_keys(j, {"synth", "model", "train", "data"}, "run config");
  if (j.contains("synth")) {
    check_keys(j["synth"],
               {"num_aspects", "aspects", "filler", "filler_min", "filler_max", "adjectives_per_span", "presence",
                "seed", "n_examples"},
               "synth");
  }
  if (j.contains("model")) {
    check_keys(j["model"],
               {"encoder", "num_aspects", "cliff_layer", "sparsity_targets", "init_strategy", "gumbel_temperature",
                "num_classes", "deletion", "recompute_masks_per_layer"},
               "model");
    if (j["model"].contains("encoder")) {
      check_keys(j["model"]["encoder"],
                 {"num_layers", "num_heads", "model_dim", "ffn_dim", "vocab_size", "max_len", "normalizer"},
                 "model.encoder");
    }
  }
  if (j.contains("train")) {
    check_keys(j["train"],
               {"learning_rate", "weight_decay", "batch_size", "max_epochs", "seed", "mode", "beta", "gamma",
                "mask_losses_all_layers", "max_steps_per_epoch", "sparsity_targets"},
               "train");
  }
  if (j.contains("data")) check_keys(j["data"], {"train", "val", "test"}, "data");
  RunConfig c;
  try {
    if (j.contains("synth")) {
      c.synth = SynthGrammarConfig::from_json(j["synth"]);
      c.n_examples = j["synth"].value("n_examples", c.n_examples);
    }
    if (j.contains("model")) c.model = mare_config_from_json(j["model"], c.model);
    if (j.contains("train")) c.train = train_config_from_json(j["train"], c.train);
    if (j.contains("data")) {
      const auto& d = j["data"];
      c.train_path = d.value("train", c.train_path);
      c.val_path = d.value("val", c.val_path);
      c.test_path = d.value("test", c.test_path);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  return c;
}

json RunConfig::to_json() const {
  auto s = synth.to_json();
  s["n_examples"] = n_examples;
  return {{"synth", s},
          {"model", mare::to_json(model)},
          {"train", mare::to_json(train)},
          {"data", {{"train", train_path}, {"val", val_path}, {"test", test_path}}}};
}

RunConfig load_run_config(const std::string& path) { return RunConfig::from_json(read_json_file(path)); }

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::optional<std::uint64_t> from_config) {
  if (flag) return *flag;
  if (from_config) return *from_config;
  if (const char* env = std::getenv("MARE_SEED"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const auto v = std::strtoull(env, &end, 10);
    if (end == nullptr || *end != '\0') throw ConfigError(std::string("MARE_SEED is not an integer: '") + env + "'");
    return v;
  }
  return 1;
}

std::string version_string() {
  std::string v = std::string("mare ") + MARE_VERSION;
  const std::string describe = MARE_GIT_DESCRIBE;
  if (!describe.empty()) v += "-" + describe;
  return v;
}

std::string config_hash(const json& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

json write_manifest(const std::string& out_dir, const std::string& command, const std::string& config_path,
                    const json& resolved_config, std::uint64_t seed) {
  fs::create_directories(out_dir);
  json m = {{"command", command},
            {"config_path", config_path},
            {"config", resolved_config},
            {"config_hash", config_hash(resolved_config)},
            {"seed", seed},
            {"version", version_string()},
            {"output_dir", out_dir}};
  write_text(fs::path(out_dir) / "manifest.json", m.dump(2) + "\n");
  return m;
}

std::string render_inline(const std::vector<std::string>& tokens, const std::vector<std::uint8_t>& selection,
                          std::size_t aspect) {
  if (std::find(selection.begin(), selection.end(), 1) == selection.end()) return "(none)";
  const std::string open = "<A" + std::to_string(aspect) + ">", close = "</A" + std::to_string(aspect) + ">";
  std::string out;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const bool in = selection[t] != 0;
    const bool starts = in && (t == 0 || !selection[t - 1]);
    const bool ends = in && (t + 1 == tokens.size() || !selection[t + 1]);
    if (t) out += ' ';
    if (starts) out += open;
    out += tokens[t];
    if (ends) out += close;
  }
  return out;
}

void fit_model_config(MareConfig& m, const Dataset& train, const Dataset* val, const Vocabulary& vocab,
                      bool targets_from_user) {
  const std::size_t k = train.num_aspects;
  if (m.sparsity_targets.size() != k) {
    if (targets_from_user) {
      throw ConfigError("expected " + std::to_string(k) + " sparsity targets, got " +
                        std::to_string(m.sparsity_targets.size()));
    }
    const double l = m.sparsity_targets.empty() ? 0.1 : m.sparsity_targets.front();
    m.sparsity_targets.assign(k, l);
  }
  m.num_aspects = k;
  m.encoder.vocab_size = vocab.size();
  std::size_t longest = 0;
  for (const auto* ds : {&train, val}) {
    if (!ds) continue;
    for (const auto& ex : ds->examples) longest = std::max(longest, ex.tokens.size());
  }
  m.encoder.max_len = std::max(m.encoder.max_len, longest + k);
  std::size_t classes = m.num_classes;
  for (const auto& ex : train.examples) {
    for (const auto& y : ex.labels) {
      if (y) classes = std::max(classes, *y + 1);
    }
  }
  m.num_classes = classes;
  m.validate();
}

namespace {

// Flags shared by every command that builds a model.
struct ModelFlags {
  std::optional<std::string> mode, init, deletion, normalizer;
  std::optional<std::size_t> cliff, epochs, batch_size, max_steps;
  std::optional<double> lr, beta, gamma, temperature, weight_decay;
  std::optional<std::string> targets;
  std::optional<bool> recompute;

  void add(CLI::App& app) {
    app.add_option("--mode", mode, "multitask|collaborative");
    app.add_option("--init", init, "special-token init: random|cls|share");
    app.add_option("--deletion", deletion, "hard|amd");
    app.add_option("--normalizer", normalizer, "attention normalizer: retained|full");
    app.add_option("--cliff", cliff, "first masked layer (1-based)");
    app.add_option("--epochs", epochs, "maximum epochs");
    app.add_option("--batch-size", batch_size, "batch size");
    app.add_option("--max-steps", max_steps, "optimizer steps per epoch (0 = all)");
    app.add_option("--lr", lr, "learning rate");
    app.add_option("--weight-decay", weight_decay, "decoupled weight decay");
    app.add_option("--beta", beta, "sparsity loss weight");
    app.add_option("--gamma", gamma, "continuity loss weight");
    app.add_option("--temperature", temperature, "Gumbel temperature");
    app.add_option("--targets", targets, "comma-separated sparsity targets, one per aspect");
    app.add_flag("--recompute,!--no-recompute", recompute, "recompute masks in every masked layer");
  }

  void apply(RunConfig& c) const {
    if (mode) c.train.mode = parse_training_mode(*mode);
    if (init) c.model.init_strategy = parse_init_strategy(*init);
    if (deletion) c.model.deletion = parse_deletion_mode(*deletion);
    if (normalizer) c.model.encoder.normalizer = parse_attention_normalizer(*normalizer);
    if (cliff) c.model.cliff_layer = *cliff;
    if (epochs) c.train.max_epochs = *epochs;
    if (batch_size) c.train.batch_size = *batch_size;
    if (max_steps) c.train.max_steps_per_epoch = *max_steps;
    if (lr) c.train.learning_rate = *lr;
    if (weight_decay) c.train.weight_decay = *weight_decay;
    if (beta) c.train.loss_weights.beta = *beta;
    if (gamma) c.train.loss_weights.gamma = *gamma;
    if (temperature) c.model.gumbel_temperature = *temperature;
    if (recompute) c.model.recompute_masks_per_layer = *recompute;
    if (targets) {
      c.model.sparsity_targets.clear();
      for (const auto& t : split_list(*targets)) {
        try {
          c.model.sparsity_targets.push_back(std::stod(t));
        } catch (const std::exception&) {
          throw ConfigError("--targets: '" + t + "' is not a number");
        }
      }
    }
  }
};

struct Loaded {
  RunConfig config;
  json file = json::object();
  std::string path;
};

Loaded load_config(const std::string& path) {
  Loaded l;
  l.path = path;
  if (!path.empty()) {
    l.file = read_json_file(path);
    l.config = RunConfig::from_json(l.file);
  }
  return l;
}

std::optional<std::uint64_t> config_seed(const Loaded& l, const char* section) {
  if (l.file.contains(section)) return seed_in(l.file[section]);
  return std::nullopt;
}

bool targets_given(const Loaded& l, const ModelFlags& f) {
  return f.targets.has_value() || (l.file.contains("model") && l.file["model"].contains("sparsity_targets"));
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string fmt_opt(const std::optional<double>& v, int digits = 4) { return v ? fmt(*v, digits) : "-"; }

// ---------------------------------------------------------------- synth

struct SynthArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n, k;
  double train_fraction = 0.8, val_fraction = 0.1;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  auto l = load_config(a.config);
  auto& c = l.config;
  if (a.n) c.n_examples = *a.n;
  if (a.k) {
    c.synth.num_aspects = *a.k;
    if (!l.file.contains("synth") || !l.file["synth"].contains("presence")) c.synth.presence.clear();
  }
  c.synth.seed = resolve_seed(a.seed, config_seed(l, "synth"));
  c.synth.validate();
  if (c.n_examples == 0) throw ConfigError("synth: number of examples must be at least 1");
  json resolved = c.synth.resolved().to_json();
  resolved["n_examples"] = c.n_examples;
  resolved["train_fraction"] = a.train_fraction;
  resolved["val_fraction"] = a.val_fraction;
  write_manifest(a.out, "synth", a.config, resolved, c.synth.seed);

  const auto ds = synth_generate(c.synth, c.n_examples);
  const auto parts = split_dataset(ds, a.train_fraction, a.val_fraction);
  const fs::path dir(a.out);
  save_jsonl(parts.train, (dir / "train.jsonl").string());
  save_jsonl(parts.val, (dir / "val.jsonl").string());
  save_jsonl(parts.test, (dir / "test.jsonl").string());
  json stats = {{"all", compute_stats(ds).to_json()},
                {"train", compute_stats(parts.train).to_json()},
                {"val", compute_stats(parts.val).to_json()},
                {"test", compute_stats(parts.test).to_json()}};
  write_text(dir / "stats.json", stats.dump(2) + "\n");
  out << "wrote " << parts.train.size() << "/" << parts.val.size() << "/" << parts.test.size()
      << " train/val/test examples to " << a.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config, train, val, out;
  std::optional<std::uint64_t> seed;
  ModelFlags model;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  auto l = load_config(a.config);
  auto& c = l.config;
  if (!a.train.empty()) c.train_path = a.train;
  if (!a.val.empty()) c.val_path = a.val;
  a.model.apply(c);
  if (c.train_path.empty()) throw ConfigError("train: no training data (--train or data.train in the config)");
  c.train.seed = resolve_seed(a.seed, config_seed(l, "train"));

  const auto train_ds = load_jsonl(c.train_path);
  std::optional<Dataset> val_ds;
  if (!c.val_path.empty()) val_ds = load_jsonl(c.val_path, train_ds.num_aspects);
  const auto vocab = Vocabulary::build(train_ds);
  fit_model_config(c.model, train_ds, val_ds ? &*val_ds : nullptr, vocab, targets_given(l, a.model));
  c.train.validate();
  const json resolved = c.to_json();
  write_manifest(a.out, "train", a.config, resolved, c.train.seed);

  const auto train_data = encode(train_ds, vocab);
  std::optional<EncodedDataset> val_data;
  if (val_ds) val_data = encode(*val_ds, vocab);
  MareModel model(c.model, c.train.seed);
  const fs::path dir(a.out);
  MetricsLog log((dir / "metrics.jsonl").string());
  const json meta = {{"train", mare::to_json(c.train)},
                     {"config_hash", config_hash(resolved)},
                     {"version", version_string()}};
  const auto ckpt = (dir / "checkpoint.json").string();
  train(model, train_data, val_data ? &*val_data : nullptr, c.train, {.on_epoch = [&](const EpochMetrics& e) {
          log.append(e);
          out << "epoch " << e.epoch << " loss " << fmt(e.loss) << " ce " << fmt(e.ce) << " sparse " << fmt(e.sparse)
              << " cont " << fmt(e.cont);
          if (!e.val_acc.empty()) {
            out << " val_acc";
            for (const auto& v : e.val_acc) out << ' ' << fmt_opt(v, 3);
          }
          out << " (" << fmt(e.wall_ms / 1000.0, 1) << " s)\n";
          out.flush();
          save_checkpoint(ckpt, model, c.train.seed, vocab, meta);
        }});
  save_checkpoint(ckpt, model, c.train.seed, vocab, meta);
  out << "checkpoint: " << ckpt << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, data, out;
  std::string format = "all";
  std::optional<std::string> mode;
  std::string aggregation = "micro";
  bool accuracy_only = false;
  bool probe = false;
  std::size_t probe_examples = 50;
  std::optional<std::uint64_t> seed;
};

TrainingMode checkpoint_mode(const Checkpoint& ck, const std::optional<std::string>& flag) {
  if (flag) return parse_training_mode(*flag);
  if (ck.metadata.contains("train") && ck.metadata["train"].contains("mode")) {
    return parse_training_mode(ck.metadata["train"]["mode"].get<std::string>());
  }
  return TrainingMode::kMultitask;
}

json probe_diagnostics(const MareModel& model, const EncodedDataset& data, std::size_t limit, std::uint64_t seed) {
  const std::size_t k = model.config().num_aspects;
  Rng rng(seed, Stream::kProbe);
  std::size_t measured = 0, skipped = 0;
  double max_leak = 0.0, max_drift = 0.0;
  json results = json::array();
  for (std::size_t n = 0; n < std::min(limit, data.size()); ++n) {
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        if (a == b) continue;
        const auto r = deletion_completeness_probe(model, data.ids[n], a, b, rng);
        auto j = r.to_json();
        j["example"] = n;
        results.push_back(j);
        max_drift = std::max(max_drift, r.deleted_drift);
        if (r.skipped) {
          ++skipped;
          continue;
        }
        ++measured;
        max_leak = std::max(max_leak, r.leakage);
      }
    }
  }
  return {{"deletion", to_string(model.config().deletion)},
          {"examples", std::min(limit, data.size())},
          {"pairs_measured", measured},
          {"pairs_skipped", skipped},
          {"max_leakage", max_leak},
          {"max_deleted_drift", max_drift},
          {"results", results}};
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  std::vector<ReportFormat> formats;
  if (a.format == "all") {
    formats = {ReportFormat::kJson, ReportFormat::kCsv, ReportFormat::kMarkdown};
  } else {
    for (const auto& f : split_list(a.format)) formats.push_back(parse_report_format(f));
  }
  Aggregation agg;
  if (a.aggregation == "micro") {
    agg = Aggregation::kMicro;
  } else if (a.aggregation == "macro") {
    agg = Aggregation::kMacro;
  } else {
    throw ConfigError("unknown aggregation '" + a.aggregation + "' (expected micro|macro)");
  }
  auto ck = load_checkpoint(a.checkpoint);
  const auto& model = *ck.model;
  const auto mode = checkpoint_mode(ck, a.mode);
  const auto seed = resolve_seed(a.seed, ck.seed);
  const json resolved = {{"checkpoint", a.checkpoint},
                         {"data", a.data},
                         {"mode", to_string(mode)},
                         {"aggregation", a.aggregation},
                         {"accuracy_only", a.accuracy_only},
                         {"probe", a.probe},
                         {"probe_examples", a.probe_examples},
                         {"model", to_json(model.config())}};
  write_manifest(a.out, "eval", "", resolved, seed);

  const auto ds = load_jsonl(a.data, model.config().num_aspects);
  const auto data = encode(ds, ck.vocab);
  auto report = evaluate(model, data, {.mode = mode, .aggregation = agg});
  if (!a.accuracy_only && !report.has_gold()) {
    throw ConfigError("'" + a.data + "' has no gold rationales; rationale metrics need them (or pass --accuracy-only)");
  }
  report.meta.seed = ck.seed;
  report.meta.config_hash = ck.metadata.value("config_hash", config_hash(resolved));
  if (a.probe) report.diagnostics["probe"] = probe_diagnostics(model, data, a.probe_examples, seed);

  const fs::path dir(a.out);
  for (auto f : formats) {
    const char* name = f == ReportFormat::kJson ? "report.json" : f == ReportFormat::kCsv ? "report.csv" : "report.md";
    write_text(dir / name, render_report(report, f));
  }
  out << render_report(report, ReportFormat::kMarkdown);
  if (a.probe) {
    const auto& p = report.diagnostics["probe"];
    out << "probe (" << p["deletion"].get<std::string>() << "): " << p["pairs_measured"] << " pairs measured, "
        << p["pairs_skipped"] << " skipped, max leakage " << p["max_leakage"].get<double>() << ", max deleted drift "
        << p["max_deleted_drift"].get<double>() << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------- ablate

struct AblateArgs {
  std::string config, train, val, test, out;
  std::optional<std::uint64_t> seed;
  std::string deletions = "hard,amd", modes = "multitask,collaborative", inits = "random,cls,share";
  ModelFlags model;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  auto l = load_config(a.config);
  auto& c = l.config;
  if (!a.train.empty()) c.train_path = a.train;
  if (!a.val.empty()) c.val_path = a.val;
  if (!a.test.empty()) c.test_path = a.test;
  a.model.apply(c);
  if (c.train_path.empty() || c.test_path.empty()) throw ConfigError("ablate: needs --train and --test data");
  c.train.seed = resolve_seed(a.seed, config_seed(l, "train"));
  std::vector<DeletionMode> deletions;
  std::vector<TrainingMode> modes;
  std::vector<InitStrategy> inits;
  for (const auto& s : split_list(a.deletions)) deletions.push_back(parse_deletion_mode(s));
  for (const auto& s : split_list(a.modes)) modes.push_back(parse_training_mode(s));
  for (const auto& s : split_list(a.inits)) inits.push_back(parse_init_strategy(s));
  if (deletions.empty() || modes.empty() || inits.empty()) throw ConfigError("ablate: empty grid");

  const auto train_ds = load_jsonl(c.train_path);
  std::optional<Dataset> val_ds;
  if (!c.val_path.empty()) val_ds = load_jsonl(c.val_path, train_ds.num_aspects);
  const auto test_ds = load_jsonl(c.test_path, train_ds.num_aspects);
  const auto vocab = Vocabulary::build(train_ds);
  fit_model_config(c.model, train_ds, val_ds ? &*val_ds : nullptr, vocab, targets_given(l, a.model));
  for (const auto& ex : test_ds.examples) {
    c.model.encoder.max_len = std::max(c.model.encoder.max_len, ex.tokens.size() + c.model.num_aspects);
  }
  c.train.validate();
  json resolved = c.to_json();
  resolved["grid"] = {{"deletion", split_list(a.deletions)}, {"mode", split_list(a.modes)}, {"init", split_list(a.inits)}};
  write_manifest(a.out, "ablate", a.config, resolved, c.train.seed);

  const auto train_data = encode(train_ds, vocab);
  std::optional<EncodedDataset> val_data;
  if (val_ds) val_data = encode(*val_ds, vocab);
  const auto test_data = encode(test_ds, vocab);
  const std::size_t k = c.model.num_aspects;

  json cells = json::array();
  for (auto del : deletions) {
    for (auto mode : modes) {
      for (auto init : inits) {
        json cell = {{"deletion", to_string(del)}, {"mode", to_string(mode)}, {"init", to_string(init)}};
        out << "cell " << to_string(del) << "/" << to_string(mode) << "/" << to_string(init) << ": ";
        out.flush();
        try {
          auto mc = c.model;
          mc.deletion = del;
          mc.init_strategy = init;
          auto tc = c.train;
          tc.mode = mode;
          MareModel model(mc, tc.seed);
          const auto result = train(model, train_data, val_data ? &*val_data : nullptr, tc);
          const auto report = evaluate(model, test_data, {.mode = mode, .keep_examples = false});
          double wall = 0.0;
          std::size_t peak = 0;
          for (const auto& e : result.epochs) {
            wall += e.wall_ms;
            peak = std::max(peak, e.peak_live_bytes);
          }
          json f1 = json::array(), acc = json::array();
          double acc_sum = 0.0;
          std::size_t acc_n = 0;
          for (const auto& m : report.aspects) {
            f1.push_back(m.f1 ? json(*m.f1) : json(nullptr));
            acc.push_back(m.accuracy ? json(*m.accuracy) : json(nullptr));
            if (m.accuracy) {
              acc_sum += *m.accuracy;
              ++acc_n;
            }
          }
          cell["status"] = "ok";
          cell["f1"] = f1;
          cell["acc"] = acc;
          cell["avg_f1"] = report.avg_f1 ? json(*report.avg_f1) : json(nullptr);
          cell["avg_acc"] = acc_n ? json(acc_sum / static_cast<double>(acc_n)) : json(nullptr);
          cell["epochs"] = result.epochs.size();
          cell["mask_computations_per_epoch"] = result.epochs.empty() ? 0 : result.epochs.front().mask_computations;
          cell["wall_ms_per_epoch"] = result.epochs.empty() ? 0.0 : wall / static_cast<double>(result.epochs.size());
          cell["peak_live_bytes"] = peak;
          out << "avg F1 " << fmt_opt(report.avg_f1) << "\n";
        } catch (const std::exception& e) {
          cell["status"] = "failed";
          cell["error"] = e.what();
          out << "FAILED: " << e.what() << "\n";
        }
        cells.push_back(cell);
      }
    }
  }

  // Paired comparisons.
  auto find = [&](const std::string& d, const std::string& m, const std::string& i) -> const json* {
    for (const auto& cell : cells) {
      if (cell["deletion"] == d && cell["mode"] == m && cell["init"] == i && cell["status"] == "ok") return &cell;
    }
    return nullptr;
  };
  json gaps = json::array(), ratios = json::array();
  double gap_sum = 0.0;
  std::size_t gap_n = 0;
  for (auto mode : modes) {
    for (auto init : inits) {
      const auto* h = find("hard", to_string(mode), to_string(init));
      const auto* m = find("amd", to_string(mode), to_string(init));
      if (h && m && !(*h)["avg_f1"].is_null() && !(*m)["avg_f1"].is_null()) {
        const double g = (*h)["avg_f1"].get<double>() - (*m)["avg_f1"].get<double>();
        gaps.push_back({{"mode", to_string(mode)}, {"init", to_string(init)}, {"hard_minus_amd_f1", g}});
        gap_sum += g;
        ++gap_n;
      }
    }
  }
  for (auto del : deletions) {
    for (auto init : inits) {
      const auto* mt = find(to_string(del), "multitask", to_string(init));
      const auto* co = find(to_string(del), "collaborative", to_string(init));
      if (mt && co && (*mt)["mask_computations_per_epoch"].get<std::size_t>() > 0) {
        const double r = (*co)["mask_computations_per_epoch"].get<double>() /
                         (*mt)["mask_computations_per_epoch"].get<double>();
        ratios.push_back({{"deletion", to_string(del)},
                          {"init", to_string(init)},
                          {"counter_ratio", r},
                          {"ratio_matches_k", r == static_cast<double>(k)},
                          {"multitask_faster", (*mt)["wall_ms_per_epoch"].get<double>() <=
                                                   (*co)["wall_ms_per_epoch"].get<double>()}});
      }
    }
  }
  json summary = {{"hard_vs_amd", gaps},
                  {"mean_hard_minus_amd_f1", gap_n ? json(gap_sum / static_cast<double>(gap_n)) : json(nullptr)},
                  {"training_modes", ratios}};
  const json doc = {{"cells", cells}, {"summary", summary}};
  const fs::path dir(a.out);
  write_text(dir / "ablation.json", doc.dump(2) + "\n");

  std::ostringstream md;
  md << "| deletion | mode | init | status | Avg F1 | Avg ACC | mask computations/epoch | wall ms/epoch | peak live MB |\n";
  md << "|---|---|---|---|---:|---:|---:|---:|---:|\n";
  for (const auto& cell : cells) {
    md << "| " << cell["deletion"].get<std::string>() << " | " << cell["mode"].get<std::string>() << " | "
       << cell["init"].get<std::string>() << " | " << cell["status"].get<std::string>() << " | ";
    if (cell["status"] == "ok") {
      auto pct = [](const json& v) { return v.is_null() ? std::string("-") : fmt(v.get<double>() * 100.0, 1); };
      md << pct(cell["avg_f1"]) << " | " << pct(cell["avg_acc"]) << " | " << cell["mask_computations_per_epoch"]
         << " | " << fmt(cell["wall_ms_per_epoch"].get<double>(), 0) << " | "
         << fmt(cell["peak_live_bytes"].get<double>() / 1e6, 1) << " |\n";
    } else {
      md << "- | - | - | - | - |\n";
    }
  }
  write_text(dir / "ablation.md", md.str());
  out << md.str();
  if (gap_n) out << "mean hard - amd Avg F1: " << fmt(gap_sum / static_cast<double>(gap_n)) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- inspect

struct InspectArgs {
  std::string checkpoint, data;
  std::size_t n = 5;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
};

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  auto ck = load_checkpoint(a.checkpoint);
  const auto& model = *ck.model;
  const std::size_t k = model.config().num_aspects;
  const auto ds = load_jsonl(a.data, k);
  const auto mode = checkpoint_mode(ck, a.mode);
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(resolve_seed(a.seed, std::nullopt), Stream::kShuffle);
  rng.shuffle(order);
  order.resize(std::min(a.n, order.size()));

  Dataset sample{k, {}};
  for (auto i : order) sample.examples.push_back(ds.examples[i]);
  const auto pred = predict(model, encode(sample, ck.vocab), mode);
  for (std::size_t s = 0; s < order.size(); ++s) {
    const auto& ex = sample.examples[s];
    out << "example " << order[s] << "\n";
    for (std::size_t a2 = 0; a2 < k; ++a2) {
      out << "  A" << a2 << " pred " << pred.labels[s][a2];
      out << " label " << (ex.labels[a2] ? std::to_string(*ex.labels[a2]) : std::string("-"));
      out << ": " << render_inline(ex.tokens, pred.masks[s][a2], a2) << "\n";
      if (ex.rationales[a2]) out << "     gold: " << render_inline(ex.tokens, *ex.rationales[a2], a2) << "\n";
    }
  }
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-aspect rationale extraction", "mare"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "generate a synthetic corpus with planted rationales");
  s->add_option("--config", synth.config, "run config (JSON); its \"synth\" section is used");
  s->add_option("--out", synth.out, "output directory")->required();
  s->add_option("--seed", synth.seed, "generator seed (falls back to the config, then MARE_SEED)");
  s->add_option("-n,--examples", synth.n, "number of examples");
  s->add_option("-k,--aspects", synth.k, "number of aspects");
  s->add_option("--train-fraction", synth.train_fraction, "training split fraction");
  s->add_option("--val-fraction", synth.val_fraction, "validation split fraction");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model and write a checkpoint and metrics log");
  t->add_option("--config", tr.config, "run config (JSON)");
  t->add_option("--train", tr.train, "training JSONL");
  t->add_option("--val", tr.val, "validation JSONL");
  t->add_option("--out", tr.out, "output directory")->required();
  t->add_option("--seed", tr.seed, "model and training seed");
  tr.model.add(*t);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score a checkpoint on a dataset");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint JSON")->required();
  e->add_option("--data", ev.data, "dataset JSONL")->required();
  e->add_option("--out", ev.out, "output directory")->required();
  e->add_option("--format", ev.format, "json,csv,markdown or all");
  e->add_option("--mode", ev.mode, "forward mode (default: the training mode)");
  e->add_option("--aggregation", ev.aggregation, "micro|macro");
  e->add_flag("--accuracy-only", ev.accuracy_only, "allow data without gold rationales");
  e->add_flag("--probe", ev.probe, "run the deletion-completeness probe");
  e->add_option("--probe-examples", ev.probe_examples, "examples probed");
  e->add_option("--seed", ev.seed, "probe noise seed");

  AblateArgs ab;
  auto* b = app.add_subcommand("ablate", "train and score every deletion x mode x init combination");
  b->add_option("--config", ab.config, "run config (JSON)");
  b->add_option("--train", ab.train, "training JSONL");
  b->add_option("--val", ab.val, "validation JSONL");
  b->add_option("--test", ab.test, "test JSONL");
  b->add_option("--out", ab.out, "output directory")->required();
  b->add_option("--seed", ab.seed, "seed shared by every cell");
  b->add_option("--deletions", ab.deletions, "comma-separated deletion modes");
  b->add_option("--modes", ab.modes, "comma-separated training modes");
  b->add_option("--inits", ab.inits, "comma-separated init strategies");
  ab.model.add(*b);

  InspectArgs in;
  auto* i = app.add_subcommand("inspect", "print rationales of sampled examples");
  i->add_option("--checkpoint", in.checkpoint, "checkpoint JSON")->required();
  i->add_option("--data", in.data, "dataset JSONL")->required();
  i->add_option("-n,--count", in.n, "number of examples");
  i->add_option("--seed", in.seed, "sample seed");
  i->add_option("--mode", in.mode, "forward mode (default: the training mode)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*s) return cmd_synth(synth, out);
    if (*t) return cmd_train(tr, out);
    if (*e) return cmd_eval(ev, out);
    if (*b) return cmd_ablate(ab, out);
    if (*i) return cmd_inspect(in, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const SchemaError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const LengthError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const VocabularyError& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace mare::cli
