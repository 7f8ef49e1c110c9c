#pragma once

// Implementations behind the CLI subcommands. Each command is a pure
// function of a validated RunConfig (plus explicit checkpoint paths), so
// tests can drive them directly without spawning processes; the CLI layer
// only parses arguments, picks the floating-point width, and maps
// exceptions to exit codes.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "hycam/adapters.hpp"
#include "hycam/backbone.hpp"
#include "hycam/checkpoint.hpp"
#include "hycam/config.hpp"
#include "hycam/eval.hpp"
#include "hycam/graph.hpp"
#include "hycam/taskgen.hpp"
#include "hycam/training.hpp"

namespace hycam {

// ---------------------------------------------------------------------------
// shared plumbing

struct Dataset {
  Vocabulary vocab;
  SplitDataset splits;
};

inline Dataset build_dataset(const DataConfig& cfg) {
  Dataset ds;
  std::vector<Sample> corpus;
  for (int t = 0; t < kNumTasks; ++t) {
    auto part = generate(static_cast<Task>(t), cfg.samples_per_task, cfg.seed, cfg.min_len,
                         cfg.max_len, ds.vocab);
    corpus.insert(corpus.end(), part.begin(), part.end());
  }
  ds.splits = split(corpus, cfg.seed);
  return ds;
}

inline const std::vector<Sample>& pick_split(const SplitDataset& ds, const std::string& name) {
  if (name == "train") return ds.train;
  if (name == "validation") return ds.validation;
  if (name == "test") return ds.test;
  throw ConfigError("split: must be train|validation|test, got '" + name + "'");
}

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  return f;
}

}  // namespace detail

inline std::string default_backbone_path(const RunConfig& run) {
  return run.paths.checkpoint_dir + "/backbone.ck";
}

inline std::string default_adapters_path(const RunConfig& run) {
  return run.paths.checkpoint_dir + "/adapters_" + variant_name(run.adapter.variant) + ".ck";
}

// Restores a parameter snapshot taken by run_training (same store, same
// iteration order).
template <typename T>
void restore_values(ParameterStore<T>& store, const std::vector<std::vector<T>>& snap) {
  std::size_t i = 0;
  store.for_each([&](Parameter<T>& p) {
    if (i >= snap.size() || snap[i].size() != p.value.size())
      throw ConfigError("restore_values: snapshot does not match the parameter store");
    p.value = snap[i++];
  });
  if (i != snap.size())
    throw ConfigError("restore_values: snapshot does not match the parameter store");
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainResult {
  std::string checkpoint_path;
  std::string csv_path;
  int steps = 0;
  double final_task_loss = 0.0;
};

// Causal-LM training of the whole backbone on the pooled corpus for the
// configured number of steps (no early stopping), then a checkpoint.
template <typename T>
PretrainResult cmd_pretrain(const RunConfig& run) {
  run.validate();
  auto ds = build_dataset(run.data);
  auto model = make_backbone<T>(run.backbone, run.train.seed);

  detail::ensure_dir(run.paths.checkpoint_dir);
  detail::ensure_dir(run.paths.log_dir);
  PretrainResult out;
  out.csv_path = run.paths.log_dir + "/pretrain_loss.csv";
  auto csv = detail::open_out(out.csv_path);

  TrainConfig tcfg = run.train_for_run();
  auto result = run_training(model, static_cast<AdapterSet<T>*>(nullptr), model.params,
                             ds.splits.train, {}, tcfg, ds.vocab.pad_id(), &csv);
  csv.flush();
  if (!csv) throw IoError("write failed for " + out.csv_path);

  out.steps = static_cast<int>(result.history.size());
  out.final_task_loss = result.history.empty() ? 0.0 : result.history.back().task_loss;
  out.checkpoint_path = default_backbone_path(run);
  save_backbone(out.checkpoint_path, model, out.steps);
  return out;
}

// ---------------------------------------------------------------------------
// adapt

struct AdaptResult {
  std::string checkpoint_path;
  std::string csv_path;
  int best_step = -1;
  double best_val = 0.0;
  bool early_stopped = false;
  int steps = 0;
};

// Freezes the checkpointed backbone, builds adapters for the configured
// variant, trains them with validation-based early stopping, and writes the
// best-validation adapter state.
template <typename T>
AdaptResult cmd_adapt(const RunConfig& run, const std::string& backbone_path) {
  run.validate();
  auto loaded = load_backbone<T>(backbone_path);
  auto& model = loaded.model;
  freeze(model);
  run.adapter.validate(model.config.d_model);
  auto adapters =
      make_adapters<T>(run.adapter, model.config.d_model, model.config.n_layers, run.train.seed);
  auto ds = build_dataset(run.data);

  detail::ensure_dir(run.paths.checkpoint_dir);
  detail::ensure_dir(run.paths.log_dir);
  AdaptResult out;
  out.csv_path = run.paths.log_dir + "/adapt_" + variant_name(run.adapter.variant) + "_loss.csv";
  auto csv = detail::open_out(out.csv_path);

  TrainConfig tcfg = run.train_for_run();
  auto result = run_training(model, &adapters, adapters.params, ds.splits.train,
                             ds.splits.validation, tcfg, ds.vocab.pad_id(), &csv);
  csv.flush();
  if (!csv) throw IoError("write failed for " + out.csv_path);

  restore_values(adapters.params, result.best_values);
  out.best_step = result.best_step;
  out.best_val = result.best_val;
  out.early_stopped = result.early_stopped;
  out.steps = static_cast<int>(result.history.size());
  out.checkpoint_path = default_adapters_path(run);
  save_adapters(out.checkpoint_path, adapters, run.lambda_balance, model.config, out.best_step);
  return out;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string backbone_path;
  std::string adapters_path;  // empty = evaluate the bare backbone
  std::string split = "test";
  int heatmap_sample = -1;  // >= 0 exports a modulation heatmap for that sample
};

struct EvalOutput {
  EvalReport report;
  std::string report_path;
  std::string routing_csv_path;  // empty when the variant has no router
  std::string heatmap_csv_path;  // empty unless requested
};

template <typename T>
EvalOutput cmd_eval(const RunConfig& run, const EvalOptions& opt) {
  run.validate();
  auto loaded = load_backbone<T>(opt.backbone_path);
  auto& model = loaded.model;
  freeze(model);

  std::optional<LoadedAdapters<T>> adapters;
  if (!opt.adapters_path.empty())
    adapters = load_adapters<T>(opt.adapters_path, model.config);  // enforces the hash pairing

  auto ds = build_dataset(run.data);
  const auto& samples = pick_split(ds.splits, opt.split);

  EvalOutput out;
  const int step = adapters ? adapters->best_step : loaded.step;
  out.report = evaluate(model, adapters ? &adapters->adapters : nullptr, samples, step);

  detail::ensure_dir(run.paths.export_dir);
  out.report_path = run.paths.export_dir + "/eval_report.txt";
  {
    auto f = detail::open_out(out.report_path);
    out.report.write(f);
  }
  if (adapters && variant_has_specialists(adapters->adapters.config.variant)) {
    auto stats = routing_stats(model, adapters->adapters, samples);
    out.routing_csv_path = run.paths.export_dir + "/routing_stats.csv";
    export_heatmap_file(stats, out.routing_csv_path);
  }
  if (opt.heatmap_sample >= 0) {
    if (!adapters) throw ConfigError("eval: modulation heatmap requires an adapter checkpoint");
    if (opt.heatmap_sample >= static_cast<int>(samples.size()))
      throw ConfigError("eval: sample index " + std::to_string(opt.heatmap_sample) +
                        " out of range for split of " + std::to_string(samples.size()));
    const Sample& s = samples[static_cast<std::size_t>(opt.heatmap_sample)];
    std::vector<int> stream = s.prompt;
    stream.insert(stream.end(), s.target.begin(), s.target.end());
    auto snaps = snapshot_modulation(model, adapters->adapters, stream, opt.heatmap_sample);
    out.heatmap_csv_path = run.paths.export_dir + "/modulation_sample" +
                           std::to_string(opt.heatmap_sample) + ".csv";
    export_heatmap_file(snaps, out.heatmap_csv_path);
  }
  return out;
}

// ---------------------------------------------------------------------------
// inspect-routing

struct RoutingOutputPaths {
  RoutingStats stats;
  std::string csv_path;
};

template <typename T>
RoutingOutputPaths cmd_inspect_routing(const RunConfig& run, const std::string& backbone_path,
                                       const std::string& adapters_path,
                                       const std::string& split_name) {
  run.validate();
  auto loaded = load_backbone<T>(backbone_path);
  freeze(loaded.model);
  auto adapters = load_adapters<T>(adapters_path, loaded.model.config);
  auto ds = build_dataset(run.data);
  RoutingOutputPaths out;
  out.stats = routing_stats(loaded.model, adapters.adapters, pick_split(ds.splits, split_name));
  detail::ensure_dir(run.paths.export_dir);
  out.csv_path = run.paths.export_dir + "/routing_stats.csv";
  export_heatmap_file(out.stats, out.csv_path);
  return out;
}

// ---------------------------------------------------------------------------
// export-modulation

template <typename T>
std::string cmd_export_modulation(const RunConfig& run, const std::string& backbone_path,
                                  const std::string& adapters_path, const std::string& split_name,
                                  int sample_index) {
  run.validate();
  auto loaded = load_backbone<T>(backbone_path);
  freeze(loaded.model);
  auto adapters = load_adapters<T>(adapters_path, loaded.model.config);
  auto ds = build_dataset(run.data);
  const auto& samples = pick_split(ds.splits, split_name);
  if (sample_index < 0 || sample_index >= static_cast<int>(samples.size()))
    throw ConfigError("export-modulation: sample index " + std::to_string(sample_index) +
                      " out of range for split of " + std::to_string(samples.size()));
  const Sample& s = samples[static_cast<std::size_t>(sample_index)];
  std::vector<int> stream = s.prompt;
  stream.insert(stream.end(), s.target.begin(), s.target.end());
  auto snaps = snapshot_modulation(loaded.model, adapters.adapters, stream, sample_index);
  detail::ensure_dir(run.paths.export_dir);
  const std::string path =
      run.paths.export_dir + "/modulation_sample" + std::to_string(sample_index) + ".csv";
  export_heatmap_file(snaps, path);
  return path;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradcheckReport {
  double tolerance = 1e-4;
  double max_rel_err = 0.0;
  bool pass = false;
  std::vector<GradcheckEntry> entries;   // one per trainable parameter
  std::vector<std::string> failures;     // names exceeding the tolerance

  void write(std::ostream& os) const {
    os << "gradcheck " << (pass ? "PASS" : "FAIL") << " max_rel_err="
       << format_number(max_rel_err) << " tolerance=" << format_number(tolerance) << '\n';
    for (const auto& e : entries)
      os << e.name << " max_rel_err=" << format_number(e.max_rel_err) << ' '
         << (e.max_rel_err <= tolerance ? "ok" : "FAIL") << '\n';
  }
};

// Analytic adapter gradients against central finite differences on a tiny
// 64-bit model with deterministic routing. Every trainable parameter is
// checked elementwise.
inline GradcheckReport cmd_gradcheck(const RunConfig& run) {
  BackboneConfig bcfg;  // tiny rig: d=16, 2 layers, forced f64
  bcfg.vocab_size = 45;
  bcfg.d_model = 16;
  bcfg.n_layers = 2;
  bcfg.n_heads = 2;
  bcfg.d_ff = 32;
  bcfg.max_seq_len = 48;
  AdapterConfig acfg = run.adapter;
  acfg.rank = std::min(acfg.rank, 4);
  acfg.num_specialists = std::min(acfg.num_specialists, 3);
  acfg.validate(bcfg.d_model);

  auto model = make_backbone<double>(bcfg, run.train.seed);
  freeze(model);
  auto adapters =
      make_adapters<double>(acfg, bcfg.d_model, bcfg.n_layers, run.train.seed + 1);
  // move off the zero-init point so every gradient path is active
  Rng rng(mix_seed(run.train.seed, 0x96adcull));
  adapters.params.for_each([&](Parameter<double>& p) {
    for (auto& v : p.value) v += 0.05 * rng.normal();
  });

  Vocabulary vocab;
  std::vector<Sample> fixed;
  for (int t = 0; t < kNumTasks; ++t) {
    auto part = generate(static_cast<Task>(t), 1, run.data.seed, 2, 3, vocab);
    fixed.insert(fixed.end(), part.begin(), part.end());
  }
  auto batch = batchify(fixed, static_cast<int>(fixed.size()), vocab.pad_id(),
                        bcfg.max_seq_len)[0];

  auto loss_value = [&]() {
    Graph<double> g;
    auto fwd = detail::batch_forward(g, model, &adapters, batch, RouteMode::Deterministic, 0);
    auto total = total_loss(g, fwd.task, fwd.balance, run.lambda_balance);
    return total.item();
  };

  // analytic gradients
  adapters.params.zero_grads();
  {
    Graph<double> g;
    auto fwd = detail::batch_forward(g, model, &adapters, batch, RouteMode::Deterministic, 0);
    auto total = total_loss(g, fwd.task, fwd.balance, run.lambda_balance);
    g.backward(total);
  }

  GradcheckReport rep;
  const double h = 1e-5;
  adapters.params.for_each([&](Parameter<double>& p) {
    if (!p.trainable) return;
    GradcheckEntry entry;
    entry.name = p.name;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double keep = p.value[i];
      p.value[i] = keep + h;
      const double up = loss_value();
      p.value[i] = keep - h;
      const double down = loss_value();
      p.value[i] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double an = p.grad[i];
      const double rel =
          std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3});
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    rep.max_rel_err = std::max(rep.max_rel_err, entry.max_rel_err);
    if (entry.max_rel_err > rep.tolerance) rep.failures.push_back(entry.name);
    rep.entries.push_back(std::move(entry));
  });
  adapters.params.zero_grads();
  rep.pass = rep.failures.empty();
  return rep;
}

}  // namespace hycam
