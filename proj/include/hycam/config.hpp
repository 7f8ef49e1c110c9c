#pragma once

// JSON run configuration: nested backbone / adapter / train / data / paths
// records, strict unknown-key rejection, dotted-path overrides
// (e.g. "adapter.tau=0.25"), and validation that names the offending field.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "hycam/adapters.hpp"
#include "hycam/backbone.hpp"
#include "hycam/graph.hpp"
#include "hycam/training.hpp"

namespace hycam {

struct DataConfig {
  std::uint64_t seed = 1;
  int samples_per_task = 200;
  int min_len = 2;
  int max_len = 8;

  void validate() const {
    if (samples_per_task < 10)
      throw ConfigError("data.samples_per_task: must be >= 10 for a usable split");
    if (min_len < 1 || min_len > max_len)
      throw ConfigError("data.min_len/max_len: need 1 <= min_len <= max_len");
  }
};

struct PathsConfig {
  std::string checkpoint_dir = "out";
  std::string log_dir = "out";
  std::string export_dir = "out";
};

struct RunConfig {
  BackboneConfig backbone;
  AdapterConfig adapter;
  double lambda_balance = 0.1;  // lives in the "adapter" JSON record
  TrainConfig train;
  DataConfig data;
  PathsConfig paths;

  // TrainConfig with the adapter-record balance weight threaded in.
  TrainConfig train_for_run() const {
    TrainConfig t = train;
    t.lambda_balance = lambda_balance;
    return t;
  }

  void validate() const {
    backbone.validate();
    adapter.validate(backbone.d_model);
    if (lambda_balance < 0.0) throw ConfigError("adapter.lambda_balance: must be >= 0");
    train_for_run().validate();
    data.validate();
    // tag + payload + sep + answer + eos; the sum task is fixed at 9 tokens
    const int worst = std::max(2 * data.max_len + 3, 9);
    if (worst > backbone.max_seq_len)
      throw ConfigError("data.max_len: longest possible sample (" + std::to_string(worst) +
                        " tokens) exceeds backbone.max_seq_len (" +
                        std::to_string(backbone.max_seq_len) + ")");
  }
};

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& j, const std::string& section,
                           std::initializer_list<const char*> known) {
  if (!j.is_object()) throw ConfigError("config: section '" + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok)
      throw ConfigError("config: unknown key '" + it.key() + "' in section '" + section + "'");
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad value type for '" + section + "." + key + "'");
  }
}

inline void read_backbone(const json& j, BackboneConfig& c) {
  reject_unknown(j, "backbone",
                 {"vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len",
                  "layer_norm_eps"});
  read_field(j, "vocab_size", c.vocab_size, "backbone");
  read_field(j, "d_model", c.d_model, "backbone");
  read_field(j, "n_layers", c.n_layers, "backbone");
  read_field(j, "n_heads", c.n_heads, "backbone");
  read_field(j, "d_ff", c.d_ff, "backbone");
  read_field(j, "max_seq_len", c.max_seq_len, "backbone");
  read_field(j, "layer_norm_eps", c.layer_norm_eps, "backbone");
}

inline void read_adapter(const json& j, AdapterConfig& c, double& lambda_balance) {
  reject_unknown(j, "adapter", {"variant", "rank", "num_specialists", "tau", "lambda_balance"});
  if (j.contains("variant")) {
    std::string name;
    read_field(j, "variant", name, "adapter");
    c.variant = variant_from_name(name);
  }
  read_field(j, "rank", c.rank, "adapter");
  read_field(j, "num_specialists", c.num_specialists, "adapter");
  read_field(j, "tau", c.tau, "adapter");
  read_field(j, "lambda_balance", lambda_balance, "adapter");
}

inline void read_train(const json& j, TrainConfig& c) {
  reject_unknown(j, "train",
                 {"learning_rate", "max_steps", "batch_size", "warmup_steps",
                  "early_stop_patience", "eval_interval", "eval_max_sequences", "seed",
                  "precision"});
  read_field(j, "learning_rate", c.learning_rate, "train");
  read_field(j, "max_steps", c.max_steps, "train");
  read_field(j, "batch_size", c.batch_size, "train");
  read_field(j, "warmup_steps", c.warmup_steps, "train");
  read_field(j, "early_stop_patience", c.early_stop_patience, "train");
  read_field(j, "eval_interval", c.eval_interval, "train");
  read_field(j, "eval_max_sequences", c.eval_max_sequences, "train");
  read_field(j, "seed", c.seed, "train");
  read_field(j, "precision", c.precision, "train");
}

inline void read_data(const json& j, DataConfig& c) {
  reject_unknown(j, "data", {"seed", "samples_per_task", "min_len", "max_len"});
  read_field(j, "seed", c.seed, "data");
  read_field(j, "samples_per_task", c.samples_per_task, "data");
  read_field(j, "min_len", c.min_len, "data");
  read_field(j, "max_len", c.max_len, "data");
}

inline void read_paths(const json& j, PathsConfig& c) {
  reject_unknown(j, "paths", {"checkpoint_dir", "log_dir", "export_dir"});
  read_field(j, "checkpoint_dir", c.checkpoint_dir, "paths");
  read_field(j, "log_dir", c.log_dir, "paths");
  read_field(j, "export_dir", c.export_dir, "paths");
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  detail::reject_unknown(j, "<root>", {"backbone", "adapter", "train", "data", "paths"});
  RunConfig c;
  if (j.contains("backbone")) detail::read_backbone(j.at("backbone"), c.backbone);
  if (j.contains("adapter")) detail::read_adapter(j.at("adapter"), c.adapter, c.lambda_balance);
  if (j.contains("train")) detail::read_train(j.at("train"), c.train);
  if (j.contains("data")) detail::read_data(j.at("data"), c.data);
  if (j.contains("paths")) detail::read_paths(j.at("paths"), c.paths);
  return c;
}

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  return parse_run_config(j);
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config(ss.str());
}

// Applies one "dotted.path=value" override on top of a parsed config by
// editing the JSON form and re-parsing, so overrides obey exactly the same
// key and type checks as the file itself.
inline nlohmann::json apply_override(nlohmann::json j, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + spec + "': expected dotted.path=value");
  const std::string path = spec.substr(0, eq);
  const std::string raw = spec.substr(eq + 1);

  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t dot = path.find('.'); dot != std::string::npos;
       start = dot + 1, dot = path.find('.', start))
    parts.push_back(path.substr(start, dot - start));
  parts.push_back(path.substr(start));
  for (const auto& p : parts)
    if (p.empty()) throw ConfigError("override '" + spec + "': empty path segment");

  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);  // numbers, booleans
  } catch (const nlohmann::json::exception&) {
    value = raw;  // bare strings like full-hybrid
  }

  nlohmann::json* cur = &j;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) cur = &((*cur)[parts[i]]);
  (*cur)[parts.back()] = value;
  return j;
}

inline RunConfig parse_run_config_with_overrides(const nlohmann::json& base,
                                                 const std::vector<std::string>& overrides) {
  nlohmann::json j = base;
  for (const auto& o : overrides) j = apply_override(j, o);
  return parse_run_config(j);
}

// Canonical JSON records used in checkpoint headers and config hashing.
inline nlohmann::json backbone_record(const BackboneConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},   {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},         {"max_seq_len", c.max_seq_len},
          {"layer_norm_eps", c.layer_norm_eps}};
}

inline nlohmann::json adapter_record(const AdapterConfig& c, double lambda_balance) {
  return {{"variant", variant_name(c.variant)},
          {"rank", c.rank},
          {"num_specialists", c.num_specialists},
          {"tau", c.tau},
          {"lambda_balance", lambda_balance}};
}

}  // namespace hycam
