#pragma once

// Evaluation metrics (perplexity and token accuracy with per-task
// breakdowns) and the analytics exports: routing-utilization statistics and
// per-token fused-modulation heatmap data. Everything here runs the model
// in deterministic routing mode, so all outputs are pure functions of the
// parameters and the split.

#include <array>
#include <cmath>
#include <type_traits>
#include <cstdint>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hycam/adapters.hpp"
#include "hycam/backbone.hpp"
#include "hycam/graph.hpp"
#include "hycam/taskgen.hpp"
#include "hycam/util.hpp"

namespace hycam {

namespace detail {

// Mean accumulator shifted by the first observation. Constant inputs give
// the constant back bit-exactly, which keeps the statistics of an untrained
// (zero-logit) router exactly uniform instead of uniform-up-to-rounding.
struct ShiftedMean {
  double shift = 0.0;
  double acc = 0.0;
  std::int64_t n = 0;

  void add(double v) {
    if (n == 0)
      shift = v;
    else
      acc += v - shift;
    ++n;
  }
  double value() const { return n == 0 ? 0.0 : shift + acc / static_cast<double>(n); }
};

// log Σ exp over one logits row, computed stably in double.
template <typename T>
double row_logsumexp(const T* row, int n) {
  double mx = static_cast<double>(row[0]);
  for (int i = 1; i < n; ++i) mx = std::max(mx, static_cast<double>(row[i]));
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(static_cast<double>(row[i]) - mx);
  return mx + std::log(s);
}

template <typename T>
int row_argmax(const T* row, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

}  // namespace detail

struct TaskMetrics {
  double ppl = 0.0;
  double accuracy = 0.0;
  std::int64_t sample_count = 0;
  std::int64_t token_count = 0;
};

struct EvalReport {
  double ppl = 0.0;       // exp(mean masked NLL), target tokens only
  double accuracy = 0.0;  // argmax next-token match rate on target positions
  std::int64_t sample_count = 0;
  int checkpoint_step = -1;
  std::array<std::optional<TaskMetrics>, kNumTasks> per_task;

  // Flat key=value record, one entry per line.
  void write(std::ostream& os) const {
    os << "checkpoint_step=" << checkpoint_step << '\n';
    os << "sample_count=" << sample_count << '\n';
    os << "ppl=" << format_number(ppl) << '\n';
    os << "accuracy=" << format_number(accuracy) << '\n';
    for (int t = 0; t < kNumTasks; ++t) {
      const auto& m = per_task[static_cast<std::size_t>(t)];
      if (!m) continue;
      const std::string key = std::string("task.") + task_name(static_cast<Task>(t));
      os << key << ".ppl=" << format_number(m->ppl) << '\n';
      os << key << ".accuracy=" << format_number(m->accuracy) << '\n';
      os << key << ".sample_count=" << m->sample_count << '\n';
    }
  }
};

// Perplexity and accuracy over a split. NLL is pooled per token: overall
// PPL = exp(Σ NLL / Σ target tokens), and the per-task numbers pool within
// the task the same way.
template <typename T>
EvalReport evaluate(const BackboneModel<T>& model,
                    std::type_identity_t<const AdapterSet<T>*> adapters,
                    const std::vector<Sample>& samples, int checkpoint_step = -1) {
  if (samples.empty()) throw ConfigError("evaluate: empty split");
  std::array<double, kNumTasks> nll{};
  std::array<std::int64_t, kNumTasks> tokens{}, hits{}, counts{};
  const int V = model.config.vocab_size;

  for (const auto& s : samples) {
    std::vector<int> stream = s.prompt;
    stream.insert(stream.end(), s.target.begin(), s.target.end());
    Graph<T> g;
    auto res = lm_forward(g, stream, model, adapters, RouteMode::Deterministic, 0);
    auto vals = res.logits.values();
    const std::size_t ti = static_cast<std::size_t>(static_cast<int>(s.task));
    for (std::size_t t = s.prompt.size() - 1; t + 1 < stream.size(); ++t) {
      const T* row = vals.data() + t * static_cast<std::size_t>(V);
      const int target = stream[t + 1];
      nll[ti] += detail::row_logsumexp(row, V) - static_cast<double>(row[target]);
      hits[ti] += detail::row_argmax(row, V) == target ? 1 : 0;
      tokens[ti] += 1;
    }
    counts[ti] += 1;
  }

  EvalReport rep;
  rep.checkpoint_step = checkpoint_step;
  double nll_all = 0.0;
  std::int64_t tokens_all = 0, hits_all = 0;
  for (int t = 0; t < kNumTasks; ++t) {
    const std::size_t ti = static_cast<std::size_t>(t);
    rep.sample_count += counts[ti];
    if (counts[ti] == 0) continue;
    TaskMetrics m;
    m.sample_count = counts[ti];
    m.token_count = tokens[ti];
    m.ppl = std::exp(nll[ti] / static_cast<double>(tokens[ti]));
    m.accuracy = static_cast<double>(hits[ti]) / static_cast<double>(tokens[ti]);
    rep.per_task[ti] = m;
    nll_all += nll[ti];
    tokens_all += tokens[ti];
    hits_all += hits[ti];
  }
  rep.ppl = std::exp(nll_all / static_cast<double>(tokens_all));
  rep.accuracy = static_cast<double>(hits_all) / static_cast<double>(tokens_all);
  return rep;
}

struct RoutingStats {
  int n_layers = 0;
  int num_specialists = 0;
  std::vector<Task> tasks;  // tasks present in the split, ascending
  // mean plain routing weight per (layer, task, specialist); the task axis
  // is parallel to `tasks`
  std::vector<std::vector<std::vector<double>>> mean_weights;
  std::vector<std::vector<double>> layer_mean;  // pooled over all tokens, per layer
  std::vector<double> entropy_mean;             // mean routing entropy per layer
  double collapse = 0.0;                        // max pooled mean weight anywhere
};

// Averages the plain (noise-free, untempered) routing softmax per token,
// grouped by layer and task, over a split.
template <typename T>
RoutingStats routing_stats(const BackboneModel<T>& model, const AdapterSet<T>& adapters,
                           const std::vector<Sample>& samples) {
  if (samples.empty()) throw ConfigError("routing_stats: empty split");
  if (!variant_has_specialists(adapters.config.variant))
    throw ConfigError(std::string("routing_stats: variant ") +
                      variant_name(adapters.config.variant) + " has no router");
  const int n_layers = model.config.n_layers;
  const int n_s = adapters.config.num_specialists;

  std::vector<std::array<std::vector<detail::ShiftedMean>, kNumTasks>> per_task(
      static_cast<std::size_t>(n_layers));
  std::vector<std::vector<detail::ShiftedMean>> pooled(
      static_cast<std::size_t>(n_layers), std::vector<detail::ShiftedMean>(static_cast<std::size_t>(n_s)));
  std::vector<detail::ShiftedMean> entropy(static_cast<std::size_t>(n_layers));
  for (auto& layer : per_task)
    for (auto& task_acc : layer) task_acc.assign(static_cast<std::size_t>(n_s), {});

  for (const auto& s : samples) {
    std::vector<int> stream = s.prompt;
    stream.insert(stream.end(), s.target.begin(), s.target.end());
    Graph<T> g;
    auto res = lm_forward(g, stream, model, &adapters, RouteMode::Deterministic, 0);
    const std::size_t ti = static_cast<std::size_t>(static_cast<int>(s.task));
    for (std::size_t l = 0; l < res.routings.size(); ++l) {
      auto plain = res.routings[l].softmax_plain.values();
      const int L = res.routings[l].softmax_plain.rows();
      for (int tok = 0; tok < L; ++tok) {
        double h = 0.0;
        for (int k = 0; k < n_s; ++k) {
          const double p = static_cast<double>(plain[static_cast<std::size_t>(tok) * n_s + k]);
          per_task[l][ti][static_cast<std::size_t>(k)].add(p);
          pooled[l][static_cast<std::size_t>(k)].add(p);
          if (p > 0.0) h -= p * std::log(p);
        }
        entropy[l].add(h);
      }
    }
  }

  RoutingStats st;
  st.n_layers = n_layers;
  st.num_specialists = n_s;
  for (int t = 0; t < kNumTasks; ++t)
    if (per_task[0][static_cast<std::size_t>(t)][0].n > 0) st.tasks.push_back(static_cast<Task>(t));
  st.mean_weights.resize(static_cast<std::size_t>(n_layers));
  st.layer_mean.resize(static_cast<std::size_t>(n_layers));
  st.entropy_mean.resize(static_cast<std::size_t>(n_layers));
  for (int l = 0; l < n_layers; ++l) {
    const std::size_t li = static_cast<std::size_t>(l);
    for (Task task : st.tasks) {
      std::vector<double> w(static_cast<std::size_t>(n_s));
      for (int k = 0; k < n_s; ++k)
        w[static_cast<std::size_t>(k)] =
            per_task[li][static_cast<std::size_t>(static_cast<int>(task))][static_cast<std::size_t>(k)]
                .value();
      st.mean_weights[li].push_back(std::move(w));
    }
    st.layer_mean[li].resize(static_cast<std::size_t>(n_s));
    for (int k = 0; k < n_s; ++k) {
      const double m = pooled[li][static_cast<std::size_t>(k)].value();
      st.layer_mean[li][static_cast<std::size_t>(k)] = m;
      st.collapse = std::max(st.collapse, m);
    }
    st.entropy_mean[li] = entropy[li].value();
  }
  return st;
}

// One exported heatmap row: the fused modulation vector of one token at one
// layer of one input sample.
template <typename T>
struct ModulationSnapshot {
  int sample_id = 0;
  int layer = 0;
  int token = 0;
  std::vector<T> values;  // d entries
};

template <typename T>
std::vector<ModulationSnapshot<T>> snapshot_modulation(const BackboneModel<T>& model,
                                                       const AdapterSet<T>& adapters,
                                                       const std::vector<int>& tokens,
                                                       int sample_id = 0) {
  Graph<T> g;
  auto res = lm_forward(g, tokens, model, &adapters, RouteMode::Deterministic, 0);
  std::vector<ModulationSnapshot<T>> out;
  const int d = model.config.d_model;
  for (std::size_t l = 0; l < res.modulations.size(); ++l) {
    auto vals = res.modulations[l].values();
    const int L = res.modulations[l].rows();
    for (int tok = 0; tok < L; ++tok) {
      ModulationSnapshot<T> snap;
      snap.sample_id = sample_id;
      snap.layer = static_cast<int>(l);
      snap.token = tok;
      snap.values.assign(vals.begin() + static_cast<std::ptrdiff_t>(tok) * d,
                         vals.begin() + static_cast<std::ptrdiff_t>(tok + 1) * d);
      out.push_back(std::move(snap));
    }
  }
  return out;
}

// CSV with header; one row per (layer, token). Values use shortest
// round-trip decimal formatting, so parsing them back is bit-exact.
template <typename T>
void export_heatmap(const std::vector<ModulationSnapshot<T>>& snaps, std::ostream& os) {
  if (snaps.empty()) throw ConfigError("export_heatmap: no snapshots");
  const std::size_t d = snaps.front().values.size();
  os << "sample,layer,token";
  for (std::size_t j = 0; j < d; ++j) os << ",a" << j;
  os << '\n';
  for (const auto& s : snaps) {
    os << s.sample_id << ',' << s.layer << ',' << s.token;
    for (T v : s.values) os << ',' << format_number(v);
    os << '\n';
  }
}

// CSV with header; one row per (layer, task) carrying the mean routing
// weights of that pair.
inline void export_heatmap(const RoutingStats& stats, std::ostream& os) {
  os << "layer,task";
  for (int k = 0; k < stats.num_specialists; ++k) os << ",w" << k;
  os << '\n';
  for (int l = 0; l < stats.n_layers; ++l)
    for (std::size_t t = 0; t < stats.tasks.size(); ++t) {
      os << l << ',' << task_name(stats.tasks[t]);
      for (double w : stats.mean_weights[static_cast<std::size_t>(l)][t])
        os << ',' << format_number(w);
      os << '\n';
    }
}

template <typename X>
void export_heatmap_file(const X& x, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("export_heatmap: cannot write " + path);
  export_heatmap(x, f);
  f.flush();
  if (!f) throw IoError("export_heatmap: write failed for " + path);
}

}  // namespace hycam
