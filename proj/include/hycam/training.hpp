#pragma once

// Adaptation loop: masked autoregressive task loss plus weighted balance
// loss, AdamW over the trainable set only, cosine learning-rate decay with
// linear warmup, and patience-based early stopping on validation loss.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "hycam/adapters.hpp"
#include "hycam/backbone.hpp"
#include "hycam/graph.hpp"
#include "hycam/rng.hpp"
#include "hycam/taskgen.hpp"
#include "hycam/util.hpp"

namespace hycam {

struct TrainConfig {
  double learning_rate = 1e-3;
  double lambda_balance = 0.1;
  int max_steps = 1000;
  int batch_size = 16;
  int warmup_steps = -1;  // -1 → 5% of max_steps
  int early_stop_patience = 5;
  int eval_interval = 100;
  int eval_max_sequences = 128;  // validation subsample cap per evaluation
  std::uint64_t seed = 1;
  std::string precision = "f32";

  int effective_warmup() const { return warmup_steps >= 0 ? warmup_steps : max_steps / 20; }

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate: must be > 0");
    if (lambda_balance < 0.0) throw ConfigError("train.lambda_balance: must be >= 0");
    if (max_steps < 1) throw ConfigError("train.max_steps: must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
    if (eval_interval < 1) throw ConfigError("train.eval_interval: must be >= 1");
    if (early_stop_patience < 1) throw ConfigError("train.early_stop_patience: must be >= 1");
    if (eval_max_sequences < 1) throw ConfigError("train.eval_max_sequences: must be >= 1");
    if (effective_warmup() > max_steps)
      throw ConfigError("train.warmup_steps: exceeds max_steps");
    if (precision != "f32" && precision != "f64")
      throw ConfigError("train.precision: must be \"f32\" or \"f64\"");
  }
};

// Linear ramp to base_lr over `warmup` steps, then cosine decay to zero at
// max_steps.
inline double cosine_lr(int step, int warmup, int max_steps, double base_lr) {
  if (step < warmup) return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= max_steps) return 0.0;
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(max_steps - warmup);
  return base_lr * 0.5 * (1.0 + std::cos(3.141592653589793238462643383 * progress));
}

// Decoupled-weight-decay Adam over the trainable parameters of one store.
// Moment buffers exist exactly for trainable parameters.
template <typename T>
class AdamW {
 public:
  explicit AdamW(ParameterStore<T>& params, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8, double weight_decay = 0.01)
      : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    params.for_each([&](Parameter<T>& p) {
      if (!p.trainable) return;
      slots_.push_back({&p, std::vector<T>(p.value.size(), T(0)),
                        std::vector<T>(p.value.size(), T(0))});
    });
  }

  std::size_t state_count() const { return slots_.size(); }

  bool has_state_for(const std::string& name) const {
    for (const auto& s : slots_)
      if (s.p->name == name) return true;
    return false;
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& s : slots_) {
      for (std::size_t i = 0; i < s.p->value.size(); ++i) {
        const double g = static_cast<double>(s.p->grad[i]);
        const double m = beta1_ * static_cast<double>(s.m[i]) + (1.0 - beta1_) * g;
        const double v = beta2_ * static_cast<double>(s.v[i]) + (1.0 - beta2_) * g * g;
        s.m[i] = static_cast<T>(m);
        s.v[i] = static_cast<T>(v);
        const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_) +
                              weight_decay_ * static_cast<double>(s.p->value[i]);
        s.p->value[i] = static_cast<T>(static_cast<double>(s.p->value[i]) - lr * update);
      }
    }
  }

 private:
  struct Slot {
    Parameter<T>* p;
    std::vector<T> m, v;
  };
  std::vector<Slot> slots_;
  long t_ = 0;
  double beta1_, beta2_, eps_, weight_decay_;
};

// Patience-based stopping on a monitored validation loss. Improvement must
// beat the best value seen so far by more than min_delta to reset patience.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience, double min_delta = 1e-6)
      : patience_(patience), min_delta_(min_delta) {}

  // Returns true when training should stop after this observation.
  bool observe(double val) {
    if (val < best_) {  // true minimum, for best-checkpoint tracking
      best_ = val;
      best_index_ = n_;
    }
    if (val < reference_ - min_delta_) {
      reference_ = val;
      streak_ = 0;
    } else {
      ++streak_;
    }
    ++n_;
    return streak_ >= patience_;
  }

  double best() const { return best_; }
  int best_index() const { return best_index_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  double reference_ = std::numeric_limits<double>::infinity();
  int best_index_ = -1;
  int streak_ = 0;
  int n_ = 0;
};

// Masked next-token negative log-likelihood for one token stream: the logit
// row at position t scores token t+1, and a position is counted only when
// that next token is a target (ymask) token.
template <typename T>
struct SequenceNll {
  Tensor<T> nll_sum;
  int count = 0;
};

template <typename T>
SequenceNll<T> sequence_nll(Graph<T>& g, Tensor<T> logits, const std::vector<int>& stream,
                            const std::vector<std::uint8_t>& ymask) {
  const int L = static_cast<int>(stream.size());
  if (logits.shape().at(0) != L)
    throw ShapeError("sequence_nll: logits rows " + std::to_string(logits.shape().at(0)) +
                     " vs stream length " + std::to_string(L));
  std::vector<int> targets(static_cast<std::size_t>(L), 0);
  std::vector<std::uint8_t> scored(static_cast<std::size_t>(L), 0);
  int count = 0;
  for (int t = 0; t + 1 < L; ++t) {
    targets[static_cast<std::size_t>(t)] = stream[static_cast<std::size_t>(t) + 1];
    scored[static_cast<std::size_t>(t)] = ymask[static_cast<std::size_t>(t) + 1];
    count += scored[static_cast<std::size_t>(t)] ? 1 : 0;
  }
  if (count == 0) throw NumericError("sequence_nll: no scored target positions");
  SequenceNll<T> out;
  out.nll_sum = g.cross_entropy_sum(logits, targets, scored);
  out.count = count;
  return out;
}

// task + λ·balance, differentiable through both terms.
template <typename T>
Tensor<T> total_loss(Graph<T>& g, Tensor<T> task, std::optional<Tensor<T>> balance,
                     double lambda_balance) {
  if (!balance) return task;
  return g.add(task, g.scale(*balance, static_cast<T>(lambda_balance)));
}

struct LossBreakdown {
  int step = 0;
  double lr = 0.0;
  double task_loss = 0.0;
  double balance_loss = 0.0;
  double total = 0.0;
  std::optional<double> val_loss;
};

namespace detail {

// Forward a whole padded batch through the model, one trimmed row at a
// time; returns batch task loss, per-layer-averaged balance loss, and the
// routing outputs (for analytics).
template <typename T>
struct BatchForward {
  Tensor<T> task;
  std::optional<Tensor<T>> balance;
  std::vector<std::vector<RoutingOutput<T>>> routings_by_layer;
};

template <typename T>
BatchForward<T> batch_forward(Graph<T>& g, const BackboneModel<T>& model,
                              const AdapterSet<T>* adapters, const Batch& batch, RouteMode mode,
                              std::uint64_t noise_seed) {
  BatchForward<T> out;
  std::optional<Tensor<T>> nll_total;
  int count_total = 0;
  const int n_layers = model.config.n_layers;
  out.routings_by_layer.assign(static_cast<std::size_t>(n_layers), {});
  for (std::size_t row = 0; row < batch.tokens.size(); ++row) {
    const int len = batch.lengths[row];
    std::vector<int> stream(batch.tokens[row].begin(), batch.tokens[row].begin() + len);
    std::vector<std::uint8_t> ymask(batch.target_mask[row].begin(),
                                    batch.target_mask[row].begin() + len);
    auto res = lm_forward(g, stream, model, adapters, mode, mix_seed(noise_seed, row));
    auto nll = sequence_nll(g, res.logits, stream, ymask);
    nll_total = nll_total ? g.add(*nll_total, nll.nll_sum) : nll.nll_sum;
    count_total += nll.count;
    for (std::size_t l = 0; l < res.routings.size(); ++l)
      out.routings_by_layer[l].push_back(res.routings[l]);
  }
  out.task = g.scale(*nll_total, T(1) / static_cast<T>(count_total));
  if (!out.routings_by_layer.empty() && !out.routings_by_layer[0].empty()) {
    std::optional<Tensor<T>> acc;
    for (const auto& layer_routings : out.routings_by_layer) {
      auto b = load_balance_loss(g, layer_routings);
      acc = acc ? g.add(*acc, b) : b;
    }
    out.balance = g.scale(*acc, T(1) / static_cast<T>(n_layers));
  }
  return out;
}

}  // namespace detail

// One optimization step: stochastic-routing forward, backward, AdamW update
// at the scheduled learning rate, gradients cleared afterwards. `adapters`
// may be null (plain causal-LM training of the backbone itself).
template <typename T>
LossBreakdown train_step(BackboneModel<T>& model, AdapterSet<T>* adapters, const Batch& batch,
                         AdamW<T>& opt, const TrainConfig& cfg, int step) {
  Graph<T> g;
  auto fwd = detail::batch_forward(g, model, adapters, batch, RouteMode::Stochastic,
                                   mix_seed(cfg.seed, 0x5a3b1e, static_cast<std::uint64_t>(step)));
  auto total = total_loss(g, fwd.task, fwd.balance, cfg.lambda_balance);
  LossBreakdown lb;
  lb.step = step;
  lb.lr = cosine_lr(step, cfg.effective_warmup(), cfg.max_steps, cfg.learning_rate);
  lb.task_loss = static_cast<double>(fwd.task.item());
  lb.balance_loss = fwd.balance ? static_cast<double>(fwd.balance->item()) : 0.0;
  lb.total = static_cast<double>(total.item());
  if (!std::isfinite(lb.total))
    throw NumericError("train_step: non-finite loss at step " + std::to_string(step));
  g.zero_grads();
  g.backward(total);
  opt.step(lb.lr);
  g.zero_grads();
  return lb;
}

// Validation pass with deterministic routing: mean task NLL plus weighted
// balance over at most `cap` sequences.
template <typename T>
LossBreakdown validation_loss(const BackboneModel<T>& model, const AdapterSet<T>* adapters,
                              const std::vector<Sample>& val, double lambda_balance, int cap,
                              int pad_id) {
  if (val.empty()) throw ConfigError("validation_loss: empty validation set");
  std::vector<Sample> subset(val.begin(),
                             val.begin() + std::min<std::size_t>(val.size(),
                                                                 static_cast<std::size_t>(cap)));
  Graph<T> g;
  auto batches = batchify(subset, static_cast<int>(subset.size()), pad_id,
                          model.config.max_seq_len);
  auto fwd = detail::batch_forward(g, model, adapters, batches[0], RouteMode::Deterministic, 0);
  LossBreakdown lb;
  lb.task_loss = static_cast<double>(fwd.task.item());
  lb.balance_loss = fwd.balance ? static_cast<double>(fwd.balance->item()) : 0.0;
  lb.total = lb.task_loss + lambda_balance * lb.balance_loss;
  return lb;
}

inline void write_csv_row(std::ostream& os, const LossBreakdown& lb) {
  os << lb.step << ',' << format_number(lb.lr) << ',' << format_number(lb.task_loss) << ','
     << format_number(lb.balance_loss) << ',' << format_number(lb.total) << ',';
  if (lb.val_loss) os << format_number(*lb.val_loss);
  os << '\n';
}

template <typename T>
struct TrainResult {
  std::vector<LossBreakdown> history;
  int best_step = -1;                     // step of the best validation loss
  double best_val = 0.0;
  bool early_stopped = false;
  std::vector<std::vector<T>> best_values;  // optimized-store snapshot at best_step
};

// Shared loop for backbone pretraining (opt over model.params, adapters
// null) and adapter training (backbone frozen, opt over adapters->params).
// Batches draw tasks uniformly at random so every batch mixes tasks.
// Validation runs every eval_interval steps when `val` is nonempty; early
// stopping then monitors the validation total loss.
template <typename T>
TrainResult<T> run_training(BackboneModel<T>& model, AdapterSet<T>* adapters,
                            ParameterStore<T>& opt_params, const std::vector<Sample>& train,
                            const std::vector<Sample>& val, const TrainConfig& cfg, int pad_id,
                            std::ostream* csv = nullptr) {
  cfg.validate();
  if (train.empty()) throw ConfigError("run_training: empty training set");
  AdamW<T> opt(opt_params);
  std::array<std::vector<const Sample*>, kNumTasks> by_task;
  for (const auto& s : train) by_task[static_cast<std::size_t>(static_cast<int>(s.task))].push_back(&s);
  std::vector<int> live_tasks;
  for (int t = 0; t < kNumTasks; ++t)
    if (!by_task[static_cast<std::size_t>(t)].empty()) live_tasks.push_back(t);

  Rng batch_rng(mix_seed(cfg.seed, 0xba7c4ull));
  EarlyStopper stopper(cfg.early_stop_patience);
  TrainResult<T> result;
  const bool with_val = !val.empty();

  auto snapshot = [&] {
    std::vector<std::vector<T>> snap;
    opt_params.for_each([&](const Parameter<T>& p) { snap.push_back(p.value); });
    return snap;
  };

  if (csv != nullptr) *csv << "step,lr,task_loss,balance_loss,total_loss,val_loss\n";

  for (int step = 0; step < cfg.max_steps; ++step) {
    std::vector<Sample> chosen;
    chosen.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int t = live_tasks[static_cast<std::size_t>(batch_rng.below(live_tasks.size()))];
      const auto& pool = by_task[static_cast<std::size_t>(t)];
      chosen.push_back(*pool[static_cast<std::size_t>(batch_rng.below(pool.size()))]);
    }
    auto batches = batchify(chosen, cfg.batch_size, pad_id, model.config.max_seq_len);
    auto lb = train_step(model, adapters, batches[0], opt, cfg, step);

    const bool eval_now = with_val && ((step + 1) % cfg.eval_interval == 0);
    if (eval_now) {
      auto vl = validation_loss(model, adapters, val, cfg.lambda_balance,
                                cfg.eval_max_sequences, pad_id);
      lb.val_loss = vl.total;
      const double prev_best = stopper.best();
      const bool stop = stopper.observe(vl.total);
      if (vl.total < prev_best) {
        result.best_step = step;
        result.best_val = vl.total;
        result.best_values = snapshot();
      }
      if (stop) {
        result.early_stopped = true;
        result.history.push_back(lb);
        if (csv != nullptr) write_csv_row(*csv, lb);
        break;
      }
    }
    result.history.push_back(lb);
    if (csv != nullptr) write_csv_row(*csv, lb);
  }
  if (result.best_step < 0) {
    result.best_step = result.history.empty() ? 0 : result.history.back().step;
    result.best_val = result.history.empty() ? 0.0 : result.history.back().total;
    result.best_values = snapshot();
  }
  return result;
}

}  // namespace hycam
