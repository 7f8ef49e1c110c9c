#pragma once

// Synthetic multi-task sequence corpus: five structurally distinct tasks
// over one small vocabulary. Generation is pure integer logic driven by a
// seeded Rng, so corpora are identical across platforms.

#include <algorithm>
#include <array>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "hycam/graph.hpp"  // exception types
#include "hycam/rng.hpp"

namespace hycam {

enum class Task : int { Copy = 0, Rev = 1, Sum = 2, Sort = 3, Par = 4 };
inline constexpr int kNumTasks = 5;

inline const char* task_name(Task t) {
  switch (t) {
    case Task::Copy: return "copy";
    case Task::Rev: return "rev";
    case Task::Sum: return "sum";
    case Task::Sort: return "sort";
    case Task::Par: return "par";
  }
  return "?";
}

inline Task task_from_name(const std::string& s) {
  for (int i = 0; i < kNumTasks; ++i)
    if (s == task_name(static_cast<Task>(i))) return static_cast<Task>(i);
  throw ConfigError("unknown task name: " + s);
}

// Fixed symbol table: digits, letters, one tag per task, and the four
// structural markers. <pad> is excluded from every loss by construction.
class Vocabulary {
 public:
  Vocabulary() {
    for (int d = 0; d <= 9; ++d) push(std::string(1, static_cast<char>('0' + d)));
    for (char c = 'a'; c <= 'z'; ++c) push(std::string(1, c));
    for (int t = 0; t < kNumTasks; ++t) push("<" + std::string(task_name(static_cast<Task>(t))) + ">");
    bos_ = push("<bos>");
    sep_ = push("<sep>");
    eos_ = push("<eos>");
    pad_ = push("<pad>");
  }

  int size() const { return static_cast<int>(symbols_.size()); }
  const std::string& symbol(int id) const { return symbols_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& sym) const {
    auto it = ids_.find(sym);
    if (it == ids_.end()) throw ConfigError("unknown symbol: " + sym);
    return it->second;
  }

  int digit_id(int d) const { return d; }
  int letter_id(char c) const { return 10 + (c - 'a'); }
  int tag_id(Task t) const { return 36 + static_cast<int>(t); }
  int bos_id() const { return bos_; }
  int sep_id() const { return sep_; }
  int eos_id() const { return eos_; }
  int pad_id() const { return pad_; }

  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < text.size();) {
      if (text[i] == '<') {
        const auto close = text.find('>', i);
        if (close == std::string::npos) throw ConfigError("unterminated token in: " + text);
        out.push_back(id(text.substr(i, close - i + 1)));
        i = close + 1;
      } else {
        out.push_back(id(text.substr(i, 1)));
        ++i;
      }
    }
    return out;
  }

  std::string detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int t : ids) out += symbol(t);
    return out;
  }

 private:
  int push(const std::string& s) {
    ids_[s] = static_cast<int>(symbols_.size());
    symbols_.push_back(s);
    return static_cast<int>(symbols_.size()) - 1;
  }
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> ids_;
  int bos_ = -1, sep_ = -1, eos_ = -1, pad_ = -1;
};

// One task instance: prompt X = (tag, payload..., <sep>), target
// Y = (answer..., <eos>).
struct Sample {
  Task task = Task::Copy;
  std::vector<int> prompt;
  std::vector<int> target;

  int length() const { return static_cast<int>(prompt.size() + target.size()); }
};

namespace detail {

inline std::vector<int> payload_tokens(const Sample& s) {
  // strip the leading task tag and the trailing separator
  return {s.prompt.begin() + 1, s.prompt.end() - 1};
}

inline std::vector<int> answer_for(Task task, const std::vector<int>& payload,
                                   const Vocabulary& vocab) {
  switch (task) {
    case Task::Copy:
      return payload;
    case Task::Rev: {
      std::vector<int> r(payload.rbegin(), payload.rend());
      return r;
    }
    case Task::Sum: {
      const int n1 = payload[0] * 10 + payload[1];
      const int n2 = payload[2] * 10 + payload[3];
      const int s = (n1 + n2) % 100;
      return {vocab.digit_id(s / 10), vocab.digit_id(s % 10)};
    }
    case Task::Sort: {
      std::vector<int> r = payload;
      std::sort(r.begin(), r.end());
      return r;
    }
    case Task::Par: {
      std::int64_t count = std::count(payload.begin(), payload.end(), vocab.letter_id('a'));
      return {vocab.letter_id(count % 2 == 0 ? 'e' : 'o')};
    }
  }
  throw ConfigError("unreachable task id");
}

}  // namespace detail

// Deterministic sample generation. min_len/max_len bound the payload token
// count for the letter tasks; the sum task always uses two 2-digit numbers
// (four digit tokens).
inline std::vector<Sample> generate(Task task, int count, std::uint64_t seed, int min_len,
                                    int max_len, const Vocabulary& vocab) {
  if (count < 0) throw ConfigError("generate: negative count");
  if (min_len < 1 || min_len > max_len)
    throw ConfigError("generate: impossible payload length range [" + std::to_string(min_len) +
                      "," + std::to_string(max_len) + "]");
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(task) + 1));
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::vector<int> payload;
    if (task == Task::Sum) {
      const int n1 = 10 + static_cast<int>(rng.below(90));
      const int n2 = 10 + static_cast<int>(rng.below(90));
      payload = {vocab.digit_id(n1 / 10), vocab.digit_id(n1 % 10), vocab.digit_id(n2 / 10),
                 vocab.digit_id(n2 % 10)};
    } else {
      const int len = min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_len - min_len + 1)));
      payload.reserve(static_cast<std::size_t>(len));
      // parity uses a 3-letter alphabet so both answer classes stay likely
      const int alphabet = task == Task::Par ? 3 : 26;
      for (int j = 0; j < len; ++j)
        payload.push_back(vocab.letter_id(static_cast<char>('a' + rng.below(static_cast<std::uint64_t>(alphabet)))));
    }
    Sample s;
    s.task = task;
    s.prompt.push_back(vocab.tag_id(task));
    s.prompt.insert(s.prompt.end(), payload.begin(), payload.end());
    s.prompt.push_back(vocab.sep_id());
    s.target = detail::answer_for(task, payload, vocab);
    s.target.push_back(vocab.eos_id());
    out.push_back(std::move(s));
  }
  return out;
}

struct SplitDataset {
  std::vector<Sample> train;
  std::vector<Sample> validation;
  std::vector<Sample> test;
  std::uint64_t seed = 0;
  // counts[task][split] with split order train, validation, test
  std::array<std::array<int, 3>, kNumTasks> counts{};
};

// 7:2:1 partition, disjoint by payload string: samples sharing a payload
// (even across tasks) always land in the same split. Greedy assignment of
// shuffled payload groups to the split with the largest remaining deficit,
// which reproduces exact 70/20/10 whenever payloads are unique.
inline SplitDataset split(const std::vector<Sample>& samples, std::uint64_t seed) {
  std::array<int, kNumTasks> per_task{};
  for (const auto& s : samples) per_task[static_cast<std::size_t>(static_cast<int>(s.task))]++;
  for (int t = 0; t < kNumTasks; ++t)
    if (per_task[static_cast<std::size_t>(t)] > 0 && per_task[static_cast<std::size_t>(t)] < 10)
      throw ConfigError(std::string("split: task ") + task_name(static_cast<Task>(t)) +
                        " has fewer than 10 samples");
  if (samples.empty()) throw ConfigError("split: no samples");

  Vocabulary vocab;
  std::map<std::string, std::vector<int>> groups;  // payload -> sample indices (ordered keys)
  for (std::size_t i = 0; i < samples.size(); ++i)
    groups[vocab.detokenize(detail::payload_tokens(samples[i]))].push_back(static_cast<int>(i));

  std::vector<const std::vector<int>*> order;
  order.reserve(groups.size());
  for (const auto& [key, idx] : groups) order.push_back(&idx);
  Rng rng(mix_seed(seed, 0x51e717ull));
  rng.shuffle(order.begin(), order.end());

  // per-task remaining deficit toward the 7:2:1 targets
  std::array<std::array<double, 3>, kNumTasks> deficit{};
  const std::array<double, 3> frac = {0.7, 0.2, 0.1};
  for (int t = 0; t < kNumTasks; ++t)
    for (int s = 0; s < 3; ++s)
      deficit[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)] =
          frac[static_cast<std::size_t>(s)] * per_task[static_cast<std::size_t>(t)];

  std::vector<int> assignment(samples.size(), 0);
  for (const auto* group : order) {
    std::array<double, 3> need{};
    for (int idx : *group) {
      const int t = static_cast<int>(samples[static_cast<std::size_t>(idx)].task);
      for (int s = 0; s < 3; ++s)
        need[static_cast<std::size_t>(s)] +=
            std::max(0.0, deficit[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)]);
    }
    int best = 0;
    for (int s = 1; s < 3; ++s)
      if (need[static_cast<std::size_t>(s)] > need[static_cast<std::size_t>(best)]) best = s;
    for (int idx : *group) {
      assignment[static_cast<std::size_t>(idx)] = best;
      const int t = static_cast<int>(samples[static_cast<std::size_t>(idx)].task);
      deficit[static_cast<std::size_t>(t)][static_cast<std::size_t>(best)] -= 1.0;
    }
  }

  SplitDataset out;
  out.seed = seed;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int s = assignment[i];
    const int t = static_cast<int>(samples[i].task);
    out.counts[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)]++;
    (s == 0 ? out.train : s == 1 ? out.validation : out.test).push_back(samples[i]);
  }
  if (samples.size() >= 10 &&
      (out.train.empty() || out.validation.empty() || out.test.empty()))
    throw ConfigError(
        "split: duplicate-heavy payloads prevent a disjoint 7:2:1 partition; regenerate with "
        "more distinct payloads");
  return out;
}

// One padded batch: row-aligned token streams X++Y, a mask that is true
// exactly on target-token positions, and per-row task ids.
struct Batch {
  std::vector<std::vector<int>> tokens;
  std::vector<std::vector<std::uint8_t>> target_mask;
  std::vector<Task> task_ids;
  std::vector<int> lengths;  // unpadded stream lengths
  int width = 0;
};

inline std::vector<Batch> batchify(const std::vector<Sample>& samples, int batch_size, int pad_id,
                                   int max_seq_len) {
  if (batch_size < 1) throw ConfigError("batchify: batch_size must be >= 1");
  std::vector<Batch> out;
  for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    Batch b;
    int width = 0;
    for (std::size_t i = start; i < end; ++i) {
      if (samples[i].length() > max_seq_len)
        throw ConfigError("batchify: sample of length " + std::to_string(samples[i].length()) +
                          " exceeds max_seq_len " + std::to_string(max_seq_len));
      width = std::max(width, samples[i].length());
    }
    b.width = width;
    for (std::size_t i = start; i < end; ++i) {
      const Sample& s = samples[i];
      std::vector<int> row = s.prompt;
      row.insert(row.end(), s.target.begin(), s.target.end());
      std::vector<std::uint8_t> mask(row.size(), 0);
      std::fill(mask.begin() + static_cast<std::ptrdiff_t>(s.prompt.size()), mask.end(), 1);
      b.lengths.push_back(static_cast<int>(row.size()));
      row.resize(static_cast<std::size_t>(width), pad_id);
      mask.resize(static_cast<std::size_t>(width), 0);
      b.tokens.push_back(std::move(row));
      b.target_mask.push_back(std::move(mask));
      b.task_ids.push_back(s.task);
    }
    out.push_back(std::move(b));
  }
  return out;
}

// Line format: task<TAB>prompt<TAB>target, symbols spelled out.
inline void dump_samples(std::ostream& os, const std::vector<Sample>& samples,
                         const Vocabulary& vocab) {
  for (const auto& s : samples)
    os << task_name(s.task) << '\t' << vocab.detokenize(s.prompt) << '\t'
       << vocab.detokenize(s.target) << '\n';
}

inline std::vector<Sample> load_samples(std::istream& is, const Vocabulary& vocab) {
  std::vector<Sample> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.find('\t', t1 + 1);
    if (t1 == std::string::npos || t2 == std::string::npos)
      throw IoError("malformed sample line: " + line);
    Sample s;
    s.task = task_from_name(line.substr(0, t1));
    s.prompt = vocab.tokenize(line.substr(t1 + 1, t2 - t1 - 1));
    s.target = vocab.tokenize(line.substr(t2 + 1));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace hycam
