#pragma once

// Dense tensor arithmetic on a reverse-mode differentiation tape.
//
// A Graph owns every node created through it; Tensor is a cheap handle
// (graph pointer + node id). Ops append nodes in topological order, so
// backward() is a single reverse sweep. All reductions run left to right
// over the contraction index, which keeps results bit-identical across
// runs in the same precision mode.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace hycam {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// A named, persistent weight. Lives outside any Graph; graphs bind to it
// by pointer and accumulate into `grad` during backward when trainable.
template <typename T>
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
class ParameterStore {
 public:
  Parameter<T>& add(const std::string& name, Shape shape, bool trainable = true) {
    if (by_name_.count(name))
      throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->shape = std::move(shape);
    p->value.assign(static_cast<std::size_t>(numel(p->shape)), T(0));
    p->grad.assign(p->value.size(), T(0));
    p->trainable = trainable;
    Parameter<T>* raw = p.get();
    params_.push_back(std::move(p));
    by_name_[name] = raw;
    return *raw;
  }

  Parameter<T>* find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

  std::int64_t trainable_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_)
      if (p->trainable) n += p->size();
    return n;
  }

  void zero_grads() {
    for (auto& p : params_) p->zero_grad();
  }

  void freeze_all() {
    for (auto& p : params_) p->trainable = false;
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& p : params_) fn(*p);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& p : params_) fn(*p);
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, Parameter<T>*> by_name_;
};

enum class Op : std::uint8_t {
  Input,
  Param,
  Add,
  Scale,
  Hadamard,
  MatMul,
  Transpose,
  Silu,
  LayerNorm,
  SoftmaxLastDim,
  SoftmaxCausal,
  CrossEntropySum,
  Embedding,
  SliceCols,
  ConcatCols,
  ConcatRows,
  RowScale,
  AddBias,
  SumAll,
  SumRows,
};

template <typename T>
class Graph;

// Value handle into a Graph. Copyable, trivially cheap.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Graph<T>* g, int id) : g_(g), id_(id) {}

  bool valid() const { return g_ != nullptr && id_ >= 0; }
  Graph<T>* graph() const { return g_; }
  int id() const { return id_; }

  const Shape& shape() const;
  int rows() const { return shape().at(0); }
  int cols() const { return shape().at(1); }
  std::span<const T> values() const;
  std::span<const T> grad() const;  // empty until backward reaches this node
  T item() const;

 private:
  Graph<T>* g_ = nullptr;
  int id_ = -1;
};

namespace detail {

// y += a * b           (m x k times k x n, contraction left to right in k)
template <typename T>
void mm_nn(const T* a, const T* b, T* y, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* yrow = y + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) yrow[j] += av * brow[j];
    }
  }
}

// y += a * b^T         (m x k times n x k)
template <typename T>
void mm_nt(const T* a, const T* b, T* y, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    T* yrow = y + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      yrow[j] += acc;
    }
  }
}

// y += a^T * b         (m x k transposed times m x n -> k x n)
template <typename T>
void mm_tn(const T* a, const T* b, T* y, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * k;
    const T* brow = b + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      T* yrow = y + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) yrow[j] += av * brow[j];
    }
  }
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) {
    return T(1) / (T(1) + std::exp(-x));
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t size() const { return nodes_.size(); }

  // --- leaves ---------------------------------------------------------

  // Constant leaf; never receives a gradient.
  Tensor<T> input(Shape shape, std::vector<T> values) {
    return make_leaf(std::move(shape), std::move(values), /*needs_grad=*/false);
  }

  // Differentiable leaf; grad readable through Tensor::grad() after backward.
  Tensor<T> variable(Shape shape, std::vector<T> values) {
    return make_leaf(std::move(shape), std::move(values), /*needs_grad=*/true);
  }

  // Leaf bound to a persistent Parameter. Values are viewed, not copied;
  // the parameter must outlive the graph and stay unmodified until the
  // graph is dropped. Gradients accumulate into p.grad iff p.trainable.
  Tensor<T> param(Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Tensor<T>(this, it->second);
    Node n;
    n.op = Op::Param;
    n.shape = p.shape;
    n.data = p.value.data();
    n.needs_grad = p.trainable;
    n.bound = &p;
    const int id = push(std::move(n));
    param_nodes_[&p] = id;
    return Tensor<T>(this, id);
  }

  // --- elementwise / structural ops ------------------------------------

  Tensor<T> add(Tensor<T> a, Tensor<T> b) {
    check_same_shape("add", a, b);
    Node n = binary(Op::Add, a, b, node(a).shape);
    const T* av = node(a).data;
    const T* bv = node(b).data;
    T* y = n.own.data();
    const std::int64_t m = numel(n.shape);
    for (std::int64_t i = 0; i < m; ++i) y[i] = av[i] + bv[i];
    return wrap(push(std::move(n)));
  }

  Tensor<T> scale(Tensor<T> a, T c) {
    Node n = unary(Op::Scale, a, node(a).shape);
    n.attr = c;
    const T* av = node(a).data;
    T* y = n.own.data();
    const std::int64_t m = numel(n.shape);
    for (std::int64_t i = 0; i < m; ++i) y[i] = c * av[i];
    return wrap(push(std::move(n)));
  }

  Tensor<T> hadamard(Tensor<T> a, Tensor<T> b) {
    check_same_shape("hadamard", a, b);
    Node n = binary(Op::Hadamard, a, b, node(a).shape);
    const T* av = node(a).data;
    const T* bv = node(b).data;
    T* y = n.own.data();
    const std::int64_t m = numel(n.shape);
    for (std::int64_t i = 0; i < m; ++i) y[i] = av[i] * bv[i];
    return wrap(push(std::move(n)));
  }

  Tensor<T> matmul(Tensor<T> a, Tensor<T> b) {
    const Shape& sa = node(a).shape;
    const Shape& sb = node(b).shape;
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
      throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " +
                       shape_str(sb));
    Node n = binary(Op::MatMul, a, b, Shape{sa[0], sb[1]});
    detail::mm_nn(node(a).data, node(b).data, n.own.data(), sa[0], sa[1], sb[1]);
    return wrap(push(std::move(n)));
  }

  Tensor<T> transpose(Tensor<T> a) {
    const Shape& s = node(a).shape;
    if (s.size() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_str(s));
    Node n = unary(Op::Transpose, a, Shape{s[1], s[0]});
    const T* av = node(a).data;
    T* y = n.own.data();
    for (int i = 0; i < s[0]; ++i)
      for (int j = 0; j < s[1]; ++j)
        y[static_cast<std::size_t>(j) * s[0] + i] = av[static_cast<std::size_t>(i) * s[1] + j];
    return wrap(push(std::move(n)));
  }

  Tensor<T> silu(Tensor<T> a) {
    Node n = unary(Op::Silu, a, node(a).shape);
    const T* av = node(a).data;
    T* y = n.own.data();
    const std::int64_t m = numel(n.shape);
    for (std::int64_t i = 0; i < m; ++i) y[i] = av[i] * detail::stable_sigmoid(av[i]);
    return wrap(push(std::move(n)));
  }

  // Per-row normalization of a rank-2 input, scaled by gain and shifted by
  // bias (both rank-1 of length cols).
  Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gain, Tensor<T> bias, T eps) {
    const Shape& s = node(x).shape;
    if (s.size() != 2) throw ShapeError("layer_norm: expected rank-2, got " + shape_str(s));
    const int rows = s[0], cols = s[1];
    if (node(gain).shape != Shape{cols} || node(bias).shape != Shape{cols})
      throw ShapeError("layer_norm: gain/bias must have shape [" + std::to_string(cols) +
                       "], got " + shape_str(node(gain).shape) + " and " +
                       shape_str(node(bias).shape));
    if (!(eps > T(0))) throw NumericError("layer_norm: eps must be positive");
    Node n = ternary(Op::LayerNorm, x, gain, bias, s);
    n.attr = eps;
    n.saved.resize(static_cast<std::size_t>(rows) * 2);  // mean, rstd per row
    const T* xv = node(x).data;
    const T* gv = node(gain).data;
    const T* bv = node(bias).data;
    T* y = n.own.data();
    for (int i = 0; i < rows; ++i) {
      const T* row = xv + static_cast<std::size_t>(i) * cols;
      T mean = 0;
      for (int j = 0; j < cols; ++j) mean += row[j];
      mean /= T(cols);
      T var = 0;
      for (int j = 0; j < cols; ++j) {
        const T d = row[j] - mean;
        var += d * d;
      }
      var /= T(cols);
      const T rstd = T(1) / std::sqrt(var + eps);
      n.saved[static_cast<std::size_t>(i) * 2] = mean;
      n.saved[static_cast<std::size_t>(i) * 2 + 1] = rstd;
      T* yrow = y + static_cast<std::size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) yrow[j] = (row[j] - mean) * rstd * gv[j] + bv[j];
    }
    return wrap(push(std::move(n)));
  }

  // Row-wise softmax with max subtraction.
  Tensor<T> softmax_lastdim(Tensor<T> x) {
    const Shape& s = node(x).shape;
    if (s.size() != 2) throw ShapeError("softmax_lastdim: expected rank-2, got " + shape_str(s));
    Node n = unary(Op::SoftmaxLastDim, x, s);
    softmax_rows(node(x).data, n.own.data(), s[0], s[1], /*causal=*/false);
    return wrap(push(std::move(n)));
  }

  // Row i is a softmax over columns 0..i; columns beyond i are exactly zero.
  // Input must be square (attention score matrix).
  Tensor<T> softmax_causal(Tensor<T> x) {
    const Shape& s = node(x).shape;
    if (s.size() != 2 || s[0] != s[1])
      throw ShapeError("softmax_causal: expected square rank-2, got " + shape_str(s));
    Node n = unary(Op::SoftmaxCausal, x, s);
    softmax_rows(node(x).data, n.own.data(), s[0], s[1], /*causal=*/true);
    return wrap(push(std::move(n)));
  }

  // Sum of negative log-likelihoods over masked-in rows, via log-sum-exp.
  // Row t scores targets[t]. Pair with scale(1/count) for the mean form.
  Tensor<T> cross_entropy_sum(Tensor<T> logits, const std::vector<int>& targets,
                              const std::vector<std::uint8_t>& mask) {
    const Shape& s = node(logits).shape;
    if (s.size() != 2) throw ShapeError("cross_entropy: expected rank-2 logits, got " + shape_str(s));
    const int rows = s[0], vocab = s[1];
    if (static_cast<int>(targets.size()) != rows || static_cast<int>(mask.size()) != rows)
      throw ShapeError("cross_entropy: targets/mask length must equal logit rows");
    int count = 0;
    for (int t = 0; t < rows; ++t) {
      if (!mask[t]) continue;
      ++count;
      if (targets[t] < 0 || targets[t] >= vocab)
        throw ShapeError("cross_entropy: target id " + std::to_string(targets[t]) +
                         " out of range [0," + std::to_string(vocab) + ")");
    }
    if (count == 0) throw NumericError("cross_entropy: every position is masked out");
    Node n = unary(Op::CrossEntropySum, logits, Shape{1});
    n.ints.assign(targets.begin(), targets.end());
    n.mask = mask;
    n.saved.assign(static_cast<std::size_t>(rows) * vocab, T(0));  // probs of masked rows
    const T* lv = node(logits).data;
    T total = 0;
    for (int t = 0; t < rows; ++t) {
      if (!mask[t]) continue;
      const T* row = lv + static_cast<std::size_t>(t) * vocab;
      T mx = row[0];
      for (int v = 1; v < vocab; ++v) mx = std::max(mx, row[v]);
      T sum = 0;
      for (int v = 0; v < vocab; ++v) sum += std::exp(row[v] - mx);
      const T lse = mx + std::log(sum);
      total += lse - row[targets[t]];
      T* prow = n.saved.data() + static_cast<std::size_t>(t) * vocab;
      for (int v = 0; v < vocab; ++v) prow[v] = std::exp(row[v] - lse);
    }
    n.own[0] = total;
    return wrap(push(std::move(n)));
  }

  // Mean negative log-likelihood over masked-in rows.
  Tensor<T> cross_entropy(Tensor<T> logits, const std::vector<int>& targets,
                          const std::vector<std::uint8_t>& mask) {
    int count = 0;
    for (auto m : mask) count += m ? 1 : 0;
    Tensor<T> s = cross_entropy_sum(logits, targets, mask);
    return scale(s, T(1) / T(count));
  }

  // Gathers rows of `table` at `ids`; backward scatter-adds into the table.
  Tensor<T> embedding(Tensor<T> table, const std::vector<int>& ids) {
    const Shape& s = node(table).shape;
    if (s.size() != 2) throw ShapeError("embedding: table must be rank-2, got " + shape_str(s));
    const int vocab = s[0], dim = s[1];
    Node n = unary(Op::Embedding, table, Shape{static_cast<int>(ids.size()), dim});
    n.ints = ids;
    const T* tv = node(table).data;
    T* y = n.own.data();
    for (std::size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] < 0 || ids[t] >= vocab)
        throw ShapeError("embedding: id " + std::to_string(ids[t]) + " out of range [0," +
                         std::to_string(vocab) + ")");
      const T* row = tv + static_cast<std::size_t>(ids[t]) * dim;
      std::copy(row, row + dim, y + t * dim);
    }
    return wrap(push(std::move(n)));
  }

  Tensor<T> slice_cols(Tensor<T> x, int start, int count) {
    const Shape& s = node(x).shape;
    if (s.size() != 2) throw ShapeError("slice_cols: expected rank-2, got " + shape_str(s));
    if (start < 0 || count < 1 || start + count > s[1])
      throw ShapeError("slice_cols: range [" + std::to_string(start) + "," +
                       std::to_string(start + count) + ") out of " + shape_str(s));
    Node n = unary(Op::SliceCols, x, Shape{s[0], count});
    n.ints = {start, count};
    const T* xv = node(x).data;
    T* y = n.own.data();
    for (int i = 0; i < s[0]; ++i)
      std::copy(xv + static_cast<std::size_t>(i) * s[1] + start,
                xv + static_cast<std::size_t>(i) * s[1] + start + count,
                y + static_cast<std::size_t>(i) * count);
    return wrap(push(std::move(n)));
  }

  Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const int rows = node(parts[0]).shape.at(0);
    int total = 0;
    for (const auto& p : parts) {
      const Shape& s = node(p).shape;
      if (s.size() != 2 || s[0] != rows)
        throw ShapeError("concat_cols: row mismatch at " + shape_str(s));
      total += s[1];
    }
    Node n;
    n.op = Op::ConcatCols;
    n.shape = Shape{rows, total};
    n.own.assign(static_cast<std::size_t>(rows) * total, T(0));
    n.data = n.own.data();
    for (const auto& p : parts) {
      n.in_many.push_back(p.id());
      n.needs_grad = n.needs_grad || node(p).needs_grad;
    }
    T* y = n.own.data();
    int off = 0;
    for (const auto& p : parts) {
      const Shape& s = node(p).shape;
      const T* pv = node(p).data;
      for (int i = 0; i < rows; ++i)
        std::copy(pv + static_cast<std::size_t>(i) * s[1],
                  pv + static_cast<std::size_t>(i) * s[1] + s[1],
                  y + static_cast<std::size_t>(i) * total + off);
      off += s[1];
    }
    return wrap(push(std::move(n)));
  }

  Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const int cols = node(parts[0]).shape.at(1);
    int total = 0;
    for (const auto& p : parts) {
      const Shape& s = node(p).shape;
      if (s.size() != 2 || s[1] != cols)
        throw ShapeError("concat_rows: column mismatch at " + shape_str(s));
      total += s[0];
    }
    Node n;
    n.op = Op::ConcatRows;
    n.shape = Shape{total, cols};
    n.own.assign(static_cast<std::size_t>(total) * cols, T(0));
    n.data = n.own.data();
    for (const auto& p : parts) {
      n.in_many.push_back(p.id());
      n.needs_grad = n.needs_grad || node(p).needs_grad;
    }
    T* y = n.own.data();
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t m = static_cast<std::size_t>(numel(node(p).shape));
      std::copy(node(p).data, node(p).data + m, y + off);
      off += m;
    }
    return wrap(push(std::move(n)));
  }

  // Scales row i of x by w[i]; w has shape [rows, 1].
  Tensor<T> row_scale(Tensor<T> x, Tensor<T> w) {
    const Shape& sx = node(x).shape;
    const Shape& sw = node(w).shape;
    if (sx.size() != 2 || sw != Shape{sx[0], 1})
      throw ShapeError("row_scale: weights must be " + shape_str({sx.empty() ? 0 : sx[0], 1}) +
                       ", got " + shape_str(sw) + " against " + shape_str(sx));
    Node n = binary(Op::RowScale, x, w, sx);
    const T* xv = node(x).data;
    const T* wv = node(w).data;
    T* y = n.own.data();
    for (int i = 0; i < sx[0]; ++i) {
      const T c = wv[i];
      for (int j = 0; j < sx[1]; ++j)
        y[static_cast<std::size_t>(i) * sx[1] + j] = c * xv[static_cast<std::size_t>(i) * sx[1] + j];
    }
    return wrap(push(std::move(n)));
  }

  // Adds a rank-1 bias to every row of a rank-2 input.
  Tensor<T> add_bias(Tensor<T> x, Tensor<T> b) {
    const Shape& sx = node(x).shape;
    const Shape& sb = node(b).shape;
    if (sx.size() != 2 || sb != Shape{sx[1]})
      throw ShapeError("add_bias: bias must have shape [" +
                       std::to_string(sx.size() == 2 ? sx[1] : -1) + "], got " + shape_str(sb));
    Node n = binary(Op::AddBias, x, b, sx);
    const T* xv = node(x).data;
    const T* bv = node(b).data;
    T* y = n.own.data();
    for (int i = 0; i < sx[0]; ++i)
      for (int j = 0; j < sx[1]; ++j)
        y[static_cast<std::size_t>(i) * sx[1] + j] = xv[static_cast<std::size_t>(i) * sx[1] + j] + bv[j];
    return wrap(push(std::move(n)));
  }

  // Sum of all entries, row-major order. Output shape [1].
  Tensor<T> sum_all(Tensor<T> x) {
    Node n = unary(Op::SumAll, x, Shape{1});
    const T* xv = node(x).data;
    const std::int64_t m = numel(node(x).shape);
    T acc = 0;
    for (std::int64_t i = 0; i < m; ++i) acc += xv[i];
    n.own[0] = acc;
    return wrap(push(std::move(n)));
  }

  // Column sums of a rank-2 input; output shape [cols].
  Tensor<T> sum_rows(Tensor<T> x) {
    const Shape& s = node(x).shape;
    if (s.size() != 2) throw ShapeError("sum_rows: expected rank-2, got " + shape_str(s));
    Node n = unary(Op::SumRows, x, Shape{s[1]});
    const T* xv = node(x).data;
    T* y = n.own.data();
    for (int i = 0; i < s[0]; ++i)
      for (int j = 0; j < s[1]; ++j) y[j] += xv[static_cast<std::size_t>(i) * s[1] + j];
    return wrap(push(std::move(n)));
  }

  // --- reverse sweep ----------------------------------------------------

  // Accumulates d(root)/d(leaf) into every reachable differentiable leaf
  // (variables and trainable parameters). Repeated calls keep accumulating
  // at the leaves; interior gradients are recomputed fresh each sweep.
  void backward(Tensor<T> root) {
    if (root.graph() != this) throw ShapeError("backward: tensor from another graph");
    Node& r = node(root);
    if (numel(r.shape) != 1)
      throw ShapeError("backward: root must be scalar, got " + shape_str(r.shape));
    if (!r.needs_grad) return;  // no trainable leaf beneath
    for (auto& n : nodes_) {
      const bool leaf = n.n_in == 0 && n.in_many.empty();
      if (!leaf) std::fill(n.grad.begin(), n.grad.end(), T(0));
    }
    ensure_grad(root.id())[0] += T(1);
    for (int id = root.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.needs_grad || grad_ptr(id) == nullptr) continue;
      backward_node(id, n);
    }
  }

  // Clears gradients of every node, including bound parameters touched by
  // this graph.
  void zero_grads() {
    for (auto& n : nodes_) {
      if (n.bound != nullptr) {
        n.bound->zero_grad();
      } else {
        std::fill(n.grad.begin(), n.grad.end(), T(0));
      }
    }
  }

  // --- node access (used by Tensor) -------------------------------------

  const Shape& shape_of(int id) const { return nodes_[static_cast<std::size_t>(id)].shape; }
  std::span<const T> values_of(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return {n.data, static_cast<std::size_t>(numel(n.shape))};
  }
  std::span<const T> grad_of(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.bound != nullptr) return {n.bound->grad.data(), n.bound->grad.size()};
    return {n.grad.data(), n.grad.size()};
  }

 private:
  struct Node {
    Op op = Op::Input;
    Shape shape;
    std::vector<T> own;        // owned forward values (empty for Param views)
    const T* data = nullptr;   // points at own or bound parameter values
    std::vector<T> grad;       // lazily allocated during backward
    bool needs_grad = false;
    Parameter<T>* bound = nullptr;
    std::array<int, 3> in{{-1, -1, -1}};
    int n_in = 0;
    std::vector<int> in_many;      // ConcatCols / ConcatRows inputs
    std::vector<T> saved;          // per-op cached intermediates
    std::vector<int> ints;         // ids / slice bounds / targets
    std::vector<std::uint8_t> mask;
    T attr = 0;                    // scale constant or layer-norm eps
  };

  std::vector<Node> nodes_;
  std::unordered_map<Parameter<T>*, int> param_nodes_;

  Node& node(Tensor<T> t) { return nodes_[static_cast<std::size_t>(t.id())]; }
  const Node& node(Tensor<T> t) const { return nodes_[static_cast<std::size_t>(t.id())]; }

  Tensor<T> wrap(int id) { return Tensor<T>(this, id); }

  int push(Node&& n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Tensor<T> make_leaf(Shape shape, std::vector<T> values, bool needs_grad) {
    if (static_cast<std::int64_t>(values.size()) != numel(shape))
      throw ShapeError("leaf: value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    Node n;
    n.shape = std::move(shape);
    n.own = std::move(values);
    n.data = n.own.data();
    n.needs_grad = needs_grad;
    return wrap(push(std::move(n)));
  }

  Node unary(Op op, Tensor<T> a, Shape out_shape) {
    check_graph(a);
    Node n;
    n.op = op;
    n.shape = std::move(out_shape);
    n.own.assign(static_cast<std::size_t>(numel(n.shape)), T(0));
    n.data = n.own.data();
    n.in[0] = a.id();
    n.n_in = 1;
    n.needs_grad = node(a).needs_grad;
    return n;
  }

  Node binary(Op op, Tensor<T> a, Tensor<T> b, Shape out_shape) {
    check_graph(a);
    check_graph(b);
    Node n;
    n.op = op;
    n.shape = std::move(out_shape);
    n.own.assign(static_cast<std::size_t>(numel(n.shape)), T(0));
    n.data = n.own.data();
    n.in[0] = a.id();
    n.in[1] = b.id();
    n.n_in = 2;
    n.needs_grad = node(a).needs_grad || node(b).needs_grad;
    return n;
  }

  Node ternary(Op op, Tensor<T> a, Tensor<T> b, Tensor<T> c, Shape out_shape) {
    Node n = binary(op, a, b, std::move(out_shape));
    check_graph(c);
    n.in[2] = c.id();
    n.n_in = 3;
    n.needs_grad = n.needs_grad || node(c).needs_grad;
    return n;
  }

  void check_graph(Tensor<T> t) const {
    if (t.graph() != this || t.id() < 0 ||
        t.id() >= static_cast<int>(nodes_.size()))
      throw ShapeError("tensor does not belong to this graph");
  }

  void check_same_shape(const char* what, Tensor<T> a, Tensor<T> b) {
    check_graph(a);
    check_graph(b);
    if (node(a).shape != node(b).shape)
      throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(node(a).shape) +
                       " vs " + shape_str(node(b).shape));
  }

  void softmax_rows(const T* x, T* y, int rows, int cols, bool causal) {
    for (int i = 0; i < rows; ++i) {
      const int live = causal ? i + 1 : cols;
      const T* row = x + static_cast<std::size_t>(i) * cols;
      T* yrow = y + static_cast<std::size_t>(i) * cols;
      T mx = row[0];
      for (int j = 1; j < live; ++j) mx = std::max(mx, row[j]);
      T sum = 0;
      for (int j = 0; j < live; ++j) {
        yrow[j] = std::exp(row[j] - mx);
        sum += yrow[j];
      }
      const T inv = T(1) / sum;
      for (int j = 0; j < live; ++j) yrow[j] *= inv;
      // columns beyond `live` stay exactly zero
    }
  }

  T* grad_ptr(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.bound != nullptr)
      return n.bound->grad.empty() ? nullptr : n.bound->grad.data();
    return n.grad.empty() ? nullptr : n.grad.data();
  }

  T* ensure_grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.bound != nullptr) return n.bound->grad.data();
    if (n.grad.empty()) n.grad.assign(static_cast<std::size_t>(numel(n.shape)), T(0));
    return n.grad.data();
  }

  bool wants(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  void backward_node(int id, Node& n) {
    const T* g = grad_ptr(id);
    switch (n.op) {
      case Op::Input:
        break;
      case Op::Param:
        // Gradient already lives in the bound parameter's buffer.
        break;
      case Op::Add: {
        const std::int64_t m = numel(n.shape);
        for (int s = 0; s < 2; ++s) {
          if (!wants(n.in[s])) continue;
          T* gi = ensure_grad(n.in[s]);
          for (std::int64_t i = 0; i < m; ++i) gi[i] += g[i];
        }
        break;
      }
      case Op::Scale: {
        if (!wants(n.in[0])) break;
        T* gi = ensure_grad(n.in[0]);
        const std::int64_t m = numel(n.shape);
        for (std::int64_t i = 0; i < m; ++i) gi[i] += n.attr * g[i];
        break;
      }
      case Op::Hadamard: {
        const std::int64_t m = numel(n.shape);
        const T* av = nodes_[n.in[0]].data;
        const T* bv = nodes_[n.in[1]].data;
        if (wants(n.in[0])) {
          T* ga = ensure_grad(n.in[0]);
          for (std::int64_t i = 0; i < m; ++i) ga[i] += g[i] * bv[i];
        }
        if (wants(n.in[1])) {
          T* gb = ensure_grad(n.in[1]);
          for (std::int64_t i = 0; i < m; ++i) gb[i] += g[i] * av[i];
        }
        break;
      }
      case Op::MatMul: {
        const Node& a = nodes_[n.in[0]];
        const Node& b = nodes_[n.in[1]];
        const int m = a.shape[0], k = a.shape[1], c = b.shape[1];
        if (wants(n.in[0])) detail::mm_nt(g, b.data, ensure_grad(n.in[0]), m, c, k);
        if (wants(n.in[1])) detail::mm_tn(a.data, g, ensure_grad(n.in[1]), m, k, c);
        break;
      }
      case Op::Transpose: {
        if (!wants(n.in[0])) break;
        T* gi = ensure_grad(n.in[0]);
        const int r = n.shape[0], c = n.shape[1];  // output dims
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j)
            gi[static_cast<std::size_t>(j) * r + i] += g[static_cast<std::size_t>(i) * c + j];
        break;
      }
      case Op::Silu: {
        if (!wants(n.in[0])) break;
        T* gi = ensure_grad(n.in[0]);
        const T* xv = nodes_[n.in[0]].data;
        const std::int64_t m = numel(n.shape);
        for (std::int64_t i = 0; i < m; ++i) {
          const T s = detail::stable_sigmoid(xv[i]);
          gi[i] += g[i] * s * (T(1) + xv[i] * (T(1) - s));
        }
        break;
      }
      case Op::LayerNorm:
        backward_layer_norm(n, g);
        break;
      case Op::SoftmaxLastDim:
      case Op::SoftmaxCausal: {
        if (!wants(n.in[0])) break;
        T* gi = ensure_grad(n.in[0]);
        const int rows = n.shape[0], cols = n.shape[1];
        const bool causal = n.op == Op::SoftmaxCausal;
        for (int i = 0; i < rows; ++i) {
          const int live = causal ? i + 1 : cols;
          const T* yrow = n.data + static_cast<std::size_t>(i) * cols;
          const T* grow = g + static_cast<std::size_t>(i) * cols;
          T dot = 0;
          for (int j = 0; j < live; ++j) dot += grow[j] * yrow[j];
          T* girow = gi + static_cast<std::size_t>(i) * cols;
          for (int j = 0; j < live; ++j) girow[j] += yrow[j] * (grow[j] - dot);
        }
        break;
      }
      case Op::CrossEntropySum: {
        if (!wants(n.in[0])) break;
        T* gi = ensure_grad(n.in[0]);
        const Node& lg = nodes_[n.in[0]];
        const int rows = lg.shape[0], vocab = lg.shape[1];
        const T gs = g[0];
        for (int t = 0; t < rows; ++t) {
          if (!n.mask[static_cast<std::size_t>(t)]) continue;
          const T* prow = n.saved.data() + static_cast<std::size_t>(t) * vocab;
          T* girow = gi + static_cast<std::size_t>(t) * vocab;
          for (int v = 0; v < vocab; ++v) girow[v] += gs * prow[v];
          girow[n.ints[static_cast<std::size_t>(t)]] -= gs;
        }
        break;
      }
      case Op::Embedding: {
        if (!wants(n.in[0])) break;
        T* gi = ensure_grad(n.in[0]);
        const int dim = n.shape[1];
        for (std::size_t t = 0; t < n.ints.size(); ++t) {
          const T* grow = g + t * dim;
          T* trow = gi + static_cast<std::size_t>(n.ints[t]) * dim;
          for (int j = 0; j < dim; ++j) trow[j] += grow[j];
        }
        break;
      }
      case Op::SliceCols: {
        if (!wants(n.in[0])) break;
        T* gi = ensure_grad(n.in[0]);
        const int src_cols = nodes_[n.in[0]].shape[1];
        const int start = n.ints[0], count = n.ints[1];
        for (int i = 0; i < n.shape[0]; ++i)
          for (int j = 0; j < count; ++j)
            gi[static_cast<std::size_t>(i) * src_cols + start + j] +=
                g[static_cast<std::size_t>(i) * count + j];
        break;
      }
      case Op::ConcatCols: {
        const int rows = n.shape[0], total = n.shape[1];
        int off = 0;
        for (int part : n.in_many) {
          const int c = nodes_[part].shape[1];
          if (wants(part)) {
            T* gi = ensure_grad(part);
            for (int i = 0; i < rows; ++i)
              for (int j = 0; j < c; ++j)
                gi[static_cast<std::size_t>(i) * c + j] +=
                    g[static_cast<std::size_t>(i) * total + off + j];
          }
          off += c;
        }
        break;
      }
      case Op::ConcatRows: {
        std::size_t off = 0;
        for (int part : n.in_many) {
          const std::size_t m = static_cast<std::size_t>(numel(nodes_[part].shape));
          if (wants(part)) {
            T* gi = ensure_grad(part);
            for (std::size_t i = 0; i < m; ++i) gi[i] += g[off + i];
          }
          off += m;
        }
        break;
      }
      case Op::RowScale: {
        const Node& x = nodes_[n.in[0]];
        const Node& w = nodes_[n.in[1]];
        const int rows = n.shape[0], cols = n.shape[1];
        if (wants(n.in[0])) {
          T* gx = ensure_grad(n.in[0]);
          for (int i = 0; i < rows; ++i) {
            const T c = w.data[i];
            for (int j = 0; j < cols; ++j)
              gx[static_cast<std::size_t>(i) * cols + j] += c * g[static_cast<std::size_t>(i) * cols + j];
          }
        }
        if (wants(n.in[1])) {
          T* gw = ensure_grad(n.in[1]);
          for (int i = 0; i < rows; ++i) {
            T acc = 0;
            for (int j = 0; j < cols; ++j)
              acc += g[static_cast<std::size_t>(i) * cols + j] * x.data[static_cast<std::size_t>(i) * cols + j];
            gw[i] += acc;
          }
        }
        break;
      }
      case Op::AddBias: {
        const int rows = n.shape[0], cols = n.shape[1];
        if (wants(n.in[0])) {
          T* gx = ensure_grad(n.in[0]);
          const std::int64_t m = numel(n.shape);
          for (std::int64_t i = 0; i < m; ++i) gx[i] += g[i];
        }
        if (wants(n.in[1])) {
          T* gb = ensure_grad(n.in[1]);
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < cols; ++j) gb[j] += g[static_cast<std::size_t>(i) * cols + j];
        }
        break;
      }
      case Op::SumAll: {
        if (!wants(n.in[0])) break;
        T* gi = ensure_grad(n.in[0]);
        const std::int64_t m = numel(nodes_[n.in[0]].shape);
        for (std::int64_t i = 0; i < m; ++i) gi[i] += g[0];
        break;
      }
      case Op::SumRows: {
        if (!wants(n.in[0])) break;
        T* gi = ensure_grad(n.in[0]);
        const int rows = nodes_[n.in[0]].shape[0];
        const int cols = nodes_[n.in[0]].shape[1];
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j) gi[static_cast<std::size_t>(i) * cols + j] += g[j];
        break;
      }
    }
  }

  void backward_layer_norm(Node& n, const T* g) {
    const Node& x = nodes_[n.in[0]];
    const Node& gain = nodes_[n.in[1]];
    const int rows = n.shape[0], cols = n.shape[1];
    T* gx = wants(n.in[0]) ? ensure_grad(n.in[0]) : nullptr;
    T* gg = wants(n.in[1]) ? ensure_grad(n.in[1]) : nullptr;
    T* gb = wants(n.in[2]) ? ensure_grad(n.in[2]) : nullptr;
    std::vector<T> dxhat(static_cast<std::size_t>(cols));
    for (int i = 0; i < rows; ++i) {
      const T mean = n.saved[static_cast<std::size_t>(i) * 2];
      const T rstd = n.saved[static_cast<std::size_t>(i) * 2 + 1];
      const T* xrow = x.data + static_cast<std::size_t>(i) * cols;
      const T* grow = g + static_cast<std::size_t>(i) * cols;
      if (gb != nullptr)
        for (int j = 0; j < cols; ++j) gb[j] += grow[j];
      if (gg != nullptr)
        for (int j = 0; j < cols; ++j) gg[j] += grow[j] * (xrow[j] - mean) * rstd;
      if (gx == nullptr) continue;
      T m1 = 0, m2 = 0;
      for (int j = 0; j < cols; ++j) {
        dxhat[static_cast<std::size_t>(j)] = grow[j] * gain.data[j];
        m1 += dxhat[static_cast<std::size_t>(j)];
        m2 += dxhat[static_cast<std::size_t>(j)] * (xrow[j] - mean) * rstd;
      }
      m1 /= T(cols);
      m2 /= T(cols);
      T* gxrow = gx + static_cast<std::size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) {
        const T xhat = (xrow[j] - mean) * rstd;
        gxrow[j] += rstd * (dxhat[static_cast<std::size_t>(j)] - m1 - xhat * m2);
      }
    }
  }
};

template <typename T>
const Shape& Tensor<T>::shape() const {
  return g_->shape_of(id_);
}
template <typename T>
std::span<const T> Tensor<T>::values() const {
  return g_->values_of(id_);
}
template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return g_->grad_of(id_);
}
template <typename T>
T Tensor<T>::item() const {
  auto v = values();
  if (v.size() != 1)
    throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
  return v[0];
}

}  // namespace hycam
