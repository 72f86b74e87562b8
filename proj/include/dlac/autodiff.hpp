#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Graph records every operation of one forward pass in creation order, which
// is already a topological order. backward() walks it in reverse once, pushes
// gradients into the Parameters that entered the graph, then clears the graph.

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <utility>

#include "dlac/tensor.hpp"

namespace dlac {

/// A trainable tensor plus its gradient buffer.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool requires_grad = true;
  bool grad_ready = false;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool trainable = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), requires_grad(trainable) {}

  void zero_grad() {
    grad.fill(0.0);
    grad_ready = false;
  }
};

class Graph;

/// Handle to a node of a Graph. Becomes stale once the graph is cleared.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;
  std::uint64_t generation = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false, nullptr); }

  /// Leaf bound to a parameter; its gradient is accumulated into `p.grad`.
  /// The leaf refers to `p.value` without copying; one leaf per parameter per graph.
  Var parameter(Parameter& p) { return bind(p, p.requires_grad ? &p : nullptr); }

  /// Read-only binding: no gradient flows back into `p`.
  Var parameter(const Parameter& p) { return bind(p, nullptr); }

  /// Records a derived node. `fn` runs during backward if any input needs a gradient.
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    for (auto in : inputs) needs = needs || nodes_[in].needs_grad;
    return push(std::move(value), std::move(inputs), std::move(fn), needs, nullptr);
  }

  const Tensor& value(const Var& v) const {
    check(v);
    return value(v.id);
  }
  const Tensor& value(std::size_t id) const {
    const auto& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  std::size_t input(std::size_t node, std::size_t k) const { return nodes_[node].inputs[k]; }
  const std::vector<std::size_t>& inputs(std::size_t node) const { return nodes_[node].inputs; }

  /// Gradient buffer of a node, zero-allocated on first use.
  Tensor& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.grad) n.grad.emplace(value(id).shape());
    return *n.grad;
  }
  bool has_grad(std::size_t id) const { return nodes_[id].grad.has_value(); }

  std::size_t size() const { return nodes_.size(); }
  std::uint64_t generation() const { return generation_; }

  /// Populates gradients of every parameter reachable from `loss`, then clears the graph.
  void backward(const Var& loss) {
    if (loss.graph != this) throw GraphError("backward: variable belongs to another graph");
    if (loss.generation != generation_ || loss.id >= nodes_.size()) {
      throw GraphError("backward: graph already consumed; run a new forward pass first");
    }
    const auto& lv = value(loss.id);
    if (lv.size() != 1) {
      throw GraphError("backward: loss must be a scalar, got shape " + shape_string(lv.shape()));
    }
    grad(loss.id)[0] = 1.0;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.needs_grad || !n.grad) continue;
      if (n.param) {
        auto& pg = n.param->grad.storage();
        const auto& g = n.grad->storage();
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += g[k];
        n.param->grad_ready = true;
      } else if (n.backward) {
        n.backward(*this, i);
      }
    }
    clear();
  }

  void clear() {
    nodes_.clear();
    bound_.clear();
    ++generation_;
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* ref = nullptr;
    std::optional<Tensor> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool needs_grad = false;
    Parameter* param = nullptr;
  };

  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool needs, Parameter* p) {
    nodes_.push_back(Node{std::move(value), nullptr, std::nullopt, std::move(inputs), std::move(fn), needs, p});
    return Var{this, nodes_.size() - 1, generation_};
  }

  Var bind(const Parameter& p, Parameter* grad_target) {
    const auto key = std::make_pair(static_cast<const void*>(&p), grad_target != nullptr);
    for (const auto& [k, id] : bound_)
      if (k == key) return Var{this, id, generation_};
    Node n;
    n.ref = &p.value;
    n.needs_grad = grad_target != nullptr;
    n.param = grad_target;
    nodes_.push_back(std::move(n));
    bound_.emplace_back(key, nodes_.size() - 1);
    return Var{this, nodes_.size() - 1, generation_};
  }

  void check(const Var& v) const {
    if (v.graph != this) throw GraphError("variable belongs to another graph");
    if (v.generation != generation_ || v.id >= nodes_.size()) {
      throw GraphError("stale variable: its graph was cleared by backward()");
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<std::pair<const void*, bool>, std::size_t>> bound_;
  std::uint64_t generation_ = 1;
};

inline const Tensor& Var::value() const {
  if (!graph) throw GraphError("uninitialised variable");
  return graph->value(*this);
}

namespace detail {

inline Graph& same_graph(const Var& a, const Var& b) {
  if (a.graph != b.graph || !a.graph) throw GraphError("operands belong to different graphs");
  return *a.graph;
}

inline void accumulate(Tensor& dst, std::span<const double> src, double scale = 1.0) {
  auto d = dst.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * src[i];
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + " shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

inline void require_matrix(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_string(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul shape mismatch: " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
  }
  const std::size_t p = av.rows(), q = av.cols(), r = bv.cols();
  Tensor out = Tensor::matrix(p, r);
  kernels::gemm(false, false, p, r, q, av.data().data(), bv.data().data(), out.data().data(), 0.0);
  return g.record(std::move(out), {a.id, b.id}, [p, q, r](Graph& g, std::size_t self) {
    const auto ia = g.input(self, 0), ib = g.input(self, 1);
    const double* dc = g.grad(self).data().data();
    if (g.needs_grad(ia)) {
      kernels::gemm(false, true, p, q, r, dc, g.value(ib).data().data(), g.grad(ia).data().data(), 1.0);
    }
    if (g.needs_grad(ib)) {
      kernels::gemm(true, false, q, r, p, g.value(ia).data().data(), dc, g.grad(ib).data().data(), 1.0);
    }
  });
}

inline Var transpose(const Var& a) {
  const Tensor& av = a.value();
  detail::require_matrix("transpose", av);
  return a.graph->record(av.transposed(), {a.id}, [](Graph& g, std::size_t self) {
    const Tensor& dc = g.grad(self);
    Tensor& da = g.grad(g.input(self, 0));
    for (std::size_t r = 0; r < dc.rows(); ++r)
      for (std::size_t c = 0; c < dc.cols(); ++c) da(c, r) += dc(r, c);
  });
}

/// Same data, new shape of equal size.
inline Var reshape(const Var& a, Shape shape) {
  Tensor out(std::move(shape), a.value().storage());
  return a.graph->record(std::move(out), {a.id}, [](Graph& g, std::size_t self) {
    detail::accumulate(g.grad(g.input(self, 0)), g.grad(self).data());
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  detail::require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  detail::accumulate(out, b.value().data());
  return g.record(std::move(out), {a.id, b.id}, [](Graph& g, std::size_t self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto in = g.input(self, k);
      if (g.needs_grad(in)) detail::accumulate(g.grad(in), g.grad(self).data());
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  detail::require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  detail::accumulate(out, b.value().data(), -1.0);
  return g.record(std::move(out), {a.id, b.id}, [](Graph& g, std::size_t self) {
    auto ia = g.input(self, 0), ib = g.input(self, 1);
    if (g.needs_grad(ia)) detail::accumulate(g.grad(ia), g.grad(self).data());
    if (g.needs_grad(ib)) detail::accumulate(g.grad(ib), g.grad(self).data(), -1.0);
  });
}

/// Hadamard product.
inline Var mul(const Var& a, const Var& b) {
  Graph& g = detail::same_graph(a, b);
  detail::require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  auto bd = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return g.record(std::move(out), {a.id, b.id}, [](Graph& g, std::size_t self) {
    auto ia = g.input(self, 0), ib = g.input(self, 1);
    auto dc = g.grad(self).data();
    if (g.needs_grad(ia)) {
      auto bv = g.value(ib).data();
      auto da = g.grad(ia).data();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += dc[i] * bv[i];
    }
    if (g.needs_grad(ib)) {
      auto av = g.value(ia).data();
      auto db = g.grad(ib).data();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += dc[i] * av[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.graph->record(std::move(out), {a.id}, [s](Graph& g, std::size_t self) {
    detail::accumulate(g.grad(g.input(self, 0)), g.grad(self).data(), s);
  });
}

/// Adds vector `bias` [q] to every row of `a` [p x q] (or to a vector [q]).
inline Var add_bias(const Var& a, const Var& bias) {
  Graph& g = detail::same_graph(a, bias);
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  if (bv.rank() != 1 || bv.size() != av.cols()) {
    throw DimensionError("add_bias shape mismatch: " + shape_string(av.shape()) + " + " +
                         shape_string(bv.shape()));
  }
  Tensor out = av;
  for (std::size_t r = 0; r < av.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return g.record(std::move(out), {a.id, bias.id}, [](Graph& g, std::size_t self) {
    auto ia = g.input(self, 0), ib = g.input(self, 1);
    const Tensor& dc = g.grad(self);
    if (g.needs_grad(ia)) detail::accumulate(g.grad(ia), dc.data());
    if (g.needs_grad(ib)) {
      Tensor& db = g.grad(ib);
      for (std::size_t r = 0; r < dc.rows(); ++r) {
        auto row = dc.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) db[c] += row[c];
      }
    }
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = 1.0 / (1.0 + std::exp(-v));
  return a.graph->record(std::move(out), {a.id}, [](Graph& g, std::size_t self) {
    auto y = g.value(self).data();
    auto dy = g.grad(self).data();
    auto da = g.grad(g.input(self, 0)).data();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * y[i] * (1.0 - y[i]);
  });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph->record(Tensor::scalar(s), {a.id}, [](Graph& g, std::size_t self) {
    const double d = g.grad(self)[0];
    for (auto& v : g.grad(g.input(self, 0)).data()) v += d;
  });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Sum of each row: [p x q] -> [p].
inline Var row_sum(const Var& a) {
  const Tensor& av = a.value();
  detail::require_matrix("row_sum", av);
  Tensor out = Tensor::vector(av.rows());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (double v : av.row(r)) s += v;
    out[r] = s;
  }
  return a.graph->record(std::move(out), {a.id}, [](Graph& g, std::size_t self) {
    const Tensor& dc = g.grad(self);
    Tensor& da = g.grad(g.input(self, 0));
    for (std::size_t r = 0; r < da.rows(); ++r)
      for (auto& v : da.row(r)) v += dc[r];
  });
}

/// Mean over rows: [t x d] -> [d].
inline Var mean_rows(const Var& a) {
  const Tensor& av = a.value();
  detail::require_matrix("mean_rows", av);
  const std::size_t t = av.rows();
  Tensor out = Tensor::vector(av.cols());
  for (std::size_t r = 0; r < t; ++r) detail::accumulate(out, av.row(r));
  for (auto& v : out.data()) v /= static_cast<double>(t);
  return a.graph->record(std::move(out), {a.id}, [t](Graph& g, std::size_t self) {
    const Tensor& dc = g.grad(self);
    Tensor& da = g.grad(g.input(self, 0));
    const double inv = 1.0 / static_cast<double>(t);
    for (std::size_t r = 0; r < t; ++r) {
      auto row = da.row(r);
      for (std::size_t c = 0; c < row.size(); ++c) row[c] += dc[c] * inv;
    }
  });
}

// ---------------------------------------------------------------------------
// Softmax

/// Normalizes each column over the row axis: every column of the result sums to 1.
inline Var column_softmax(const Var& a) {
  const Tensor& av = a.value();
  detail::require_matrix("column_softmax", av);
  const std::size_t t = av.rows(), k = av.cols();
  Tensor out(av.shape());
  std::vector<double> mx(k, -std::numeric_limits<double>::infinity()), tot(k, 0.0);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < k; ++j) mx[j] = std::max(mx[j], av(i, j));
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      out(i, j) = std::exp(av(i, j) - mx[j]);
      tot[j] += out(i, j);
    }
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < k; ++j) out(i, j) /= tot[j];
  return a.graph->record(std::move(out), {a.id}, [t, k](Graph& g, std::size_t self) {
    const Tensor& y = g.value(self);
    const Tensor& dy = g.grad(self);
    Tensor& da = g.grad(g.input(self, 0));
    std::vector<double> dot(k, 0.0);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < k; ++j) dot[j] += y(i, j) * dy(i, j);
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < k; ++j) da(i, j) += y(i, j) * (dy(i, j) - dot[j]);
  });
}

/// Normalizes each row over the column axis. Entries with mask == 0 are excluded
/// and come out exactly 0; every row must keep at least one entry.
inline Var row_softmax(const Var& a, const std::vector<std::uint8_t>* mask = nullptr) {
  const Tensor& av = a.value();
  detail::require_matrix("row_softmax", av);
  const std::size_t t = av.rows(), k = av.cols();
  if (mask && mask->size() != t * k) throw DimensionError("row_softmax mask size mismatch");
  auto keep = [mask, k](std::size_t i, std::size_t j) { return !mask || (*mask)[i * k + j] != 0; };
  Tensor out(av.shape());
  for (std::size_t i = 0; i < t; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j)
      if (keep(i, j)) mx = std::max(mx, av(i, j));
    if (!std::isfinite(mx)) throw DimensionError("row_softmax: row " + std::to_string(i) + " fully masked");
    double tot = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      out(i, j) = keep(i, j) ? std::exp(av(i, j) - mx) : 0.0;
      tot += out(i, j);
    }
    for (std::size_t j = 0; j < k; ++j) out(i, j) /= tot;
  }
  return a.graph->record(std::move(out), {a.id}, [t, k](Graph& g, std::size_t self) {
    const Tensor& y = g.value(self);
    const Tensor& dy = g.grad(self);
    Tensor& da = g.grad(g.input(self, 0));
    for (std::size_t i = 0; i < t; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < k; ++j) dot += y(i, j) * dy(i, j);
      for (std::size_t j = 0; j < k; ++j) da(i, j) += y(i, j) * (dy(i, j) - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing

/// Row lookup into an embedding table [V x d] -> [ids.size() x d].
inline Var gather_rows(const Var& table, std::span<const std::size_t> ids) {
  const Tensor& tv = table.value();
  detail::require_matrix("gather_rows", tv);
  if (ids.empty()) throw DimensionError("gather_rows: empty index list");
  const std::size_t d = tv.cols();
  Tensor out = Tensor::matrix(ids.size(), d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) {
      throw std::out_of_range("token id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(tv.rows()) + " rows");
    }
    std::copy_n(tv.row(ids[i]).data(), d, out.row(i).data());
  }
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  return table.graph->record(std::move(out), {table.id}, [idx = std::move(idx)](Graph& g, std::size_t self) {
    const Tensor& dc = g.grad(self);
    Tensor& dt = g.grad(g.input(self, 0));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto src = dc.row(i);
      auto dst = dt.row(idx[i]);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

/// Half-open row range [begin, end).
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t length() const { return end - begin; }
  friend bool operator==(const Span&, const Span&) = default;
};

/// Places each part at its span inside a [total x d] result and averages rows
/// covered by more than one part. Every row must be covered.
inline Var overlap_mean(const std::vector<Var>& parts, const std::vector<Span>& spans, std::size_t total) {
  if (parts.empty() || parts.size() != spans.size()) throw DimensionError("overlap_mean: parts/spans mismatch");
  Graph& g = *parts.front().graph;
  const std::size_t d = parts.front().value().cols();
  std::vector<double> coverage(total, 0.0);
  Tensor out = Tensor::matrix(total, d);
  std::vector<std::size_t> ids;
  for (std::size_t c = 0; c < parts.size(); ++c) {
    const Tensor& pv = parts[c].value();
    if (parts[c].graph != &g) throw GraphError("overlap_mean: parts belong to different graphs");
    if (pv.rows() != spans[c].length() || pv.cols() != d || spans[c].end > total) {
      throw DimensionError("overlap_mean: part " + std::to_string(c) + " shape " + shape_string(pv.shape()) +
                           " does not fit its span");
    }
    for (std::size_t r = 0; r < pv.rows(); ++r) {
      auto dst = out.row(spans[c].begin + r);
      auto src = pv.row(r);
      for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
      coverage[spans[c].begin + r] += 1.0;
    }
    ids.push_back(parts[c].id);
  }
  for (std::size_t r = 0; r < total; ++r) {
    if (coverage[r] == 0.0) throw DimensionError("overlap_mean: row " + std::to_string(r) + " not covered");
    if (coverage[r] != 1.0)
      for (auto& v : out.row(r)) v /= coverage[r];
  }
  return g.record(std::move(out), std::move(ids), [spans, coverage](Graph& g, std::size_t self) {
    const Tensor& dc = g.grad(self);
    for (std::size_t c = 0; c < spans.size(); ++c) {
      auto in = g.input(self, c);
      if (!g.needs_grad(in)) continue;
      Tensor& dp = g.grad(in);
      for (std::size_t r = 0; r < spans[c].length(); ++r) {
        const std::size_t pos = spans[c].begin + r;
        auto src = dc.row(pos);
        auto dst = dp.row(r);
        for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k] / coverage[pos];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Banded self-attention

/// Attention weights of a banded attention: row i covers positions [start[i], start[i]+weights[i].size()).
struct BandWeights {
  std::vector<std::size_t> start;
  std::vector<std::vector<double>> weights;

  Tensor dense(std::size_t t) const {
    Tensor out = Tensor::matrix(t, t);
    for (std::size_t i = 0; i < weights.size(); ++i)
      for (std::size_t j = 0; j < weights[i].size(); ++j) out(i, start[i] + j) = weights[i][j];
    return out;
  }
};

/// out_i = sum_j softmax_j(scale * q_i . k_j) v_j over |i - j| <= window.
inline Var windowed_attention(const Var& q, const Var& k, const Var& v, std::size_t window, double scale_factor,
                              BandWeights* weights_out = nullptr) {
  Graph& g = detail::same_graph(q, k);
  detail::same_graph(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.shape() != kv.shape() || vv.rows() != qv.rows()) {
    throw DimensionError("windowed_attention shape mismatch: q " + shape_string(qv.shape()) + ", k " +
                         shape_string(kv.shape()) + ", v " + shape_string(vv.shape()));
  }
  const std::size_t t = qv.rows(), dk = qv.cols(), dv = vv.cols();
  auto band = std::make_shared<BandWeights>();
  band->start.resize(t);
  band->weights.resize(t);
  Tensor out = Tensor::matrix(t, dv);
  for (std::size_t i = 0; i < t; ++i) {
    const std::size_t lo = i > window ? i - window : 0;
    const std::size_t hi = std::min(t - 1, i + window);
    auto& w = band->weights[i];
    band->start[i] = lo;
    w.resize(hi - lo + 1);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = lo; j <= hi; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < dk; ++c) s += qv(i, c) * kv(j, c);
      w[j - lo] = s * scale_factor;
      mx = std::max(mx, w[j - lo]);
    }
    double tot = 0.0;
    for (auto& x : w) {
      x = std::exp(x - mx);
      tot += x;
    }
    for (auto& x : w) x /= tot;
    auto orow = out.row(i);
    for (std::size_t j = lo; j <= hi; ++j)
      for (std::size_t c = 0; c < dv; ++c) orow[c] += w[j - lo] * vv(j, c);
  }
  if (weights_out) *weights_out = *band;
  return g.record(std::move(out), {q.id, k.id, v.id}, [band, scale_factor](Graph& g, std::size_t self) {
    const auto iq = g.input(self, 0), ik = g.input(self, 1), iv = g.input(self, 2);
    const Tensor& qv = g.value(iq);
    const Tensor& kv = g.value(ik);
    const Tensor& vv = g.value(iv);
    const Tensor& dout = g.grad(self);
    const std::size_t t = qv.rows(), dk = qv.cols(), dv = vv.cols();
    Tensor* dq = g.needs_grad(iq) ? &g.grad(iq) : nullptr;
    Tensor* dk_ = g.needs_grad(ik) ? &g.grad(ik) : nullptr;
    Tensor* dvv = g.needs_grad(iv) ? &g.grad(iv) : nullptr;
    std::vector<double> dp;
    for (std::size_t i = 0; i < t; ++i) {
      const auto& w = band->weights[i];
      const std::size_t lo = band->start[i];
      dp.assign(w.size(), 0.0);
      double dot = 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < dv; ++c) s += dout(i, c) * vv(lo + j, c);
        dp[j] = s;
        dot += w[j] * s;
        if (dvv)
          for (std::size_t c = 0; c < dv; ++c) (*dvv)(lo + j, c) += w[j] * dout(i, c);
      }
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double ds = w[j] * (dp[j] - dot) * scale_factor;
        if (ds == 0.0) continue;
        if (dq)
          for (std::size_t c = 0; c < dk; ++c) (*dq)(i, c) += ds * kv(lo + j, c);
        if (dk_)
          for (std::size_t c = 0; c < dk; ++c) (*dk_)(lo + j, c) += ds * qv(i, c);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Regularization and loss

/// Inverted dropout. Identity when not training or p == 0.
template <class Rng>
Var dropout(const Var& a, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - p);
  std::bernoulli_distribution drop(p);
  std::vector<double> mask(a.value().size());
  for (auto& m : mask) m = drop(rng) ? 0.0 : keep_scale;
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return a.graph->record(std::move(out), {a.id}, [mask = std::move(mask)](Graph& g, std::size_t self) {
    auto dy = g.grad(self).data();
    auto da = g.grad(g.input(self, 0)).data();
    for (std::size_t i = 0; i < da.size(); ++i) da[i] += dy[i] * mask[i];
  });
}

inline constexpr double kProbabilityFloor = 1e-7;

/// Mean binary cross-entropy of probabilities against {0,1} targets. The
/// probabilities are clamped to [1e-7, 1 - 1e-7]; the gradient is evaluated at
/// the clamped value and passed straight through the clamp.
inline Var bce_loss(const Var& probs, std::span<const double> targets) {
  const Tensor& pv = probs.value();
  if (pv.size() != targets.size()) {
    throw DimensionError("bce_loss length mismatch: " + std::to_string(pv.size()) + " probabilities vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const double m = static_cast<double>(pv.size());
  double loss = 0.0;
  for (std::size_t j = 0; j < pv.size(); ++j) {
    const double p = std::clamp(pv[j], kProbabilityFloor, 1.0 - kProbabilityFloor);
    loss -= targets[j] * std::log(p) + (1.0 - targets[j]) * std::log(1.0 - p);
  }
  std::vector<double> y(targets.begin(), targets.end());
  return probs.graph->record(Tensor::scalar(loss / m), {probs.id}, [y = std::move(y), m](Graph& g, std::size_t self) {
    const double d = g.grad(self)[0];
    const Tensor& pv = g.value(g.input(self, 0));
    Tensor& dp = g.grad(g.input(self, 0));
    for (std::size_t j = 0; j < y.size(); ++j) {
      const double p = std::clamp(pv[j], kProbabilityFloor, 1.0 - kProbabilityFloor);
      dp[j] += d * (-(y[j] / p) + (1.0 - y[j]) / (1.0 - p)) / m;
    }
  });
}

}  // namespace dlac
