#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pivad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
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

inline void check_shape_dims(const Shape& s) {
  for (int d : s)
    if (d <= 0) throw std::invalid_argument("tensor shape must have positive dims, got " + shape_str(s));
}

/// Persistent trainable storage. Graph leaves bind to a Param; backward()
/// accumulates (+=) into grad so the same Param may appear at several graph
/// sites. zero_grad() resets between steps.
struct Param {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;

  Param() = default;
  Param(std::string name_, Shape shape_)
      : name(std::move(name_)), shape(std::move(shape_)) {
    check_shape_dims(shape);
    value.assign(numel(shape), 0.0);
    grad.assign(numel(shape), 0.0);
  }

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Graph;

/// Lightweight handle to a node owned by a Graph.
class Tensor {
 public:
  Tensor() = default;

  const Shape& shape() const;
  const std::vector<double>& values() const;
  const std::vector<double>& grad() const;
  bool requires_grad() const;
  int node_id() const { return id_; }
  Graph& graph() const { return *graph_; }

  std::size_t size() const { return numel(shape()); }
  /// Value of a single-element tensor.
  double item() const;

 private:
  friend class Graph;
  Tensor(Graph* g, int id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  int id_ = -1;
};

/// One reverse-mode computation graph. Nodes are created in topological
/// order (node ids are creation indices); backward() walks them in reverse.
/// A graph is confined to a single thread.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Constant leaf (no gradient).
  Tensor input(Shape shape, std::vector<double> values) {
    check_shape_dims(shape);
    if (numel(shape) != values.size())
      throw std::invalid_argument("input: shape " + shape_str(shape) + " does not match " +
                                  std::to_string(values.size()) + " values");
    return push(std::move(shape), std::move(values), {}, false, nullptr, nullptr);
  }

  Tensor scalar(double v) { return input(Shape{}, {v}); }

  /// Leaf bound to persistent storage; gradients flow back into p.grad.
  Tensor param(Param& p) {
    std::vector<double> vals = p.value;
    return push(p.shape, std::move(vals), {}, true, nullptr, &p);
  }

  /// Raw op node; public so callers can extend the op set (and tests can
  /// install deliberately wrong backward rules).
  Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs, BackwardFn fn) {
    check_shape_dims(shape);
    if (numel(shape) != values.size())
      throw std::invalid_argument("make_op: shape/value size mismatch");
    std::vector<int> parents;
    parents.reserve(inputs.size());
    bool rg = false;
    for (const Tensor& t : inputs) {
      if (t.graph_ != this) throw std::invalid_argument("make_op: input belongs to a different graph");
      parents.push_back(t.id_);
      rg = rg || nodes_[t.id_].requires_grad;
    }
    return push(std::move(shape), std::move(values), std::move(parents), rg, std::move(fn), nullptr);
  }

  const Shape& shape_of(int id) const { return nodes_[id].shape; }
  const std::vector<double>& vals(int id) const { return nodes_[id].values; }
  bool needs_grad(int id) const { return nodes_[id].requires_grad; }
  const std::vector<double>& grad_of(int id) const { return nodes_[id].grad; }
  /// Mutable gradient buffer; only meaningful for nodes that require grad.
  std::vector<double>& grad_mut(int id) { return nodes_[id].grad; }
  const std::vector<int>& parents_of(int id) const { return nodes_[id].parents; }
  int node_count() const { return static_cast<int>(nodes_.size()); }

  /// Reverse-topological gradient accumulation from a scalar loss; flushes
  /// leaf gradients into their bound Params. Calling twice without reset()
  /// is an error.
  void backward(const Tensor& loss) {
    if (loss.graph_ != this) throw std::invalid_argument("backward: loss from a different graph");
    if (backward_done_) throw std::logic_error("backward() already called on this graph; reset() first");
    if (numel(nodes_[loss.id_].shape) != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(nodes_[loss.id_].shape));
    backward_done_ = true;

    // Mark nodes reachable from the loss.
    std::vector<char> reach(nodes_.size(), 0);
    reach[loss.id_] = 1;
    for (int id = loss.id_; id >= 0; --id) {
      if (!reach[id]) continue;
      for (int p : nodes_[id].parents) reach[p] = 1;
    }

    nodes_[loss.id_].grad.assign(1, 1.0);
    for (int id = loss.id_; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!reach[id] || !n.requires_grad) continue;
      if (n.backward) n.backward(*this, id);
      if (n.bound) {
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.bound->grad[i] += n.grad[i];
      }
    }
  }

  /// Drop all nodes; the graph can be reused for a fresh forward pass.
  void reset() {
    nodes_.clear();
    backward_done_ = false;
  }

 private:
  struct Node {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // allocated iff requires_grad
    std::vector<int> parents;
    BackwardFn backward;
    Param* bound = nullptr;
    bool requires_grad = false;
  };

  Tensor push(Shape shape, std::vector<double> values, std::vector<int> parents, bool rg, BackwardFn fn,
              Param* bound) {
    Node n;
    n.shape = std::move(shape);
    n.values = std::move(values);
    n.parents = std::move(parents);
    n.backward = std::move(fn);
    n.bound = bound;
    n.requires_grad = rg;
    if (rg) n.grad.assign(n.values.size(), 0.0);
    nodes_.push_back(std::move(n));
    return Tensor(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

inline const Shape& Tensor::shape() const { return graph_->shape_of(id_); }
inline const std::vector<double>& Tensor::values() const { return graph_->vals(id_); }
inline const std::vector<double>& Tensor::grad() const { return graph_->grad_of(id_); }
inline bool Tensor::requires_grad() const { return graph_->needs_grad(id_); }
inline double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item(): tensor has shape " + shape_str(shape()));
  return values()[0];
}

// ---------------------------------------------------------------------------
// Broadcasting (numpy rules, ranks <= 2 are all the model needs)

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  std::size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    int da = i < ra ? a[ra - 1 - i] : 1;
    int db = i < rb ? b[rb - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("shapes not broadcast-compatible: " + shape_str(a) + " vs " + shape_str(b));
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> strides_for(const Shape& s) {
  std::vector<std::size_t> st(s.size());
  std::size_t acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[i] = acc;
    acc *= static_cast<std::size_t>(s[i]);
  }
  return st;
}

/// Strides of `in` viewed under the broadcast shape `out` (0 where stretched).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  auto in_st = strides_for(in);
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t ri = in.size(), ro = out.size();
  for (std::size_t i = 0; i < ri; ++i) {
    int din = in[ri - 1 - i];
    if (din == out[ro - 1 - i]) st[ro - 1 - i] = in_st[ri - 1 - i];
    // else din == 1 -> stride 0
  }
  return st;
}

/// Sum g (laid out as gshape) down to shape `target` over broadcast axes.
inline std::vector<double> reduce_to_shape(const std::vector<double>& g, const Shape& gshape, const Shape& target) {
  if (gshape == target) return g;
  std::vector<double> out(numel(target), 0.0);
  auto t_st = broadcast_strides(target, gshape);
  auto g_st = strides_for(gshape);
  std::size_t n = numel(gshape);
  std::size_t rank = gshape.size();
  for (std::size_t lin = 0; lin < n; ++lin) {
    std::size_t rem = lin, tidx = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      std::size_t c = rem / g_st[d];
      rem %= g_st[d];
      tidx += c * t_st[d];
    }
    out[tidx] += g[lin];
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {

template <typename ValFn, typename DaFn, typename DbFn>
Tensor ew_binary(const Tensor& a, const Tensor& b, ValFn vf, DaFn da, DbFn db) {
  Graph& g = a.graph();
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  Shape so = broadcast_shape(sa, sb);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::size_t n = numel(so);
  std::vector<double> out(n);
  if (sa == sb) {
    for (std::size_t i = 0; i < n; ++i) out[i] = vf(av[i], bv[i]);
  } else {
    auto ast = broadcast_strides(sa, so);
    auto bst = broadcast_strides(sb, so);
    auto ost = strides_for(so);
    for (std::size_t lin = 0; lin < n; ++lin) {
      std::size_t rem = lin, ia = 0, ib = 0;
      for (std::size_t d = 0; d < so.size(); ++d) {
        std::size_t c = rem / ost[d];
        rem %= ost[d];
        ia += c * ast[d];
        ib += c * bst[d];
      }
      out[lin] = vf(av[ia], bv[ib]);
    }
  }
  return g.make_op(so, std::move(out), {a, b}, [sa, sb, so, da, db](Graph& gr, int self) {
    const auto& go = gr.grad_of(self);
    int pa = gr.parents_of(self)[0], pb = gr.parents_of(self)[1];
    const auto& av2 = gr.vals(pa);
    const auto& bv2 = gr.vals(pb);
    std::size_t n2 = go.size();
    auto ast = broadcast_strides(sa, so);
    auto bst = broadcast_strides(sb, so);
    auto ost = strides_for(so);
    std::vector<double> ga_full(gr.needs_grad(pa) ? n2 : 0);
    std::vector<double> gb_full(gr.needs_grad(pb) ? n2 : 0);
    for (std::size_t lin = 0; lin < n2; ++lin) {
      std::size_t rem = lin, ia = 0, ib = 0;
      for (std::size_t d = 0; d < so.size(); ++d) {
        std::size_t c = rem / ost[d];
        rem %= ost[d];
        ia += c * ast[d];
        ib += c * bst[d];
      }
      if (!ga_full.empty()) ga_full[lin] = da(av2[ia], bv2[ib], go[lin]);
      if (!gb_full.empty()) gb_full[lin] = db(av2[ia], bv2[ib], go[lin]);
    }
    if (!ga_full.empty()) {
      auto ga = reduce_to_shape(ga_full, so, sa);
      auto& dst = gr.grad_mut(pa);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += ga[i];
    }
    if (!gb_full.empty()) {
      auto gb = reduce_to_shape(gb_full, so, sb);
      auto& dst = gr.grad_mut(pb);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gb[i];
    }
  });
}

/// dfn(x, y, g) where y is the forward output value.
template <typename ValFn, typename DFn>
Tensor ew_unary(const Tensor& a, ValFn vf, DFn dfn) {
  Graph& g = a.graph();
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = vf(av[i]);
  return g.make_op(a.shape(), std::move(out), {a}, [dfn](Graph& gr, int self) {
    int p = gr.parents_of(self)[0];
    if (!gr.needs_grad(p)) return;
    const auto& go = gr.grad_of(self);
    const auto& xv = gr.vals(p);
    const auto& yv = gr.vals(self);
    auto& dst = gr.grad_mut(p);
    for (std::size_t i = 0; i < go.size(); ++i) dst[i] += dfn(xv[i], yv[i], go[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::ew_binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::ew_binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::ew_binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::ew_binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

inline Tensor neg(const Tensor& a) {
  return detail::ew_unary(
      a, [](double x) { return -x; }, [](double, double, double g) { return -g; });
}

inline Tensor exp(const Tensor& a) {
  return detail::ew_unary(
      a, [](double x) { return std::exp(x); }, [](double, double y, double g) { return g * y; });
}

inline Tensor log(const Tensor& a) {
  for (double v : a.values())
    if (v <= 0.0) throw std::domain_error("log: nonpositive input " + std::to_string(v));
  return detail::ew_unary(
      a, [](double x) { return std::log(x); }, [](double x, double, double g) { return g / x; });
}

inline Tensor sqrt(const Tensor& a) {
  for (double v : a.values())
    if (v < 0.0) throw std::domain_error("sqrt: negative input " + std::to_string(v));
  return detail::ew_unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double y, double g) { return g * 0.5 / y; });
}

inline Tensor relu(const Tensor& a) {
  return detail::ew_unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double, double g) { return x > 0.0 ? g : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::ew_unary(
      a,
      [](double x) {
        // evaluate through exp(-|x|) so large |x| never overflows
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y, double g) { return g * y * (1.0 - y); });
}

// tanh-approximation constants, fixed: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline Tensor gelu(const Tensor& a) {
  return detail::ew_unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); },
      [](double x, double, double g) {
        double u = kGeluC * (x + kGeluA * x * x * x);
        double t = std::tanh(u);
        double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
      });
}

inline Tensor clamp_min(const Tensor& a, double lo) {
  return detail::ew_unary(
      a, [lo](double x) { return x < lo ? lo : x; },
      [lo](double x, double, double g) { return x < lo ? 0.0 : g; });
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::ew_unary(
      a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x, double, double g) { return (x < lo || x > hi) ? 0.0 : g; });
}

inline Tensor add(const Tensor& a, double s) {
  return detail::ew_unary(
      a, [s](double x) { return x + s; }, [](double, double, double g) { return g; });
}

inline Tensor mul(const Tensor& a, double s) {
  return detail::ew_unary(
      a, [s](double x) { return x * s; }, [s](double, double, double g) { return g * s; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, s); }
inline Tensor operator+(double s, const Tensor& a) { return add(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add(a, -s); }
inline Tensor operator-(double s, const Tensor& a) { return add(neg(a), s); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, s); }
inline Tensor operator/(const Tensor& a, double s) { return mul(a, 1.0 / s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Matrix ops

inline void require_rank(const Tensor& t, std::size_t r, const char* op) {
  if (t.shape().size() != r)
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(r) + " tensor, got " +
                                shape_str(t.shape()));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      double aip = av[static_cast<std::size_t>(i) * k + p];
      const double* brow = &bv[static_cast<std::size_t>(p) * n];
      double* orow = &out[static_cast<std::size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  Graph& g = a.graph();
  return g.make_op({m, n}, std::move(out), {a, b}, [m, k, n](Graph& gr, int self) {
    const auto& go = gr.grad_of(self);
    int pa = gr.parents_of(self)[0], pb = gr.parents_of(self)[1];
    if (gr.needs_grad(pa)) {
      // a.grad += g * b^T
      const auto& bv2 = gr.vals(pb);
      auto& ga = gr.grad_mut(pa);
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double s = 0.0;
          const double* grow = &go[static_cast<std::size_t>(i) * n];
          const double* brow = &bv2[static_cast<std::size_t>(p) * n];
          for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga[static_cast<std::size_t>(i) * k + p] += s;
        }
    }
    if (gr.needs_grad(pb)) {
      // b.grad += a^T * g
      const auto& av2 = gr.vals(pa);
      auto& gb = gr.grad_mut(pb);
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double aip = av2[static_cast<std::size_t>(i) * k + p];
          const double* grow = &go[static_cast<std::size_t>(i) * n];
          double* gbrow = &gb[static_cast<std::size_t>(p) * n];
          for (int j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  int m = a.shape()[0], n = a.shape()[1];
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j) * m + i] = av[static_cast<std::size_t>(i) * n + j];
  return a.graph().make_op({n, m}, std::move(out), {a}, [m, n](Graph& gr, int self) {
    int p = gr.parents_of(self)[0];
    if (!gr.needs_grad(p)) return;
    const auto& go = gr.grad_of(self);
    auto& gp = gr.grad_mut(p);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i) gp[static_cast<std::size_t>(i) * n + j] += go[static_cast<std::size_t>(j) * m + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  check_shape_dims(shape);
  if (numel(shape) != a.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<double> out = a.values();
  return a.graph().make_op(std::move(shape), std::move(out), {a}, [](Graph& gr, int self) {
    int p = gr.parents_of(self)[0];
    if (!gr.needs_grad(p)) return;
    const auto& go = gr.grad_of(self);
    auto& gp = gr.grad_mut(p);
    for (std::size_t i = 0; i < go.size(); ++i) gp[i] += go[i];
  });
}

/// Columns [c0, c1) of a [T x C] tensor.
inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
  require_rank(a, 2, "slice_cols");
  int t = a.shape()[0], c = a.shape()[1];
  if (c0 < 0 || c1 > c || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) +
                                ") for " + shape_str(a.shape()));
  int w = c1 - c0;
  const auto& av = a.values();
  std::vector<double> out(static_cast<std::size_t>(t) * w);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < w; ++j) out[static_cast<std::size_t>(i) * w + j] = av[static_cast<std::size_t>(i) * c + c0 + j];
  return a.graph().make_op({t, w}, std::move(out), {a}, [t, c, c0, w](Graph& gr, int self) {
    int p = gr.parents_of(self)[0];
    if (!gr.needs_grad(p)) return;
    const auto& go = gr.grad_of(self);
    auto& gp = gr.grad_mut(p);
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < w; ++j)
        gp[static_cast<std::size_t>(i) * c + c0 + j] += go[static_cast<std::size_t>(i) * w + j];
  });
}

/// Concatenate [T x C_i] tensors along the column axis.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  int t = parts[0].shape()[0];
  int total = 0;
  for (const Tensor& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.shape()[0] != t)
      throw std::invalid_argument("concat_cols: row mismatch: " + shape_str(parts[0].shape()) + " vs " +
                                  shape_str(p.shape()));
    total += p.shape()[1];
  }
  std::vector<double> out(static_cast<std::size_t>(t) * total);
  std::vector<int> widths;
  int off = 0;
  for (const Tensor& p : parts) {
    int w = p.shape()[1];
    widths.push_back(w);
    const auto& pv = p.values();
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < w; ++j) out[static_cast<std::size_t>(i) * total + off + j] = pv[static_cast<std::size_t>(i) * w + j];
    off += w;
  }
  return parts[0].graph().make_op({t, total}, std::move(out), parts, [t, total, widths](Graph& gr, int self) {
    const auto& go = gr.grad_of(self);
    const auto& ps = gr.parents_of(self);
    int off2 = 0;
    for (std::size_t pi = 0; pi < ps.size(); ++pi) {
      int w = widths[pi];
      if (gr.needs_grad(ps[pi])) {
        auto& gp = gr.grad_mut(ps[pi]);
        for (int i = 0; i < t; ++i)
          for (int j = 0; j < w; ++j)
            gp[static_cast<std::size_t>(i) * w + j] += go[static_cast<std::size_t>(i) * total + off2 + j];
      }
      off2 += w;
    }
  });
}

/// Main diagonal of a square matrix.
inline Tensor diag_part(const Tensor& a) {
  require_rank(a, 2, "diag_part");
  int t = a.shape()[0];
  if (a.shape()[1] != t) throw std::invalid_argument("diag_part: matrix not square: " + shape_str(a.shape()));
  const auto& av = a.values();
  std::vector<double> out(t);
  for (int i = 0; i < t; ++i) out[i] = av[static_cast<std::size_t>(i) * t + i];
  return a.graph().make_op({t}, std::move(out), {a}, [t](Graph& gr, int self) {
    int p = gr.parents_of(self)[0];
    if (!gr.needs_grad(p)) return;
    const auto& go = gr.grad_of(self);
    auto& gp = gr.grad_mut(p);
    for (int i = 0; i < t; ++i) gp[static_cast<std::size_t>(i) * t + i] += go[i];
  });
}

/// Temporal 1D convolution: x [T x C_in], w [K x C_in x C_out], bias [C_out].
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1, int padding = 0) {
  require_rank(x, 2, "conv1d");
  require_rank(w, 3, "conv1d");
  require_rank(bias, 1, "conv1d");
  if (stride < 1) throw std::invalid_argument("conv1d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv1d: padding must be >= 0");
  int t = x.shape()[0], cin = x.shape()[1];
  int k = w.shape()[0], wcin = w.shape()[1], cout = w.shape()[2];
  if (wcin != cin)
    throw std::invalid_argument("conv1d: channel mismatch: input " + shape_str(x.shape()) + " vs kernel " +
                                shape_str(w.shape()));
  if (bias.shape()[0] != cout) throw std::invalid_argument("conv1d: bias dim mismatch");
  if (t + 2 * padding < k)
    throw std::invalid_argument("conv1d: kernel size " + std::to_string(k) + " exceeds padded input length " +
                                std::to_string(t + 2 * padding));
  int tout = (t + 2 * padding - k) / stride + 1;
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = bias.values();
  std::vector<double> out(static_cast<std::size_t>(tout) * cout);
  for (int to = 0; to < tout; ++to) {
    double* orow = &out[static_cast<std::size_t>(to) * cout];
    for (int co = 0; co < cout; ++co) orow[co] = bv[co];
    for (int kk = 0; kk < k; ++kk) {
      int ti = to * stride + kk - padding;
      if (ti < 0 || ti >= t) continue;
      const double* xrow = &xv[static_cast<std::size_t>(ti) * cin];
      for (int ci = 0; ci < cin; ++ci) {
        double xval = xrow[ci];
        const double* wrow = &wv[(static_cast<std::size_t>(kk) * cin + ci) * cout];
        for (int co = 0; co < cout; ++co) orow[co] += xval * wrow[co];
      }
    }
  }
  return x.graph().make_op({tout, cout}, std::move(out), {x, w, bias},
                           [t, cin, k, cout, stride, padding, tout](Graph& gr, int self) {
    const auto& go = gr.grad_of(self);
    int px = gr.parents_of(self)[0], pw = gr.parents_of(self)[1], pb = gr.parents_of(self)[2];
    const auto& xv2 = gr.vals(px);
    const auto& wv2 = gr.vals(pw);
    bool nx = gr.needs_grad(px), nw = gr.needs_grad(pw), nb = gr.needs_grad(pb);
    for (int to = 0; to < tout; ++to) {
      const double* grow = &go[static_cast<std::size_t>(to) * cout];
      if (nb) {
        auto& gb = gr.grad_mut(pb);
        for (int co = 0; co < cout; ++co) gb[co] += grow[co];
      }
      for (int kk = 0; kk < k; ++kk) {
        int ti = to * stride + kk - padding;
        if (ti < 0 || ti >= t) continue;
        for (int ci = 0; ci < cin; ++ci) {
          std::size_t widx = (static_cast<std::size_t>(kk) * cin + ci) * cout;
          if (nx) {
            double s = 0.0;
            for (int co = 0; co < cout; ++co) s += grow[co] * wv2[widx + co];
            gr.grad_mut(px)[static_cast<std::size_t>(ti) * cin + ci] += s;
          }
          if (nw) {
            double xval = xv2[static_cast<std::size_t>(ti) * cin + ci];
            auto& gw = gr.grad_mut(pw);
            for (int co = 0; co < cout; ++co) gw[widx + co] += xval * grow[co];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

namespace detail {

inline void check_axis(const Tensor& t, int axis) {
  if (axis < 0 || axis >= static_cast<int>(t.shape().size()))
    throw std::invalid_argument("reduction: axis " + std::to_string(axis) + " invalid for " + shape_str(t.shape()));
}

/// Iterates a rank<=2 tensor as (n_slices x slice_len) along `axis`.
struct AxisView {
  int n_slices, slice_len;
  std::size_t outer_stride, inner_stride;
};

inline AxisView axis_view(const Shape& s, int axis) {
  if (s.size() == 1) return {1, s[0], 0, 1};
  // rank 2
  if (axis == 1) return {s[0], s[1], static_cast<std::size_t>(s[1]), 1};
  return {s[1], s[0], 1, static_cast<std::size_t>(s[1])};
}

inline Shape reduced_shape(const Shape& s, int axis, bool keepdims) {
  Shape out = s;
  if (keepdims) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + axis);
  }
  return out;
}

}  // namespace detail

inline Tensor sum(const Tensor& a, int axis, bool keepdims = false) {
  detail::check_axis(a, axis);
  if (a.shape().size() > 2) throw std::invalid_argument("sum: rank > 2 unsupported");
  auto v = detail::axis_view(a.shape(), axis);
  const auto& av = a.values();
  std::vector<double> out(v.n_slices, 0.0);
  for (int s = 0; s < v.n_slices; ++s)
    for (int i = 0; i < v.slice_len; ++i) out[s] += av[s * v.outer_stride + i * v.inner_stride];
  Shape os = detail::reduced_shape(a.shape(), axis, keepdims);
  if (os.empty() && out.size() != 1) os = {static_cast<int>(out.size())};
  return a.graph().make_op(std::move(os), std::move(out), {a}, [v](Graph& gr, int self) {
    int p = gr.parents_of(self)[0];
    if (!gr.needs_grad(p)) return;
    const auto& go = gr.grad_of(self);
    auto& gp = gr.grad_mut(p);
    for (int s = 0; s < v.n_slices; ++s)
      for (int i = 0; i < v.slice_len; ++i) gp[s * v.outer_stride + i * v.inner_stride] += go[s];
  });
}

inline Tensor mean(const Tensor& a, int axis, bool keepdims = false) {
  detail::check_axis(a, axis);
  return mul(sum(a, axis, keepdims), 1.0 / a.shape()[axis]);
}

inline Tensor sum_all(const Tensor& a) {
  const auto& av = a.values();
  double s = std::accumulate(av.begin(), av.end(), 0.0);
  return a.graph().make_op(Shape{}, {s}, {a}, [](Graph& gr, int self) {
    int p = gr.parents_of(self)[0];
    if (!gr.needs_grad(p)) return;
    double g = gr.grad_of(self)[0];
    auto& gp = gr.grad_mut(p);
    for (double& x : gp) x += g;
  });
}

inline Tensor mean_all(const Tensor& a) { return mul(sum_all(a), 1.0 / static_cast<double>(a.size())); }

/// Max along an axis; ties resolved to the lowest index.
inline Tensor max(const Tensor& a, int axis, bool keepdims = false) {
  detail::check_axis(a, axis);
  if (a.shape().size() > 2) throw std::invalid_argument("max: rank > 2 unsupported");
  auto v = detail::axis_view(a.shape(), axis);
  const auto& av = a.values();
  std::vector<double> out(v.n_slices);
  std::vector<std::size_t> arg(v.n_slices);
  for (int s = 0; s < v.n_slices; ++s) {
    std::size_t best = s * v.outer_stride;
    double bv = av[best];
    for (int i = 1; i < v.slice_len; ++i) {
      std::size_t idx = s * v.outer_stride + i * v.inner_stride;
      if (av[idx] > bv) {
        bv = av[idx];
        best = idx;
      }
    }
    out[s] = bv;
    arg[s] = best;
  }
  Shape os = detail::reduced_shape(a.shape(), axis, keepdims);
  return a.graph().make_op(std::move(os), std::move(out), {a}, [arg](Graph& gr, int self) {
    int p = gr.parents_of(self)[0];
    if (!gr.needs_grad(p)) return;
    const auto& go = gr.grad_of(self);
    auto& gp = gr.grad_mut(p);
    for (std::size_t s = 0; s < arg.size(); ++s) gp[arg[s]] += go[s];
  });
}

/// Mean of the k largest entries along an axis (ties to the lowest index);
/// gradient flows only into the selected entries.
inline Tensor topk_mean(const Tensor& a, int axis, int k) {
  detail::check_axis(a, axis);
  if (a.shape().size() > 2) throw std::invalid_argument("topk_mean: rank > 2 unsupported");
  int len = a.shape()[axis];
  if (k < 1 || k > len)
    throw std::invalid_argument("topk_mean: k=" + std::to_string(k) + " out of range for axis length " +
                                std::to_string(len));
  auto v = detail::axis_view(a.shape(), axis);
  const auto& av = a.values();
  std::vector<double> out(v.n_slices, 0.0);
  std::vector<std::size_t> chosen;
  chosen.reserve(static_cast<std::size_t>(v.n_slices) * k);
  std::vector<int> order(v.slice_len);
  for (int s = 0; s < v.n_slices; ++s) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
      return av[s * v.outer_stride + x * v.inner_stride] > av[s * v.outer_stride + y * v.inner_stride];
    });
    double acc = 0.0;
    for (int i = 0; i < k; ++i) {
      std::size_t idx = s * v.outer_stride + static_cast<std::size_t>(order[i]) * v.inner_stride;
      acc += av[idx];
      chosen.push_back(idx);
    }
    out[s] = acc / k;
  }
  Shape os = detail::reduced_shape(a.shape(), axis, false);
  return a.graph().make_op(std::move(os), std::move(out), {a}, [chosen, k](Graph& gr, int self) {
    int p = gr.parents_of(self)[0];
    if (!gr.needs_grad(p)) return;
    const auto& go = gr.grad_of(self);
    auto& gp = gr.grad_mut(p);
    for (std::size_t s = 0; s < go.size(); ++s) {
      double g = go[s] / k;
      for (int i = 0; i < k; ++i) gp[chosen[s * k + i]] += g;
    }
  });
}

// ---------------------------------------------------------------------------
// Composite ops (gradients come from the primitives above)

/// Numerically stable softmax (max-subtraction) along an axis.
inline Tensor softmax(const Tensor& a, int axis) {
  Tensor z = sub(a, max(a, axis, /*keepdims=*/true));
  Tensor e = exp(z);
  return div(e, sum(e, axis, /*keepdims=*/true));
}

/// Row-wise layer normalization of x [T x H] with affine gamma/beta [H].
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
  require_rank(x, 2, "layer_norm");
  Tensor mu = mean(x, 1, true);
  Tensor xc = sub(x, mu);
  Tensor var = mean(mul(xc, xc), 1, true);
  Tensor norm = div(xc, sqrt(add(var, eps)));
  return add(mul(norm, gamma), beta);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradReport {
  std::vector<std::pair<std::string, double>> per_param;  // max relative error per parameter
  double max_rel_error = 0.0;
  double epsilon = 0.0;
  double threshold = 0.0;
  bool pass = false;
};

/// Central finite differences against backward() for every coordinate of
/// every parameter. f must be a deterministic function of the params.
inline GradReport grad_check(const std::function<Tensor(Graph&)>& f, const std::vector<Param*>& params,
                             double eps = 1e-5, double threshold = 1e-4) {
  if (!(eps > 0.0 && eps <= 1e-2)) throw std::invalid_argument("grad_check: eps must be in (0, 1e-2]");
  auto eval = [&]() {
    Graph g;
    Tensor loss = f(g);
    double v = loss.item();
    if (!std::isfinite(v)) throw std::runtime_error("grad_check: objective is not finite");
    return v;
  };

  for (Param* p : params) p->zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    Tensor loss = f(g);
    if (!std::isfinite(loss.item())) throw std::runtime_error("grad_check: objective is not finite");
    g.backward(loss);
    for (Param* p : params) analytic.push_back(p->grad);
  }

  GradReport report;
  report.epsilon = eps;
  report.threshold = threshold;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      double old = p.value[i];
      p.value[i] = old + eps;
      double fp = eval();
      p.value[i] = old - eps;
      double fm = eval();
      p.value[i] = old;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = analytic[pi][i];
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, rel);
    }
    report.per_param.emplace_back(p.name, worst);
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  report.pass = report.max_rel_error < threshold;
  return report;
}

}  // namespace pivad
