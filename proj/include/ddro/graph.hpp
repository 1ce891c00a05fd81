#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ddro/error.hpp"
#include "ddro/tensor.hpp"

namespace ddro {

// Reverse-mode differentiation over a fixed primitive set. Everything else
// (subtraction, scaling, row sums, ...) is composed from these.
enum class Op {
  input,
  constant,
  add,
  mul,
  matmul,
  tanh,
  relu,
  square,
  exp,
  log,
  sum,
  mean,
  concat,
  slice,
  broadcast
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::input: return "input";
    case Op::constant: return "constant";
    case Op::add: return "add";
    case Op::mul: return "mul";
    case Op::matmul: return "matmul";
    case Op::tanh: return "tanh";
    case Op::relu: return "relu";
    case Op::square: return "square";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::broadcast: return "broadcast";
  }
  return "?";
}

using NodeId = std::size_t;

struct Node {
  Op op = Op::constant;
  std::vector<NodeId> parents;
  Shape shape;
  std::string name;  // input nodes only
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t end = 0;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;
  NodeId id() const { return id_; }
  Graph* graph() const { return graph_; }
  const Shape& shape() const;

 private:
  friend class Graph;
  Var(Graph* g, NodeId id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

/// Node values produced by one forward pass.
struct Evaluation {
  const Graph* graph = nullptr;
  std::vector<Tensor> values;

  const Tensor& operator[](Var v) const { return values.at(v.id()); }
};

/// Gradients of one scalar output with respect to every node that feeds it.
class Gradients {
 public:
  Gradients() = default;
  Gradients(std::vector<Tensor> grads, std::map<std::string, NodeId> names)
      : grads_(std::move(grads)), names_(std::move(names)) {}

  const Tensor& operator[](Var v) const { return grads_.at(v.id()); }
  const Tensor& operator[](const std::string& input_name) const {
    auto it = names_.find(input_name);
    if (it == names_.end()) throw InvalidArgument("no input named '" + input_name + "'");
    return grads_.at(it->second);
  }
  std::map<std::string, Tensor> by_name() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : names_) out.emplace(name, grads_.at(id));
    return out;
  }

 private:
  std::vector<Tensor> grads_;
  std::map<std::string, NodeId> names_;
};

using Bindings = std::map<std::string, Tensor>;

namespace detail {

inline void matmul_into(const Tensor& a, const Tensor& b, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

// out += g * b^T   (g: m x n, b: k x n, out: m x k)
inline void matmul_bt_acc(const Tensor& g, const Tensor& b, Tensor& out) {
  const std::size_t m = g.rows(), n = g.cols(), k = b.rows();
  const double* pg = g.data().data();
  const double* pb = b.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = pg + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = pb + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      po[i * k + p] += s;
    }
  }
}

// out += a^T * g   (a: m x k, g: m x n, out: k x n)
inline void matmul_at_acc(const Tensor& a, const Tensor& g, Tensor& out) {
  const std::size_t m = a.rows(), k = a.cols(), n = g.cols();
  const double* pa = a.data().data();
  const double* pg = g.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = pg + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      double* orow = po + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

inline Shape as_matrix(const Shape& s) { return s.size() == 1 ? Shape{s[0], 1} : s; }

// Index map from a broadcast output back to its (1), (1 x n) or (m x 1) source.
struct BroadcastMap {
  std::size_t cols = 1;        // output columns
  std::size_t row_stride = 0;  // source step per output row
  std::size_t col_stride = 0;  // source step per output column

  BroadcastMap(const Shape& src, const Shape& dst) {
    const Shape d = as_matrix(dst);
    cols = d[1];
    if (shape_size(src) == 1) return;
    const Shape s = as_matrix(src);
    row_stride = s[0] == 1 ? 0 : s[1];
    col_stride = s[1] == 1 ? 0 : 1;
  }

  std::size_t operator()(std::size_t flat) const {
    return (flat / cols) * row_stride + (flat % cols) * col_stride;
  }
};

}  // namespace detail

/// Computation graph built in topological order. Inputs created with a value
/// are evaluated eagerly, so intermediate values are available while building
/// (needed for data-dependent composition such as clipped surrogates).
/// forward() re-evaluates the whole graph from fresh bindings without
/// touching the graph itself.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var input(std::string name, Tensor value) {
    const Shape shape = value.shape();
    return add_input(std::move(name), shape, std::move(value));
  }

  /// Placeholder input without a value; disables eager evaluation.
  Var input(std::string name, Shape shape) {
    eager_ok_ = false;
    return add_input(std::move(name), std::move(shape), Tensor{});
  }

  Var constant(Tensor value) {
    Node n;
    n.op = Op::constant;
    n.shape = value.shape();
    return Var(this, push(std::move(n), std::move(value)));
  }

  Var constant(double v) { return constant(Tensor::scalar(v)); }

  Var add(Var a, Var b) { return binary(Op::add, a, b); }
  Var mul(Var a, Var b) { return binary(Op::mul, a, b); }

  Var matmul(Var a, Var b) {
    const Shape sa = detail::as_matrix(shape(a)), sb = detail::as_matrix(shape(b));
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
      throw ShapeError("matmul at node #" + std::to_string(nodes_.size()) + ": " + shape_str(sa) +
                       " x " + shape_str(sb));
    }
    return make(Op::matmul, {a.id(), b.id()}, {sa[0], sb[1]});
  }

  Var tanh(Var a) { return make(Op::tanh, {a.id()}, shape(a)); }
  Var relu(Var a) { return make(Op::relu, {a.id()}, shape(a)); }
  Var square(Var a) { return make(Op::square, {a.id()}, shape(a)); }
  Var exp(Var a) { return make(Op::exp, {a.id()}, shape(a)); }
  Var log(Var a) { return make(Op::log, {a.id()}, shape(a)); }
  Var sum(Var a) { return make(Op::sum, {a.id()}, {1}); }
  Var mean(Var a) { return make(Op::mean, {a.id()}, {1}); }

  /// Concatenate rank-2 tensors along axis 0 (rows) or 1 (columns).
  Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    if (axis > 1) throw ShapeError("concat axis must be 0 or 1");
    Shape out = detail::as_matrix(shape(parts.front()));
    std::vector<NodeId> ids{parts.front().id()};
    for (std::size_t i = 1; i < parts.size(); ++i) {
      const Shape s = detail::as_matrix(shape(parts[i]));
      if (s[1 - axis] != out[1 - axis]) {
        throw ShapeError("concat at node #" + std::to_string(nodes_.size()) + ": " +
                         shape_str(out) + " with " + shape_str(s));
      }
      out[axis] += s[axis];
      ids.push_back(parts[i].id());
    }
    Node n;
    n.op = Op::concat;
    n.parents = std::move(ids);
    n.shape = out;
    n.axis = axis;
    return Var(this, push_eval(std::move(n)));
  }

  /// Half-open range [begin, end) along axis 0 or 1.
  Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape s = detail::as_matrix(shape(a));
    if (axis > 1 || begin >= end || end > s[axis]) {
      throw ShapeError("slice at node #" + std::to_string(nodes_.size()) + ": [" +
                       std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                       std::to_string(axis) + " of " + shape_str(s));
    }
    Shape out = s;
    out[axis] = end - begin;
    Node n;
    n.op = Op::slice;
    n.parents = {a.id()};
    n.shape = out;
    n.axis = axis;
    n.begin = begin;
    n.end = end;
    return Var(this, push_eval(std::move(n)));
  }

  /// Repeat a (1), (1 x n) or (m x 1) tensor up to `target`.
  Var broadcast(Var a, Shape target) {
    const Shape& s = shape(a);
    bool ok = shape_size(s) == 1;
    if (!ok && s.size() == 2 && target.size() == 2) {
      ok = (s[0] == 1 || s[0] == target[0]) && (s[1] == 1 || s[1] == target[1]);
    }
    if (!ok) {
      throw ShapeError("broadcast at node #" + std::to_string(nodes_.size()) + ": " +
                       shape_str(s) + " -> " + shape_str(target));
    }
    return make(Op::broadcast, {a.id()}, std::move(target));
  }

  // Compositions of the primitive set.
  Var scale(Var a, double c) { return mul(a, constant(Tensor(shape(a), c))); }
  Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }
  Var add_scalar(Var a, double c) { return add(a, constant(Tensor(shape(a), c))); }
  /// Column of per-row sums: (m x n) -> (m x 1).
  Var row_sum(Var a) {
    const Shape s = detail::as_matrix(shape(a));
    return matmul(a, constant(Tensor({s[1], 1}, 1.0)));
  }

  const Shape& shape(Var v) const { return nodes_.at(v.id()).shape; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  const std::map<std::string, NodeId>& inputs() const { return input_ids_; }

  bool eager() const { return eager_ok_; }

  /// Value computed while building. Requires every input to have a value.
  const Tensor& value(Var v) const {
    if (!eager_ok_) throw InvalidArgument("graph has placeholder inputs; call forward()");
    return eager_.values.at(v.id());
  }

  const Evaluation& eager_evaluation() const {
    if (!eager_ok_) throw InvalidArgument("graph has placeholder inputs; call forward()");
    return eager_;
  }

  /// Full evaluation from bindings. Inputs absent from `inputs` fall back to
  /// the value given at construction; a placeholder without a binding is an
  /// error.
  Evaluation forward(const Bindings& inputs) const {
    Evaluation ev;
    ev.graph = this;
    ev.values.resize(nodes_.size());
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      const Node& n = nodes_[id];
      if (n.op == Op::input) {
        auto it = inputs.find(n.name);
        if (it != inputs.end()) {
          if (it->second.shape() != n.shape) {
            throw ShapeError("input '" + n.name + "' (node #" + std::to_string(id) +
                             ") expects shape " + shape_str(n.shape) + ", got " +
                             shape_str(it->second.shape()));
          }
          ev.values[id] = it->second;
        } else if (id < eager_.values.size() && !eager_.values[id].empty()) {
          ev.values[id] = eager_.values[id];
        } else {
          throw InvalidArgument("input '" + n.name + "' (node #" + std::to_string(id) +
                                ") was not supplied");
        }
        if (!ev.values[id].all_finite()) {
          throw NumericError("input '" + n.name + "' contains non-finite values");
        }
      } else if (n.op == Op::constant) {
        ev.values[id] = eager_.values[id];
      } else {
        ev.values[id] = evaluate(id, ev.values);
      }
    }
    return ev;
  }

  Gradients backward(Var out) const { return backward(eager_evaluation(), out); }

  Gradients backward(const Evaluation& ev, Var out, std::optional<Tensor> seed = std::nullopt) const {
    if (ev.graph != this || ev.values.size() != nodes_.size()) {
      throw InvalidArgument("backward requested before a forward pass of this graph");
    }
    const NodeId root = out.id();
    std::vector<Tensor> grads(nodes_.size());
    if (seed) {
      if (seed->shape() != nodes_[root].shape) {
        throw ShapeError("backward seed shape " + shape_str(seed->shape()) + " vs output " +
                         shape_str(nodes_[root].shape));
      }
      grads[root] = *seed;
    } else {
      if (shape_size(nodes_[root].shape) != 1) {
        throw ShapeError("backward without seed requires a scalar output, got " +
                         shape_str(nodes_[root].shape));
      }
      grads[root] = Tensor(nodes_[root].shape, 1.0);
    }
    // only nodes downstream of an input carry gradient
    std::vector<char> live(root + 1, 0);
    for (NodeId id = 0; id <= root; ++id) {
      const Node& n = nodes_[id];
      live[id] = n.op == Op::input;
      for (NodeId p : n.parents) live[id] = live[id] || live[p];
    }
    for (NodeId id = root + 1; id-- > 0;) {
      if (grads[id].empty() || !live[id]) continue;
      propagate(id, ev.values, grads, live);
    }
    for (const auto& [name, id] : input_ids_) {
      if (grads[id].empty()) grads[id] = Tensor(nodes_[id].shape);
    }
    return Gradients(std::move(grads), input_ids_);
  }

 private:
  Var add_input(std::string name, Shape shape, Tensor value) {
    if (input_ids_.count(name)) throw InvalidArgument("duplicate input name '" + name + "'");
    Node n;
    n.op = Op::input;
    n.shape = std::move(shape);
    n.name = name;
    const NodeId id = push(std::move(n), std::move(value));
    input_ids_.emplace(std::move(name), id);
    return Var(this, id);
  }

  NodeId push(Node n, Tensor eager_value) {
    nodes_.push_back(std::move(n));
    eager_.graph = this;
    eager_.values.push_back(std::move(eager_value));
    return nodes_.size() - 1;
  }

  NodeId push_eval(Node n) {
    const NodeId id = push(std::move(n), Tensor{});
    if (eager_ok_) eager_.values[id] = evaluate(id, eager_.values);
    return id;
  }

  Var make(Op op, std::vector<NodeId> parents, Shape shape) {
    for (NodeId p : parents) {
      if (p >= nodes_.size()) throw InvalidArgument("node handle from another graph");
    }
    Node n;
    n.op = op;
    n.parents = std::move(parents);
    n.shape = std::move(shape);
    return Var(this, push_eval(std::move(n)));
  }

  Var binary(Op op, Var a, Var b) {
    if (shape(a) != shape(b)) {
      throw ShapeError(std::string(op_name(op)) + " at node #" + std::to_string(nodes_.size()) +
                       ": " + shape_str(shape(a)) + " vs " + shape_str(shape(b)));
    }
    return make(op, {a.id(), b.id()}, shape(a));
  }

  Tensor evaluate(NodeId id, const std::vector<Tensor>& vals) const {
    const Node& n = nodes_[id];
    Tensor out(n.shape);
    auto& o = out.data();
    const Tensor& a = vals[n.parents[0]];
    switch (n.op) {
      case Op::add: {
        const auto& b = vals[n.parents[1]].data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
        break;
      }
      case Op::mul: {
        const auto& b = vals[n.parents[1]].data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
        break;
      }
      case Op::matmul: detail::matmul_into(a, vals[n.parents[1]], out); break;
      case Op::tanh:
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(a[i]);
        break;
      case Op::relu:
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] > 0.0 ? a[i] : 0.0;
        break;
      case Op::square:
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * a[i];
        break;
      case Op::exp:
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(a[i]);
        break;
      case Op::log:
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::log(a[i]);
        break;
      case Op::sum:
      case Op::mean: {
        double s = 0.0;
        for (double v : a.data()) s += v;
        o[0] = n.op == Op::sum ? s : s / static_cast<double>(a.size());
        break;
      }
      case Op::concat: {
        const std::size_t cols = n.shape[1];
        std::size_t offset = 0;
        for (NodeId p : n.parents) {
          const Tensor& t = vals[p];
          if (n.axis == 0) {
            std::copy(t.data().begin(), t.data().end(), o.begin() + offset * cols);
            offset += t.rows();
          } else {
            for (std::size_t r = 0; r < t.rows(); ++r) {
              for (std::size_t c = 0; c < t.cols(); ++c) o[r * cols + offset + c] = t.at(r, c);
            }
            offset += t.cols();
          }
        }
        break;
      }
      case Op::slice: {
        const std::size_t cols = n.shape[1];
        for (std::size_t r = 0; r < n.shape[0]; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            o[r * cols + c] = n.axis == 0 ? a.at(n.begin + r, c) : a.at(r, n.begin + c);
          }
        }
        break;
      }
      case Op::broadcast: {
        const detail::BroadcastMap map(nodes_[n.parents[0]].shape, n.shape);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[map(i)];
        break;
      }
      case Op::input:
      case Op::constant: break;
    }
    if (!out.all_finite()) {
      throw NumericError("node #" + std::to_string(id) + " (" + op_name(n.op) +
                         ") produced a non-finite value");
    }
    return out;
  }

  // Gradient buffer of `id`, or null when nothing upstream of it is an input.
  Tensor* acc(std::vector<Tensor>& grads, const std::vector<char>& live, NodeId id) const {
    if (!live[id]) return nullptr;
    if (grads[id].empty()) grads[id] = Tensor(nodes_[id].shape);
    return &grads[id];
  }

  void propagate(NodeId id, const std::vector<Tensor>& vals, std::vector<Tensor>& grads,
                 const std::vector<char>& live) const {
    const Node& n = nodes_[id];
    if (n.op == Op::input || n.op == Op::constant) return;
    const Tensor& g = grads[id];
    const NodeId pa = n.parents[0];
    const Tensor& a = vals[pa];
    Tensor* ta = n.op == Op::add || n.op == Op::concat ? nullptr : acc(grads, live, pa);
    switch (n.op) {
      case Op::add: {
        for (NodeId p : n.parents) {
          if (Tensor* t = acc(grads, live, p)) {
            for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] += g[i];
          }
        }
        break;
      }
      case Op::mul: {
        const Tensor& b = vals[n.parents[1]];
        if (ta) {
          for (std::size_t i = 0; i < ta->size(); ++i) (*ta)[i] += g[i] * b[i];
        }
        if (Tensor* tb = acc(grads, live, n.parents[1])) {
          for (std::size_t i = 0; i < tb->size(); ++i) (*tb)[i] += g[i] * a[i];
        }
        break;
      }
      case Op::matmul: {
        const Tensor& b = vals[n.parents[1]];
        if (ta) detail::matmul_bt_acc(g, b, *ta);
        if (Tensor* tb = acc(grads, live, n.parents[1])) detail::matmul_at_acc(a, g, *tb);
        break;
      }
      case Op::tanh: {
        const Tensor& y = vals[id];
        for (std::size_t i = 0; i < ta->size(); ++i) (*ta)[i] += g[i] * (1.0 - y[i] * y[i]);
        break;
      }
      case Op::relu:
        for (std::size_t i = 0; i < ta->size(); ++i) (*ta)[i] += a[i] > 0.0 ? g[i] : 0.0;
        break;
      case Op::square:
        for (std::size_t i = 0; i < ta->size(); ++i) (*ta)[i] += 2.0 * a[i] * g[i];
        break;
      case Op::exp: {
        const Tensor& y = vals[id];
        for (std::size_t i = 0; i < ta->size(); ++i) (*ta)[i] += g[i] * y[i];
        break;
      }
      case Op::log:
        for (std::size_t i = 0; i < ta->size(); ++i) (*ta)[i] += g[i] / a[i];
        break;
      case Op::sum:
      case Op::mean: {
        const double s = n.op == Op::sum ? g[0] : g[0] / static_cast<double>(a.size());
        for (double& v : ta->data()) v += s;
        break;
      }
      case Op::concat: {
        const std::size_t cols = n.shape[1];
        std::size_t offset = 0;
        for (NodeId p : n.parents) {
          const Tensor& part = vals[p];
          Tensor* t = acc(grads, live, p);
          if (n.axis == 0) {
            if (t) {
              for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] += g[offset * cols + i];
            }
            offset += part.rows();
          } else {
            if (t) {
              for (std::size_t r = 0; r < t->rows(); ++r) {
                for (std::size_t c = 0; c < t->cols(); ++c) t->at(r, c) += g[r * cols + offset + c];
              }
            }
            offset += part.cols();
          }
        }
        break;
      }
      case Op::slice: {
        const std::size_t cols = n.shape[1];
        for (std::size_t r = 0; r < n.shape[0]; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            const double gv = g[r * cols + c];
            if (n.axis == 0) {
              ta->at(n.begin + r, c) += gv;
            } else {
              ta->at(r, n.begin + c) += gv;
            }
          }
        }
        break;
      }
      case Op::broadcast: {
        const detail::BroadcastMap map(nodes_[pa].shape, n.shape);
        for (std::size_t i = 0; i < g.size(); ++i) (*ta)[map(i)] += g[i];
        break;
      }
      case Op::input:
      case Op::constant: break;
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, NodeId> input_ids_;
  Evaluation eager_;
  bool eager_ok_ = true;
};

inline const Shape& Var::shape() const { return graph_->shape(*this); }

inline Var operator+(Var a, Var b) { return a.graph()->add(a, b); }
inline Var operator-(Var a, Var b) { return a.graph()->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.graph()->mul(a, b); }
inline Var operator*(Var a, double c) { return a.graph()->scale(a, c); }
inline Var operator*(double c, Var a) { return a.graph()->scale(a, c); }

inline Evaluation forward_eval(const Graph& g, const Bindings& inputs) { return g.forward(inputs); }

inline Gradients backward(const Graph& g, const Evaluation& ev, Var output,
                          std::optional<Tensor> seed = std::nullopt) {
  return g.backward(ev, output, std::move(seed));
}

}  // namespace ddro
