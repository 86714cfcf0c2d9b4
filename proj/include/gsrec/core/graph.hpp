#pragma once

// Reverse-mode autodiff over float64 tensors.
//
// A CompGraph is a flat list of nodes in creation order, which is already a
// topological order because an op can only reference ids that exist when it
// is built. Shapes are resolved at forward() time from the bound inputs, so
// one graph serves any batch size. Parameters live in a ParameterStore that
// can be shared by several graphs (a training graph and a scoring graph built
// over the same weights, for instance).
//
// Every op validates its input shapes and every forward pass scans its output
// for non-finite values; both failure modes throw with the node's debug name
// so a broken graph points at itself.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "gsrec/core/gemm.hpp"
#include "gsrec/core/rng.hpp"
#include "gsrec/core/tensor.hpp"

namespace gsrec {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class ParameterStore {
 public:
  Tensor& create(const std::string& name, Shape shape) {
    auto [it, inserted] =
        params_.emplace(name, std::make_unique<Tensor>(std::move(shape)));
    if (!inserted) {
      throw std::invalid_argument("parameter '" + name + "' already exists");
    }
    order_.push_back(name);
    return *it->second;
  }

  bool has(const std::string& name) const { return params_.count(name) > 0; }

  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) {
      throw std::invalid_argument("unknown parameter '" + name + "'");
    }
    return *it->second;
  }
  const Tensor& get(const std::string& name) const {
    return const_cast<ParameterStore*>(this)->get(name);
  }

  // Creation order; used for stable serialization and optimizer iteration.
  const std::vector<std::string>& names() const { return order_; }

  int64_t total_size() const {
    int64_t n = 0;
    for (auto& [k, v] : params_) n += v->numel();
    return n;
  }

 private:
  std::unordered_map<std::string, std::unique_ptr<Tensor>> params_;
  std::vector<std::string> order_;
};

// Gradients with respect to named parameters, one tensor per parameter.
using GradientMap = std::map<std::string, Tensor>;

using Bindings = std::unordered_map<std::string, Tensor>;

using NodeId = int32_t;

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout
};

class CompGraph {
  enum class Op {
    Input,
    Param,
    Add,
    Mul,
    Scale,
    MatMul,
    EmbeddingGather,
    GatherDot,
    CatalogScores,
    LayerNorm,
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Log,
    LogExpm1,
    ClampMin,
    LogAddExp,
    CausalAttention,
    Dropout,
    Sum,
    Mean,
    SumLast,
    MeanLast,
    LogSumExpLast,
    Reshape,
  };

  enum class Bcast { Same, Scalar, Suffix, LastOne };

  struct Node {
    Op op;
    std::string name;
    std::vector<NodeId> in;
    double attr = 0.0;  // Scale factor, ClampMin floor, Dropout rate, LN eps
    int heads = 1;
    bool transpose_rhs = false;
    Shape shape_attr;  // Reshape target
    bool requires_grad = false;
    Bcast bcast = Bcast::Same;
    Tensor value;
    Tensor grad;
    Tensor aux;   // op-specific forward cache (dropout mask, attn probs, ...)
    Tensor aux2;  // secondary cache (layer norm inv-std)
    std::string bind_name;  // Input: binding key; Param: store key
  };

 public:
  explicit CompGraph(ParameterStore* params) : params_(params) {}

  NodeId input(const std::string& name) {
    Node n;
    n.op = Op::Input;
    n.name = name;
    n.bind_name = name;
    return push(std::move(n));
  }

  NodeId param(const std::string& name) {
    auto it = param_nodes_.find(name);
    if (it != param_nodes_.end()) return it->second;
    if (!params_ || !params_->has(name)) {
      throw std::invalid_argument("graph references unknown parameter '" +
                                  name + "'");
    }
    Node n;
    n.op = Op::Param;
    n.name = name;
    n.bind_name = name;
    n.requires_grad = true;
    NodeId id = push(std::move(n));
    param_nodes_[name] = id;
    return id;
  }

  NodeId add(NodeId a, NodeId b) { return binary(Op::Add, "add", a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::Mul, "mul", a, b); }

  NodeId scale(NodeId a, double c) {
    Node n = unary(Op::Scale, "scale", a);
    n.attr = c;
    return push(std::move(n));
  }

  // Same elements viewed under a new shape; counts must match. At most one
  // dim may be -1, inferred from the element count at forward time so a graph
  // stays usable across batch sizes.
  NodeId reshape(NodeId a, Shape shape) {
    int wild = 0;
    for (int64_t d : shape) {
      if (d == -1)
        ++wild;
      else if (d < 1)
        throw std::invalid_argument("reshape: dims must be positive or -1");
    }
    if (wild > 1) throw std::invalid_argument("reshape: at most one -1 dim");
    Node n = unary(Op::Reshape, "reshape", a);
    n.shape_attr = std::move(shape);
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b, bool transpose_rhs = false) {
    Node n;
    n.op = Op::MatMul;
    n.name = tag("matmul");
    n.in = {a, b};
    n.transpose_rhs = transpose_rhs;
    return push(std::move(n));
  }

  NodeId embedding(NodeId table, NodeId indices) {
    Node n;
    n.op = Op::EmbeddingGather;
    n.name = tag("embedding");
    n.in = {table, indices};
    return push(std::move(n));
  }

  NodeId gather_dot(NodeId hidden, NodeId table, NodeId indices) {
    Node n;
    n.op = Op::GatherDot;
    n.name = tag("gather_dot");
    n.in = {hidden, table, indices};
    return push(std::move(n));
  }

  // Scores for every real item: out[..., j] = hidden . table[j + 1], skipping
  // the padding row 0 so the padding id never competes in a ranking or a
  // normalizer.
  NodeId catalog_scores(NodeId hidden, NodeId table) {
    Node n;
    n.op = Op::CatalogScores;
    n.name = tag("catalog_scores");
    n.in = {hidden, table};
    return push(std::move(n));
  }

  NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps = 1e-5) {
    Node n;
    n.op = Op::LayerNorm;
    n.name = tag("layer_norm");
    n.in = {x, gain, bias};
    n.attr = eps;
    return push(std::move(n));
  }

  NodeId relu(NodeId a) { return push(unary(Op::Relu, "relu", a)); }
  NodeId gelu(NodeId a) { return push(unary(Op::Gelu, "gelu", a)); }
  NodeId sigmoid(NodeId a) { return push(unary(Op::Sigmoid, "sigmoid", a)); }
  NodeId softplus(NodeId a) { return push(unary(Op::Softplus, "softplus", a)); }
  NodeId log(NodeId a) { return push(unary(Op::Log, "log", a)); }

  // log(exp(x) - 1), defined for x > 0; pair with clamp_min upstream.
  NodeId log_expm1(NodeId a) {
    return push(unary(Op::LogExpm1, "log_expm1", a));
  }

  NodeId clamp_min(NodeId a, double floor) {
    Node n = unary(Op::ClampMin, "clamp_min", a);
    n.attr = floor;
    return push(std::move(n));
  }

  NodeId logaddexp(NodeId a, NodeId b) {
    Node n;
    n.op = Op::LogAddExp;
    n.name = tag("logaddexp");
    n.in = {a, b};
    return push(std::move(n));
  }

  // Multi-head scaled dot-product attention where query i may only attend to
  // positions j <= i whose key_valid flag is 1. Queries with an empty allowed
  // set produce a zero row.
  NodeId causal_attention(NodeId q, NodeId k, NodeId v, NodeId key_valid,
                          int heads) {
    if (heads < 1) throw std::invalid_argument("attention: heads must be >= 1");
    Node n;
    n.op = Op::CausalAttention;
    n.name = tag("causal_attention");
    n.in = {q, k, v, key_valid};
    n.heads = heads;
    return push(std::move(n));
  }

  // Inverted dropout: active only under ForwardOptions.training, keeps
  // E[output] equal to the input by scaling kept values with 1/(1-rate).
  NodeId dropout(NodeId a, double rate) {
    if (rate < 0.0 || rate >= 1.0) {
      throw std::invalid_argument("dropout: rate must be in [0, 1)");
    }
    Node n = unary(Op::Dropout, "dropout", a);
    n.attr = rate;
    return push(std::move(n));
  }

  NodeId sum(NodeId a) { return push(unary(Op::Sum, "sum", a)); }
  NodeId mean(NodeId a) { return push(unary(Op::Mean, "mean", a)); }
  NodeId sum_last(NodeId a) { return push(unary(Op::SumLast, "sum_last", a)); }
  NodeId mean_last(NodeId a) {
    return push(unary(Op::MeanLast, "mean_last", a));
  }
  NodeId logsumexp_last(NodeId a) {
    return push(unary(Op::LogSumExpLast, "logsumexp_last", a));
  }

  int64_t size() const { return static_cast<int64_t>(nodes_.size()); }
  const std::string& name_of(NodeId id) const { return node(id).name; }

  // Total count of values raised to the floor by clamp_min ops, accumulated
  // across forward passes. Training loops read deltas of this to report
  // saturation events.
  int64_t clamp_events() const { return clamp_events_; }
  void reset_clamp_events() { clamp_events_ = 0; }

  const Tensor& forward(NodeId root, const Bindings& binds,
                        const ForwardOptions& opt = {}) {
    const std::vector<char>& reach = reachable(root);
    for (NodeId id = 0; id <= root; ++id) {
      if (!reach[id]) continue;
      exec(id, binds, opt);
    }
    last_root_ = root;
    return value_ref(root);
  }

  const Tensor& value(NodeId id) const { return value_ref(id); }

  // Gradients of a scalar root with respect to every parameter it touches.
  // Must follow a forward() of the same root since it consumes the cached
  // activations of that pass.
  GradientMap backward(NodeId root) {
    if (root != last_root_) {
      throw std::logic_error("backward root does not match last forward root");
    }
    if (value_ref(root).numel() != 1) {
      throw ShapeError(node(root).name + ": backward needs a scalar root, got " +
                       shape_str(value_ref(root).shape()));
    }
    if (!node(root).requires_grad) return {};
    const std::vector<char>& reach = reachable(root);
    for (NodeId id = 0; id <= root; ++id) {
      if (!reach[id]) continue;
      Node& n = node(id);
      if (!n.requires_grad) continue;
      n.grad.resize(value_ref(id).shape());
    }
    node(root).grad[0] = 1.0;
    for (NodeId id = root; id >= 0; --id) {
      if (!reach[id] || !node(id).requires_grad) continue;
      pull(id);
    }
    GradientMap out;
    for (auto& [name, id] : param_nodes_) {
      if (!reach[id]) continue;
      Node& n = node(id);
      check_finite(n.grad, n.name + " gradient");
      out.emplace(name, n.grad);
    }
    return out;
  }

 private:
  Node& node(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }

  std::string tag(const char* op) {
    return std::string(op) + "#" + std::to_string(nodes_.size());
  }

  Node unary(Op op, const char* label, NodeId a) {
    Node n;
    n.op = op;
    n.name = tag(label);
    n.in = {a};
    return n;
  }

  NodeId binary(Op op, const char* label, NodeId a, NodeId b) {
    Node n;
    n.op = op;
    n.name = tag(label);
    n.in = {a, b};
    return push(std::move(n));
  }

  NodeId push(Node n) {
    for (NodeId dep : n.in) {
      if (dep < 0 || dep >= size()) {
        throw std::invalid_argument(n.name + ": input id out of range");
      }
      if (nodes_[static_cast<size_t>(dep)].requires_grad) {
        n.requires_grad = true;
      }
    }
    if (n.op == Op::Param) n.requires_grad = true;
    // Gradients never flow into integer-like index inputs.
    if (n.op == Op::EmbeddingGather && n.in.size() == 2) {
      n.requires_grad = nodes_[static_cast<size_t>(n.in[0])].requires_grad;
    }
    if (n.op == Op::GatherDot && n.in.size() == 3) {
      n.requires_grad = nodes_[static_cast<size_t>(n.in[0])].requires_grad ||
                        nodes_[static_cast<size_t>(n.in[1])].requires_grad;
    }
    if (n.op == Op::CausalAttention && n.in.size() == 4) {
      n.requires_grad = nodes_[static_cast<size_t>(n.in[0])].requires_grad ||
                        nodes_[static_cast<size_t>(n.in[1])].requires_grad ||
                        nodes_[static_cast<size_t>(n.in[2])].requires_grad;
    }
    nodes_.push_back(std::move(n));
    reach_cache_.clear();
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  const std::vector<char>& reachable(NodeId root) {
    auto it = reach_cache_.find(root);
    if (it != reach_cache_.end()) return it->second;
    std::vector<char> mark(nodes_.size(), 0);
    std::vector<NodeId> stack{root};
    mark[static_cast<size_t>(root)] = 1;
    while (!stack.empty()) {
      NodeId id = stack.back();
      stack.pop_back();
      for (NodeId dep : node(id).in) {
        if (!mark[static_cast<size_t>(dep)]) {
          mark[static_cast<size_t>(dep)] = 1;
          stack.push_back(dep);
        }
      }
    }
    return reach_cache_.emplace(root, std::move(mark)).first->second;
  }

  const Tensor& value_ref(NodeId id) const {
    const Node& n = node(id);
    if (n.op == Op::Param) return params_->get(n.bind_name);
    return n.value;
  }

  void check_finite(const Tensor& t, const std::string& what) const {
    const double* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) {
      if (!std::isfinite(p[i])) {
        throw NumericError(what + ": non-finite value at flat index " +
                           std::to_string(i));
      }
    }
  }

  static int64_t as_index(double v, int64_t limit, const std::string& who) {
    double r = std::nearbyint(v);
    if (std::abs(v - r) > 1e-9 || r < 0.0 ||
        r >= static_cast<double>(limit)) {
      throw ShapeError(who + ": index value " + std::to_string(v) +
                       " is not an integer in [0, " + std::to_string(limit) +
                       ")");
    }
    return static_cast<int64_t>(r);
  }

  // ---- forward ----

  void exec(NodeId id, const Bindings& binds, const ForwardOptions& opt) {
    Node& n = node(id);
    switch (n.op) {
      case Op::Input: {
        auto it = binds.find(n.bind_name);
        if (it == binds.end()) {
          throw std::invalid_argument("missing binding for input '" +
                                      n.bind_name + "'");
        }
        n.value = it->second;
        break;
      }
      case Op::Param:
        check_finite(params_->get(n.bind_name), n.name);
        return;  // value lives in the store
      case Op::Add:
      case Op::Mul:
        fwd_elemwise(n);
        break;
      case Op::Scale: {
        const Tensor& a = value_ref(n.in[0]);
        n.value.resize(a.shape());
        for (int64_t i = 0; i < a.numel(); ++i) n.value[i] = n.attr * a[i];
        break;
      }
      case Op::Reshape: {
        const Tensor& a = value_ref(n.in[0]);
        Shape target = n.shape_attr;
        int64_t fixed = 1;
        int64_t wild = -1;
        for (size_t i = 0; i < target.size(); ++i) {
          if (target[i] == -1)
            wild = static_cast<int64_t>(i);
          else
            fixed *= target[i];
        }
        if (wild >= 0) {
          if (a.numel() % fixed != 0) {
            throw ShapeError(n.name + ": cannot infer -1 viewing " +
                             shape_str(a.shape()) + " as " +
                             shape_str(n.shape_attr));
          }
          target[static_cast<size_t>(wild)] = a.numel() / fixed;
        }
        n.value = a;
        try {
          n.value.reshape(target);
        } catch (const std::invalid_argument& e) {
          throw ShapeError(n.name + ": " + e.what());
        }
        break;
      }
      case Op::MatMul:
        fwd_matmul(n);
        break;
      case Op::EmbeddingGather:
        fwd_embedding(n);
        break;
      case Op::GatherDot:
        fwd_gather_dot(n);
        break;
      case Op::CatalogScores:
        fwd_catalog_scores(n);
        break;
      case Op::LayerNorm:
        fwd_layer_norm(n);
        break;
      case Op::Relu: {
        const Tensor& a = value_ref(n.in[0]);
        n.value.resize(a.shape());
        for (int64_t i = 0; i < a.numel(); ++i)
          n.value[i] = a[i] > 0.0 ? a[i] : 0.0;
        break;
      }
      case Op::Gelu: {
        const Tensor& a = value_ref(n.in[0]);
        n.value.resize(a.shape());
        for (int64_t i = 0; i < a.numel(); ++i) {
          n.value[i] =
              0.5 * a[i] * (1.0 + std::erf(a[i] * 0.70710678118654752440));
        }
        break;
      }
      case Op::Sigmoid: {
        const Tensor& a = value_ref(n.in[0]);
        n.value.resize(a.shape());
        for (int64_t i = 0; i < a.numel(); ++i)
          n.value[i] = stable_sigmoid(a[i]);
        break;
      }
      case Op::Softplus: {
        const Tensor& a = value_ref(n.in[0]);
        n.value.resize(a.shape());
        for (int64_t i = 0; i < a.numel(); ++i)
          n.value[i] = stable_softplus(a[i]);
        break;
      }
      case Op::Log: {
        const Tensor& a = value_ref(n.in[0]);
        n.value.resize(a.shape());
        for (int64_t i = 0; i < a.numel(); ++i) n.value[i] = std::log(a[i]);
        break;
      }
      case Op::LogExpm1: {
        const Tensor& a = value_ref(n.in[0]);
        n.value.resize(a.shape());
        for (int64_t i = 0; i < a.numel(); ++i)
          n.value[i] = stable_log_expm1(a[i]);
        break;
      }
      case Op::ClampMin: {
        const Tensor& a = value_ref(n.in[0]);
        n.value.resize(a.shape());
        for (int64_t i = 0; i < a.numel(); ++i) {
          if (a[i] < n.attr) {
            n.value[i] = n.attr;
            ++clamp_events_;
          } else {
            n.value[i] = a[i];
          }
        }
        break;
      }
      case Op::LogAddExp: {
        const Tensor& a = value_ref(n.in[0]);
        const Tensor& b = value_ref(n.in[1]);
        if (a.shape() != b.shape()) {
          throw ShapeError(n.name + ": shapes " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
        }
        n.value.resize(a.shape());
        for (int64_t i = 0; i < a.numel(); ++i) {
          double m = std::max(a[i], b[i]);
          n.value[i] =
              m + std::log(std::exp(a[i] - m) + std::exp(b[i] - m));
        }
        break;
      }
      case Op::CausalAttention:
        fwd_attention(n);
        break;
      case Op::Dropout:
        fwd_dropout(n, opt);
        break;
      case Op::Sum:
      case Op::Mean: {
        const Tensor& a = value_ref(n.in[0]);
        double acc = 0.0;
        for (int64_t i = 0; i < a.numel(); ++i) acc += a[i];
        if (n.op == Op::Mean) acc /= static_cast<double>(a.numel());
        n.value.resize({1});
        n.value[0] = acc;
        break;
      }
      case Op::SumLast:
      case Op::MeanLast:
      case Op::LogSumExpLast:
        fwd_reduce_last(n);
        break;
    }
    check_finite(n.value, n.name);
  }

  static double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
  }

  static double stable_softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
  }

  static double stable_log_expm1(double x) {
    // log(exp(x) - 1); exact formula overflows past ~709, and loses all
    // precision through exp() for tiny x, so split the range.
    if (x > 30.0) return x + std::log1p(-std::exp(-x));
    return std::log(std::expm1(x));
  }

  static Bcast classify_bcast(const Shape& lhs, const Shape& rhs,
                              const std::string& who) {
    if (lhs == rhs) return Bcast::Same;
    if (shape_numel(rhs) == 1) return Bcast::Scalar;
    if (rhs.size() < lhs.size() &&
        std::equal(rhs.begin(), rhs.end(), lhs.end() - rhs.size())) {
      return Bcast::Suffix;
    }
    if (rhs.size() == lhs.size() && rhs.back() == 1 &&
        std::equal(rhs.begin(), rhs.end() - 1, lhs.begin())) {
      return Bcast::LastOne;
    }
    throw ShapeError(who + ": cannot broadcast " + shape_str(rhs) + " onto " +
                     shape_str(lhs));
  }

  void fwd_elemwise(Node& n) {
    const Tensor& a = value_ref(n.in[0]);
    const Tensor& b = value_ref(n.in[1]);
    n.bcast = classify_bcast(a.shape(), b.shape(), n.name);
    n.value.resize(a.shape());
    int64_t total = a.numel();
    bool is_add = n.op == Op::Add;
    switch (n.bcast) {
      case Bcast::Same:
        for (int64_t i = 0; i < total; ++i)
          n.value[i] = is_add ? a[i] + b[i] : a[i] * b[i];
        break;
      case Bcast::Scalar: {
        double s = b[0];
        for (int64_t i = 0; i < total; ++i)
          n.value[i] = is_add ? a[i] + s : a[i] * s;
        break;
      }
      case Bcast::Suffix: {
        int64_t rn = b.numel();
        for (int64_t i = 0; i < total; ++i) {
          double s = b[i % rn];
          n.value[i] = is_add ? a[i] + s : a[i] * s;
        }
        break;
      }
      case Bcast::LastOne: {
        int64_t d = a.dim(-1);
        for (int64_t i = 0; i < total; ++i) {
          double s = b[i / d];
          n.value[i] = is_add ? a[i] + s : a[i] * s;
        }
        break;
      }
    }
  }

  void fwd_matmul(Node& n) {
    const Tensor& a = value_ref(n.in[0]);
    const Tensor& b = value_ref(n.in[1]);
    if (a.rank() < 2 || b.rank() != 2) {
      throw ShapeError(n.name + ": needs lhs rank >= 2 and rhs rank 2, got " +
                       shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    int64_t k = a.dim(-1);
    int64_t m = a.numel() / k;
    int64_t rk = n.transpose_rhs ? b.dim(1) : b.dim(0);
    int64_t out_n = n.transpose_rhs ? b.dim(0) : b.dim(1);
    if (k != rk) {
      throw ShapeError(n.name + ": inner dims " + std::to_string(k) + " vs " +
                       std::to_string(rk));
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(out_n);
    n.value.resize(out_shape);
    if (n.transpose_rhs) {
      gemm_nt(m, out_n, k, a.data(), b.data(), n.value.data());
    } else {
      gemm_nn(m, out_n, k, a.data(), b.data(), n.value.data());
    }
  }

  void fwd_embedding(Node& n) {
    const Tensor& table = value_ref(n.in[0]);
    const Tensor& idx = value_ref(n.in[1]);
    if (table.rank() != 2) {
      throw ShapeError(n.name + ": table must be rank 2, got " +
                       shape_str(table.shape()));
    }
    int64_t rows = table.dim(0), d = table.dim(1);
    Shape out_shape = idx.shape();
    out_shape.push_back(d);
    n.value.resize(out_shape);
    for (int64_t i = 0; i < idx.numel(); ++i) {
      int64_t r = as_index(idx[i], rows, n.name);
      std::copy_n(table.data() + r * d, d, n.value.data() + i * d);
    }
  }

  void fwd_gather_dot(Node& n) {
    const Tensor& h = value_ref(n.in[0]);
    const Tensor& table = value_ref(n.in[1]);
    const Tensor& idx = value_ref(n.in[2]);
    if (h.rank() < 2 || table.rank() != 2 || h.dim(-1) != table.dim(1)) {
      throw ShapeError(n.name + ": hidden " + shape_str(h.shape()) +
                       " vs table " + shape_str(table.shape()));
    }
    // idx shape must be hidden's leading shape plus one candidate axis.
    if (idx.rank() != h.rank() ||
        !std::equal(h.shape().begin(), h.shape().end() - 1,
                    idx.shape().begin())) {
      throw ShapeError(n.name + ": indices " + shape_str(idx.shape()) +
                       " do not align with hidden " + shape_str(h.shape()));
    }
    int64_t d = h.dim(-1);
    int64_t rows = h.numel() / d;
    int64_t kc = idx.dim(-1);
    int64_t nrows = table.dim(0);
    n.value.resize(idx.shape());
    for (int64_t r = 0; r < rows; ++r) {
      const double* hv = h.data() + r * d;
      for (int64_t c = 0; c < kc; ++c) {
        int64_t row = as_index(idx[r * kc + c], nrows, n.name);
        n.value[r * kc + c] = dot(hv, table.data() + row * d, d);
      }
    }
  }

  void fwd_catalog_scores(Node& n) {
    const Tensor& h = value_ref(n.in[0]);
    const Tensor& table = value_ref(n.in[1]);
    if (h.rank() < 1 || table.rank() != 2 || h.dim(-1) != table.dim(1)) {
      throw ShapeError(n.name + ": hidden " + shape_str(h.shape()) +
                       " vs table " + shape_str(table.shape()));
    }
    if (table.dim(0) < 2) {
      throw ShapeError(n.name + ": table needs a padding row plus items");
    }
    int64_t d = h.dim(-1);
    int64_t m = h.numel() / d;
    int64_t items = table.dim(0) - 1;
    Shape out_shape(h.shape().begin(), h.shape().end() - 1);
    out_shape.push_back(items);
    n.value.resize(out_shape);
    gemm_nt(m, items, d, h.data(), table.data() + d, n.value.data());
  }

  void fwd_layer_norm(Node& n) {
    const Tensor& x = value_ref(n.in[0]);
    const Tensor& g = value_ref(n.in[1]);
    const Tensor& b = value_ref(n.in[2]);
    int64_t d = x.dim(-1);
    if (g.shape() != Shape{d} || b.shape() != Shape{d}) {
      throw ShapeError(n.name + ": gain/bias must be [" + std::to_string(d) +
                       "], got " + shape_str(g.shape()) + " and " +
                       shape_str(b.shape()));
    }
    int64_t rows = x.numel() / d;
    n.value.resize(x.shape());
    n.aux.resize(x.shape());        // normalized values
    n.aux2.resize({rows});          // inverse std per row
    double inv_d = 1.0 / static_cast<double>(d);
    for (int64_t r = 0; r < rows; ++r) {
      const double* xr = x.data() + r * d;
      double mu = 0.0;
      for (int64_t j = 0; j < d; ++j) mu += xr[j];
      mu *= inv_d;
      double var = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        double c = xr[j] - mu;
        var += c * c;
      }
      var *= inv_d;
      double is = 1.0 / std::sqrt(var + n.attr);
      n.aux2[r] = is;
      double* yr = n.value.data() + r * d;
      double* hr = n.aux.data() + r * d;
      for (int64_t j = 0; j < d; ++j) {
        double xh = (xr[j] - mu) * is;
        hr[j] = xh;
        yr[j] = xh * g[j] + b[j];
      }
    }
  }

  void fwd_attention(Node& n) {
    const Tensor& q = value_ref(n.in[0]);
    const Tensor& k = value_ref(n.in[1]);
    const Tensor& v = value_ref(n.in[2]);
    const Tensor& valid = value_ref(n.in[3]);
    if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
      throw ShapeError(n.name + ": Q/K/V must share a [batch, len, dim] shape");
    }
    int64_t B = q.dim(0), L = q.dim(1), D = q.dim(2);
    if (D % n.heads != 0) {
      throw ShapeError(n.name + ": dim " + std::to_string(D) +
                       " not divisible by " + std::to_string(n.heads) +
                       " heads");
    }
    if (valid.shape() != Shape{B, L}) {
      throw ShapeError(n.name + ": key_valid must be " + shape_str({B, L}) +
                       ", got " + shape_str(valid.shape()));
    }
    for (int64_t i = 0; i < valid.numel(); ++i) {
      if (valid[i] != 0.0 && valid[i] != 1.0) {
        throw ShapeError(n.name + ": key_valid entries must be 0 or 1");
      }
    }
    int64_t H = n.heads, dh = D / H;
    double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    n.value.resize(q.shape());
    n.aux.resize({B, H, L, L});
    n.aux.zero();
    std::vector<double> logits(static_cast<size_t>(L));
    for (int64_t b = 0; b < B; ++b) {
      const double* vb = valid.data() + b * L;
      for (int64_t h = 0; h < H; ++h) {
        double* probs = n.aux.data() + ((b * H + h) * L) * L;
        for (int64_t i = 0; i < L; ++i) {
          const double* qi = q.data() + (b * L + i) * D + h * dh;
          double m = -1.0;
          bool any = false;
          for (int64_t j = 0; j <= i; ++j) {
            if (vb[j] == 0.0) continue;
            double s = dot(qi, k.data() + (b * L + j) * D + h * dh, dh) * inv;
            logits[static_cast<size_t>(j)] = s;
            m = any ? std::max(m, s) : s;
            any = true;
          }
          double* pr = probs + i * L;
          double* out = n.value.data() + (b * L + i) * D + h * dh;
          std::fill(out, out + dh, 0.0);
          if (!any) continue;
          double z = 0.0;
          for (int64_t j = 0; j <= i; ++j) {
            if (vb[j] == 0.0) continue;
            double e = std::exp(logits[static_cast<size_t>(j)] - m);
            pr[j] = e;
            z += e;
          }
          double iz = 1.0 / z;
          for (int64_t j = 0; j <= i; ++j) {
            if (vb[j] == 0.0) continue;
            pr[j] *= iz;
            axpy(pr[j], v.data() + (b * L + j) * D + h * dh, out, dh);
          }
        }
      }
    }
  }

  void fwd_dropout(Node& n, const ForwardOptions& opt) {
    const Tensor& a = value_ref(n.in[0]);
    if (!opt.training || n.attr == 0.0) {
      n.value = a;
      n.aux = Tensor();
      return;
    }
    if (!opt.rng) {
      throw std::invalid_argument(n.name +
                                  ": training forward needs an rng for "
                                  "dropout");
    }
    n.value.resize(a.shape());
    n.aux.resize(a.shape());
    double keep_scale = 1.0 / (1.0 - n.attr);
    for (int64_t i = 0; i < a.numel(); ++i) {
      double m = opt.rng->uniform() >= n.attr ? keep_scale : 0.0;
      n.aux[i] = m;
      n.value[i] = a[i] * m;
    }
  }

  void fwd_reduce_last(Node& n) {
    const Tensor& a = value_ref(n.in[0]);
    int64_t d = a.dim(-1);
    int64_t rows = a.numel() / d;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    if (out_shape.empty()) out_shape.push_back(1);
    n.value.resize(out_shape);
    for (int64_t r = 0; r < rows; ++r) {
      const double* xr = a.data() + r * d;
      if (n.op == Op::LogSumExpLast) {
        double m = xr[0];
        for (int64_t j = 1; j < d; ++j) m = std::max(m, xr[j]);
        double z = 0.0;
        for (int64_t j = 0; j < d; ++j) z += std::exp(xr[j] - m);
        n.value[r] = m + std::log(z);
      } else {
        double acc = 0.0;
        for (int64_t j = 0; j < d; ++j) acc += xr[j];
        if (n.op == Op::MeanLast) acc /= static_cast<double>(d);
        n.value[r] = acc;
      }
    }
  }

  // ---- backward ----

  Tensor* grad_sink(NodeId id) {
    Node& n = node(id);
    if (!n.requires_grad) return nullptr;
    return &n.grad;
  }

  void pull(NodeId id) {
    Node& n = node(id);
    switch (n.op) {
      case Op::Input:
      case Op::Param:
        return;
      case Op::Add:
      case Op::Mul:
        bwd_elemwise(n);
        return;
      case Op::Scale: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          for (int64_t i = 0; i < n.grad.numel(); ++i)
            (*ga)[i] += n.attr * n.grad[i];
        }
        return;
      }
      case Op::Reshape: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          for (int64_t i = 0; i < n.grad.numel(); ++i) (*ga)[i] += n.grad[i];
        }
        return;
      }
      case Op::MatMul:
        bwd_matmul(n);
        return;
      case Op::EmbeddingGather: {
        Tensor* gt = grad_sink(n.in[0]);
        if (!gt) return;
        const Tensor& idx = value_ref(n.in[1]);
        int64_t d = value_ref(n.in[0]).dim(1);
        int64_t rows = value_ref(n.in[0]).dim(0);
        for (int64_t i = 0; i < idx.numel(); ++i) {
          int64_t r = as_index(idx[i], rows, n.name);
          axpy(1.0, n.grad.data() + i * d, gt->data() + r * d, d);
        }
        return;
      }
      case Op::GatherDot:
        bwd_gather_dot(n);
        return;
      case Op::CatalogScores:
        bwd_catalog_scores(n);
        return;
      case Op::LayerNorm:
        bwd_layer_norm(n);
        return;
      case Op::Relu: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          const Tensor& a = value_ref(n.in[0]);
          for (int64_t i = 0; i < a.numel(); ++i)
            if (a[i] > 0.0) (*ga)[i] += n.grad[i];
        }
        return;
      }
      case Op::Gelu: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          const Tensor& a = value_ref(n.in[0]);
          for (int64_t i = 0; i < a.numel(); ++i) {
            double x = a[i];
            double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
            double pdf =
                std::exp(-0.5 * x * x) * 0.39894228040143267794;
            (*ga)[i] += n.grad[i] * (cdf + x * pdf);
          }
        }
        return;
      }
      case Op::Sigmoid: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          for (int64_t i = 0; i < n.value.numel(); ++i) {
            double y = n.value[i];
            (*ga)[i] += n.grad[i] * y * (1.0 - y);
          }
        }
        return;
      }
      case Op::Softplus: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          const Tensor& a = value_ref(n.in[0]);
          for (int64_t i = 0; i < a.numel(); ++i)
            (*ga)[i] += n.grad[i] * stable_sigmoid(a[i]);
        }
        return;
      }
      case Op::Log: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          const Tensor& a = value_ref(n.in[0]);
          for (int64_t i = 0; i < a.numel(); ++i)
            (*ga)[i] += n.grad[i] / a[i];
        }
        return;
      }
      case Op::LogExpm1: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          const Tensor& a = value_ref(n.in[0]);
          for (int64_t i = 0; i < a.numel(); ++i) {
            // d/dx log(exp(x)-1) = 1 / (1 - exp(-x))
            (*ga)[i] += n.grad[i] / (-std::expm1(-a[i]));
          }
        }
        return;
      }
      case Op::ClampMin: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          const Tensor& a = value_ref(n.in[0]);
          for (int64_t i = 0; i < a.numel(); ++i)
            if (a[i] >= n.attr) (*ga)[i] += n.grad[i];
        }
        return;
      }
      case Op::LogAddExp: {
        const Tensor& a = value_ref(n.in[0]);
        const Tensor& b = value_ref(n.in[1]);
        Tensor* ga = grad_sink(n.in[0]);
        Tensor* gb = grad_sink(n.in[1]);
        for (int64_t i = 0; i < a.numel(); ++i) {
          double wa = stable_sigmoid(a[i] - b[i]);
          if (ga) (*ga)[i] += n.grad[i] * wa;
          if (gb) (*gb)[i] += n.grad[i] * (1.0 - wa);
        }
        return;
      }
      case Op::CausalAttention:
        bwd_attention(n);
        return;
      case Op::Dropout: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          if (n.aux.empty()) {
            for (int64_t i = 0; i < n.grad.numel(); ++i)
              (*ga)[i] += n.grad[i];
          } else {
            for (int64_t i = 0; i < n.grad.numel(); ++i)
              (*ga)[i] += n.grad[i] * n.aux[i];
          }
        }
        return;
      }
      case Op::Sum:
      case Op::Mean: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          double g = n.grad[0];
          if (n.op == Op::Mean) g /= static_cast<double>(ga->numel());
          for (int64_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g;
        }
        return;
      }
      case Op::SumLast:
      case Op::MeanLast: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          int64_t d = value_ref(n.in[0]).dim(-1);
          double scale = n.op == Op::MeanLast
                             ? 1.0 / static_cast<double>(d)
                             : 1.0;
          for (int64_t i = 0; i < ga->numel(); ++i)
            (*ga)[i] += n.grad[i / d] * scale;
        }
        return;
      }
      case Op::LogSumExpLast: {
        if (Tensor* ga = grad_sink(n.in[0])) {
          const Tensor& a = value_ref(n.in[0]);
          int64_t d = a.dim(-1);
          for (int64_t i = 0; i < a.numel(); ++i) {
            int64_t r = i / d;
            (*ga)[i] += n.grad[r] * std::exp(a[i] - n.value[r]);
          }
        }
        return;
      }
    }
  }

  void bwd_elemwise(Node& n) {
    const Tensor& a = value_ref(n.in[0]);
    const Tensor& b = value_ref(n.in[1]);
    Tensor* ga = grad_sink(n.in[0]);
    Tensor* gb = grad_sink(n.in[1]);
    bool is_add = n.op == Op::Add;
    int64_t total = a.numel();
    switch (n.bcast) {
      case Bcast::Same:
        for (int64_t i = 0; i < total; ++i) {
          if (ga) (*ga)[i] += is_add ? n.grad[i] : n.grad[i] * b[i];
          if (gb) (*gb)[i] += is_add ? n.grad[i] : n.grad[i] * a[i];
        }
        return;
      case Bcast::Scalar: {
        double s = b[0];
        for (int64_t i = 0; i < total; ++i) {
          if (ga) (*ga)[i] += is_add ? n.grad[i] : n.grad[i] * s;
          if (gb) (*gb)[0] += is_add ? n.grad[i] : n.grad[i] * a[i];
        }
        return;
      }
      case Bcast::Suffix: {
        int64_t rn = b.numel();
        for (int64_t i = 0; i < total; ++i) {
          int64_t j = i % rn;
          if (ga) (*ga)[i] += is_add ? n.grad[i] : n.grad[i] * b[j];
          if (gb) (*gb)[j] += is_add ? n.grad[i] : n.grad[i] * a[i];
        }
        return;
      }
      case Bcast::LastOne: {
        int64_t d = a.dim(-1);
        for (int64_t i = 0; i < total; ++i) {
          int64_t j = i / d;
          if (ga) (*ga)[i] += is_add ? n.grad[i] : n.grad[i] * b[j];
          if (gb) (*gb)[j] += is_add ? n.grad[i] : n.grad[i] * a[i];
        }
        return;
      }
    }
  }

  void bwd_matmul(Node& n) {
    const Tensor& a = value_ref(n.in[0]);
    const Tensor& b = value_ref(n.in[1]);
    Tensor* ga = grad_sink(n.in[0]);
    Tensor* gb = grad_sink(n.in[1]);
    int64_t k = a.dim(-1);
    int64_t m = a.numel() / k;
    int64_t out_n = n.value.dim(-1);
    if (!n.transpose_rhs) {
      // y = a b; da = g b^T; db = a^T g
      if (ga) gemm_nt(m, k, out_n, n.grad.data(), b.data(), ga->data());
      if (gb) gemm_tn(k, out_n, m, a.data(), n.grad.data(), gb->data());
    } else {
      // y = a b^T; da = g b; db = g^T a
      if (ga) gemm_nn(m, k, out_n, n.grad.data(), b.data(), ga->data());
      if (gb) gemm_tn(out_n, k, m, n.grad.data(), a.data(), gb->data());
    }
  }

  void bwd_gather_dot(Node& n) {
    const Tensor& h = value_ref(n.in[0]);
    const Tensor& table = value_ref(n.in[1]);
    const Tensor& idx = value_ref(n.in[2]);
    Tensor* gh = grad_sink(n.in[0]);
    Tensor* gt = grad_sink(n.in[1]);
    int64_t d = h.dim(-1);
    int64_t rows = h.numel() / d;
    int64_t kc = idx.dim(-1);
    int64_t nrows = table.dim(0);
    for (int64_t r = 0; r < rows; ++r) {
      const double* hv = h.data() + r * d;
      for (int64_t c = 0; c < kc; ++c) {
        double g = n.grad[r * kc + c];
        if (g == 0.0) continue;
        int64_t row = as_index(idx[r * kc + c], nrows, n.name);
        if (gh) axpy(g, table.data() + row * d, gh->data() + r * d, d);
        if (gt) axpy(g, hv, gt->data() + row * d, d);
      }
    }
  }

  void bwd_catalog_scores(Node& n) {
    const Tensor& h = value_ref(n.in[0]);
    const Tensor& table = value_ref(n.in[1]);
    Tensor* gh = grad_sink(n.in[0]);
    Tensor* gt = grad_sink(n.in[1]);
    int64_t d = h.dim(-1);
    int64_t m = h.numel() / d;
    int64_t items = table.dim(0) - 1;
    // y = h T[1:]^T; dh = g T[1:]; dT[1:] = g^T h  (row 0 untouched)
    if (gh) gemm_nn(m, d, items, n.grad.data(), table.data() + d, gh->data());
    if (gt) gemm_tn(items, d, m, n.grad.data(), h.data(), gt->data() + d);
  }

  void bwd_layer_norm(Node& n) {
    const Tensor& x = value_ref(n.in[0]);
    const Tensor& g = value_ref(n.in[1]);
    Tensor* gx = grad_sink(n.in[0]);
    Tensor* gg = grad_sink(n.in[1]);
    Tensor* gb = grad_sink(n.in[2]);
    int64_t d = x.dim(-1);
    int64_t rows = x.numel() / d;
    double inv_d = 1.0 / static_cast<double>(d);
    for (int64_t r = 0; r < rows; ++r) {
      const double* gr = n.grad.data() + r * d;
      const double* xh = n.aux.data() + r * d;
      double is = n.aux2[r];
      double sum_dxh = 0.0, sum_dxh_xh = 0.0;
      for (int64_t j = 0; j < d; ++j) {
        double dxh = gr[j] * g[j];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * xh[j];
        if (gg) (*gg)[j] += gr[j] * xh[j];
        if (gb) (*gb)[j] += gr[j];
      }
      if (gx) {
        double* gxr = gx->data() + r * d;
        for (int64_t j = 0; j < d; ++j) {
          double dxh = gr[j] * g[j];
          gxr[j] += is * (dxh - inv_d * sum_dxh - xh[j] * inv_d * sum_dxh_xh);
        }
      }
    }
  }

  void bwd_attention(Node& n) {
    const Tensor& q = value_ref(n.in[0]);
    const Tensor& k = value_ref(n.in[1]);
    const Tensor& v = value_ref(n.in[2]);
    const Tensor& valid = value_ref(n.in[3]);
    Tensor* gq = grad_sink(n.in[0]);
    Tensor* gk = grad_sink(n.in[1]);
    Tensor* gv = grad_sink(n.in[2]);
    int64_t B = q.dim(0), L = q.dim(1), D = q.dim(2);
    int64_t H = n.heads, dh = D / H;
    double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> dlogit(static_cast<size_t>(L));
    for (int64_t b = 0; b < B; ++b) {
      const double* vb = valid.data() + b * L;
      for (int64_t h = 0; h < H; ++h) {
        const double* probs = n.aux.data() + ((b * H + h) * L) * L;
        for (int64_t i = 0; i < L; ++i) {
          const double* pr = probs + i * L;
          const double* go = n.grad.data() + (b * L + i) * D + h * dh;
          const double* qi = q.data() + (b * L + i) * D + h * dh;
          double dot_pg = 0.0;
          bool any = false;
          for (int64_t j = 0; j <= i; ++j) {
            if (vb[j] == 0.0 || pr[j] == 0.0) continue;
            any = true;
            double dp = dot(go, v.data() + (b * L + j) * D + h * dh, dh);
            dlogit[static_cast<size_t>(j)] = dp;
            dot_pg += pr[j] * dp;
            if (gv) {
              axpy(pr[j], go, gv->data() + (b * L + j) * D + h * dh, dh);
            }
          }
          if (!any) continue;
          for (int64_t j = 0; j <= i; ++j) {
            if (vb[j] == 0.0 || pr[j] == 0.0) continue;
            double dl = pr[j] * (dlogit[static_cast<size_t>(j)] - dot_pg) * inv;
            if (dl == 0.0) continue;
            if (gq) {
              axpy(dl, k.data() + (b * L + j) * D + h * dh,
                   gq->data() + (b * L + i) * D + h * dh, dh);
            }
            if (gk) {
              axpy(dl, qi, gk->data() + (b * L + j) * D + h * dh, dh);
            }
          }
        }
      }
    }
  }

  ParameterStore* params_;
  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> param_nodes_;
  std::unordered_map<NodeId, std::vector<char>> reach_cache_;
  NodeId last_root_ = -1;
  int64_t clamp_events_ = 0;
};

}  // namespace gsrec
