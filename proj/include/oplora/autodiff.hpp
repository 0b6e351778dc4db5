#pragma once

// Define-by-run reverse-mode differentiation over dense 64-bit matrices.
//
// A Tensor is a cheap handle to a graph node. Leaves are created by the
// caller (parameters, inputs); every op returns a new interior node holding
// the forward value and a closure that maps the output gradient to input
// gradients. backward() orders the ancestors of a scalar loss topologically
// and runs the closures in reverse, accumulating into leaf grads.
//
// Vectors are n x 1 matrices. The only broadcast is add_bias (column vector
// across columns).

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "oplora/errors.hpp"

namespace oplora {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  std::ostringstream os;
  os << '(' << rows << 'x' << cols << ')';
  return os.str();
}
inline std::string shape_str(const Matrix& m) { return shape_str(m.rows(), m.cols()); }

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<std::vector<Matrix>(const Matrix& upstream)>;

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

struct Node {
  Matrix value;
  std::optional<Matrix> grad;
  bool requires_grad = false;
  std::uint64_t id = next_node_id();
  std::string name;
  std::string op = "leaf";
  std::vector<NodePtr> inputs;
  // Returns one gradient per input (empty matrix where the input needs none).
  BackwardFn backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  /// A leaf node. requires_grad leaves receive grads on backward().
  static Tensor leaf(Matrix value, bool requires_grad = false, std::string name = {}) {
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    node->name = std::move(name);
    return Tensor(std::move(node));
  }
  static Tensor parameter(Matrix value, std::string name = {}) {
    return leaf(std::move(value), true, std::move(name));
  }
  static Tensor constant(Matrix value) { return leaf(std::move(value), false); }
  static Tensor scalar(double v, bool requires_grad = false) {
    return leaf(Matrix::Constant(1, 1, v), requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Matrix& value() const { return node_->value; }
  /// In-place update of a leaf's value (optimizers, initialisers).
  Matrix& mutable_value() const { return node_->value; }
  double item() const {
    if (rows() != 1 || cols() != 1) {
      throw ContractError("item() on non-scalar tensor of shape " + shape_str(value()));
    }
    return node_->value(0, 0);
  }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  Eigen::Index size() const { return node_->value.size(); }
  bool is_scalar() const { return rows() == 1 && cols() == 1; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->inputs.empty(); }
  std::uint64_t id() const { return node_->id; }
  const std::string& name() const { return node_->name; }
  const std::string& op() const { return node_->op; }
  const std::optional<Matrix>& grad() const { return node_->grad; }
  void zero_grad() const { node_->grad.reset(); }

  /// A new leaf with a copy of the value and no history.
  Tensor detach() const { return leaf(node_->value, false, node_->name); }

  const detail::NodePtr& node() const { return node_; }

  /// Interior node constructor for op implementations.
  static Tensor from_op(std::string op, Matrix value, std::vector<Tensor> inputs,
                        detail::BackwardFn backward) {
    auto node = std::make_shared<detail::Node>();
    node->value = std::move(value);
    node->op = std::move(op);
    for (auto& in : inputs) {
      node->requires_grad = node->requires_grad || in.requires_grad();
      node->inputs.push_back(in.node_);
    }
    if (node->requires_grad) {
      node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
  }

 private:
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}
  detail::NodePtr node_;
};

/// One operation record of a traced graph.
struct OpRecord {
  std::string op;
  std::vector<std::uint64_t> input_ids;
  std::uint64_t output_id = 0;
};

/// The ancestors of a tensor in topological order (inputs before outputs).
struct Graph {
  std::vector<detail::NodePtr> nodes;
  std::vector<OpRecord> records;  // interior nodes only

  bool is_topological() const {
    std::unordered_set<std::uint64_t> seen;
    for (const auto& n : nodes) {
      for (const auto& in : n->inputs) {
        if (!seen.contains(in->id)) return false;
      }
      seen.insert(n->id);
    }
    return true;
  }
};

inline Graph trace(const Tensor& root) {
  Graph g;
  std::unordered_set<const detail::Node*> visited;
  // Iterative post-order DFS; deep graphs would overflow a recursive walk.
  std::vector<std::pair<detail::NodePtr, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const detail::NodePtr& child = node->inputs[next++];
      if (visited.insert(child.get()).second) stack.emplace_back(child, 0);
      continue;
    }
    if (!node->inputs.empty()) {
      OpRecord rec{node->op, {}, node->id};
      for (const auto& in : node->inputs) rec.input_ids.push_back(in->id);
      g.records.push_back(std::move(rec));
    }
    g.nodes.push_back(std::move(node));
    stack.pop_back();
  }
  return g;
}

/// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
/// `loss`. Grads add up across calls until zero_grad().
inline void backward(const Tensor& loss) {
  if (!loss.defined() || !loss.is_scalar()) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.value()) : std::string("(undefined)")));
  }
  if (!loss.requires_grad()) return;
  const Graph g = trace(loss);
  std::unordered_map<const detail::Node*, Matrix> pending;
  pending.emplace(loss.node().get(), Matrix::Ones(1, 1));
  for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) {
    detail::Node* node = it->get();
    auto found = pending.find(node);
    if (found == pending.end()) continue;
    Matrix upstream = std::move(found->second);
    pending.erase(found);
    if (node->inputs.empty()) {
      if (node->requires_grad) {
        if (node->grad) {
          *node->grad += upstream;
        } else {
          node->grad = std::move(upstream);
        }
      }
      continue;
    }
    std::vector<Matrix> grads = node->backward(upstream);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      detail::Node* in = node->inputs[i].get();
      if (!in->requires_grad || grads[i].size() == 0) continue;
      auto [slot, inserted] = pending.try_emplace(in, std::move(grads[i]));
      if (!inserted) slot->second += grads[i];
    }
  }
}

inline void zero_grad(const std::vector<Tensor>& params) {
  for (const auto& p : params) p.zero_grad();
}

// ---------------------------------------------------------------------------
// Ops

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                         shape_str(b.value()));
  }
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.value()) + " x " +
                         shape_str(b.value()));
  }
  Matrix out = a.value() * b.value();
  return Tensor::from_op("matmul", std::move(out), {a, b}, [a, b](const Matrix& g) {
    std::vector<Matrix> grads(2);
    if (a.requires_grad()) grads[0] = g * b.value().transpose();
    if (b.requires_grad()) grads[1] = a.value().transpose() * g;
    return grads;
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  return Tensor::from_op("add", a.value() + b.value(), {a, b},
                         [](const Matrix& g) { return std::vector<Matrix>{g, g}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  return Tensor::from_op("sub", a.value() - b.value(), {a, b},
                         [](const Matrix& g) { return std::vector<Matrix>{g, -g}; });
}

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape("hadamard", a, b);
  return Tensor::from_op("hadamard", a.value().cwiseProduct(b.value()), {a, b},
                         [a, b](const Matrix& g) {
                           return std::vector<Matrix>{g.cwiseProduct(b.value()),
                                                      g.cwiseProduct(a.value())};
                         });
}

inline Tensor scalar_mul(const Tensor& a, double c) {
  return Tensor::from_op("scalar_mul", a.value() * c, {a},
                         [c](const Matrix& g) { return std::vector<Matrix>{g * c}; });
}

/// a * s where s is a 1x1 tensor; differentiable in both.
inline Tensor scale(const Tensor& a, const Tensor& s) {
  if (!s.is_scalar()) {
    throw DimensionError("scale: expected a 1x1 scale, got " + shape_str(s.value()));
  }
  const double sv = s.item();
  return Tensor::from_op("scale", a.value() * sv, {a, s}, [a, sv](const Matrix& g) {
    return std::vector<Matrix>{g * sv, Matrix::Constant(1, 1, g.cwiseProduct(a.value()).sum())};
  });
}

/// a + bias broadcast across columns; bias is (a.rows x 1).
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  if (bias.cols() != 1 || bias.rows() != a.rows()) {
    throw DimensionError("add_bias: bias " + shape_str(bias.value()) + " does not broadcast over " +
                         shape_str(a.value()));
  }
  Matrix out = a.value().colwise() + bias.value().col(0);
  return Tensor::from_op("add_bias", std::move(out), {a, bias}, [](const Matrix& g) {
    return std::vector<Matrix>{g, g.rowwise().sum()};
  });
}

/// max(0, x); the subgradient at exactly 0 is 0.
inline Tensor relu(const Tensor& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return Tensor::from_op("relu", std::move(out), {a}, [a](const Matrix& g) {
    return std::vector<Matrix>{(a.value().array() > 0.0).select(g, 0.0)};
  });
}

/// Sum of squared entries, as a 1x1 tensor.
inline Tensor frobenius_sq(const Tensor& a) {
  return Tensor::from_op("frobenius_sq", Matrix::Constant(1, 1, a.value().squaredNorm()), {a},
                         [a](const Matrix& g) {
                           return std::vector<Matrix>{a.value() * (2.0 * g(0, 0))};
                         });
}

inline Tensor sum(const Tensor& a) {
  const auto r = a.rows(), c = a.cols();
  return Tensor::from_op("sum", Matrix::Constant(1, 1, a.value().sum()), {a},
                         [r, c](const Matrix& g) {
                           return std::vector<Matrix>{Matrix::Constant(r, c, g(0, 0))};
                         });
}

inline Tensor transpose(const Tensor& a) {
  return Tensor::from_op("transpose", a.value().transpose(), {a}, [](const Matrix& g) {
    return std::vector<Matrix>{g.transpose()};
  });
}

/// Entries [offset, offset + rows*cols) of a column vector, laid out row-major
/// into a rows x cols matrix.
inline Tensor segment(const Tensor& flat, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
  if (flat.cols() != 1) {
    throw DimensionError("segment: expected a column vector, got " + shape_str(flat.value()));
  }
  if (offset < 0 || rows < 0 || cols < 0 || offset + rows * cols > flat.rows()) {
    throw DimensionError("segment: range [" + std::to_string(offset) + ", " +
                         std::to_string(offset + rows * cols) + ") exceeds length " +
                         std::to_string(flat.rows()));
  }
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Matrix out = Eigen::Map<const RowMajor>(flat.value().data() + offset, rows, cols);
  const auto total = flat.rows();
  return Tensor::from_op("segment", std::move(out), {flat},
                         [offset, rows, cols, total](const Matrix& g) {
                           Matrix full = Matrix::Zero(total, 1);
                           Eigen::Map<RowMajor>(full.data() + offset, rows, cols) = g;
                           return std::vector<Matrix>{std::move(full)};
                         });
}

/// Divides each column by its Euclidean norm. A zero column is an error.
inline Tensor column_normalize(const Tensor& a) {
  const Eigen::RowVectorXd norms = a.value().colwise().norm();
  for (Eigen::Index j = 0; j < norms.size(); ++j) {
    if (!(norms(j) > 0.0)) {
      throw ContractError("column_normalize: column " + std::to_string(j) + " has zero norm");
    }
  }
  Matrix out = a.value().array().rowwise() / norms.array();
  Matrix unit = out;
  return Tensor::from_op("column_normalize", std::move(out), {a},
                         [unit = std::move(unit), norms](const Matrix& g) {
                           // d(v/|v|) = (I - u u^T) dv / |v| per column.
                           const Eigen::RowVectorXd proj = unit.cwiseProduct(g).colwise().sum();
                           Matrix grad = g - unit * proj.asDiagonal();
                           grad = grad.array().rowwise() / norms.array();
                           return std::vector<Matrix>{std::move(grad)};
                         });
}

/// Scales column j of `a` by scales(j); scales is (a.cols x 1).
inline Tensor scale_columns(const Tensor& a, const Tensor& scales) {
  if (scales.cols() != 1 || scales.rows() != a.cols()) {
    throw DimensionError("scale_columns: scales " + shape_str(scales.value()) + " vs columns of " +
                         shape_str(a.value()));
  }
  Matrix out = a.value() * scales.value().col(0).asDiagonal();
  return Tensor::from_op("scale_columns", std::move(out), {a, scales}, [a, scales](const Matrix& g) {
    std::vector<Matrix> grads(2);
    grads[0] = g * scales.value().col(0).asDiagonal();
    grads[1] = g.cwiseProduct(a.value()).colwise().sum().transpose();
    return grads;
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scalar_mul(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scalar_mul(a, c); }

}  // namespace oplora
