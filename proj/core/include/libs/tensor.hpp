#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "libs/error.hpp"

namespace libs {

// All graph arithmetic runs in double precision. Parameters are additionally
// kept f32-representable by the trainer so checkpoints round-trip exactly.
using Real = double;
using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

// Dense row-major tensor. Rank 1 is a vector, rank 2 a matrix; a scalar is a
// rank-1 tensor of size 1. No broadcasting anywhere.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor vector(std::vector<Real> values);
  static Tensor vector(std::initializer_list<Real> values) {
    return vector(std::vector<Real>(values));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<Real> values);
  static Tensor scalar(Real value) { return vector({value}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  std::size_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const { return shape_.size() == 2 ? shape_[1] : 1; }
  bool is_scalar() const { return data_.size() == 1; }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  std::vector<Real>& storage() { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }
  Real& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  std::span<const Real> row(std::size_t r) const {
    return std::span<const Real>(data_).subspan(r * cols(), cols());
  }
  std::span<Real> row(std::size_t r) {
    return std::span<Real>(data_).subspan(r * cols(), cols());
  }

  Real item() const;
  bool all_finite() const;
  void fill(Real value);

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<Real> data_;
};

// A named trainable tensor. Gradients live in the Graph (per step) and are
// collected by the caller, so a Parameter itself is just a name and a value.
struct Parameter {
  std::string name;
  Tensor value;
};

enum class OpKind : std::uint8_t {
  Constant,
  Leaf,
  Param,
  MatMul,
  Add,
  Sub,
  Mul,
  Tanh,
  Sigmoid,
  Softmax,
  SoftmaxRows,
  SqL2,
  Scale,
  Sum,
  Concat,
  Row,
  StackRows,
  Transpose,
  Nll,
};

const char* op_name(OpKind kind);

class Graph;

// Lightweight handle to a node of a Graph.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Graph* graph() const { return graph_; }
  std::uint32_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* g, std::uint32_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

// Define-by-run reverse-mode differentiation tape. Nodes are appended in
// topological order, so backward is a single reverse sweep. A Graph and its
// nodes belong to one thread.
class Graph {
 public:
  // With grad_enabled == false, param() yields constants and no backward
  // bookkeeping is kept (inference).
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  // A differentiable input that is not a Parameter (used by tests and
  // gradient checks).
  Var leaf(Tensor value);
  // Binds a parameter; repeated calls return the same node.
  Var param(const Parameter& p);

  void backward(Var loss);

  // Gradient accumulated into a node by the last backward(); nullptr if no
  // gradient reached it.
  const Tensor* grad(Var v) const;
  const Tensor* param_grad(const Parameter& p) const;

  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  OpKind op(Var v) const { return nodes_[v.id()].op; }
  std::span<const std::uint32_t> parents(Var v) const;
  std::size_t node_count() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

  // Internal: used by the op free functions.
  Var push(OpKind op, Tensor value, std::initializer_list<Var> parents,
           Real scalar = 0, std::size_t index = 0);
  Var push(OpKind op, Tensor value, std::span<const Var> parents,
           Real scalar = 0, std::size_t index = 0);
  bool requires_grad(Var v) const { return nodes_[v.id()].requires_grad; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    OpKind op = OpKind::Constant;
    bool requires_grad = false;
    std::uint32_t parent_begin = 0;
    std::uint32_t parent_count = 0;
    Real scalar = 0;
    std::size_t index = 0;
  };

  Tensor& grad_slot(std::uint32_t id);
  void backprop_node(std::uint32_t id);

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<std::uint32_t> parent_pool_;
  std::unordered_map<const Parameter*, std::uint32_t> param_nodes_;
};

// Matrix product. Ranks: [m×k]·[k×n] -> [m×n]; [m×k]·[k] -> [m];
// [k]·[k×n] -> [n].
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var tanh(Var x);
Var sigmoid(Var x);
// Softmax over a vector.
Var softmax(Var x);
// Row-wise softmax over a matrix.
Var softmax_rows(Var x);
// Sum of squared differences; scalar.
Var sq_l2(Var a, Var b);
Var scale(Var x, Real factor);
Var sum(Var x);
Var concat(std::span<const Var> parts);
Var concat(Var a, Var b);
Var row(Var matrix, std::size_t index);
Var stack_rows(std::span<const Var> rows);
Var transpose(Var matrix);
// -log softmax(logits)[target]; scalar.
Var nll(Var logits, std::size_t target);
// Sum of a list of scalars.
Var add_n(std::span<const Var> terms);

// Dense helpers outside the graph.
Tensor matmul(const Tensor& a, const Tensor& b);
std::vector<Real> softmax(std::span<const Real> x);
std::vector<Real> log_softmax(std::span<const Real> x);

}  // namespace libs
