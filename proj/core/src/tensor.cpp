#include "libs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace libs {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

void check_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto d : shape) {
    if (d == 0) {
      throw DimensionError("tensor dimensions must be positive, got " +
                           shape_str(shape));
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), Real{0});
}

Tensor::Tensor(Shape shape, std::vector<Real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_str(shape_) + " needs " +
                         std::to_string(shape_numel(shape_)) +
                         " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::vector(std::vector<Real> values) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<Real> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1;
  return t;
}

Real Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](Real v) { return std::isfinite(v); });
}

void Tensor::fill(Real value) { std::fill(data_.begin(), data_.end(), value); }

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Constant: return "constant";
    case OpKind::Leaf: return "leaf";
    case OpKind::Param: return "param";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softmax: return "softmax";
    case OpKind::SoftmaxRows: return "softmax_rows";
    case OpKind::SqL2: return "sq_l2";
    case OpKind::Scale: return "scale";
    case OpKind::Sum: return "sum";
    case OpKind::Concat: return "concat";
    case OpKind::Row: return "row";
    case OpKind::StackRows: return "stack_rows";
    case OpKind::Transpose: return "transpose";
    case OpKind::Nll: return "nll";
  }
  return "?";
}

const Tensor& Var::value() const {
  if (!graph_) throw ContractError("value() on an unbound Var");
  return graph_->value(id_);
}

// ---------------------------------------------------------------------------
// Graph

Var Graph::push(OpKind op, Tensor value, std::initializer_list<Var> parents,
                Real scalar, std::size_t index) {
  return push(op, std::move(value),
              std::span<const Var>(parents.begin(), parents.size()), scalar,
              index);
}

Var Graph::push(OpKind op, Tensor value, std::span<const Var> parents,
                Real scalar, std::size_t index) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.scalar = scalar;
  n.index = index;
  n.parent_begin = static_cast<std::uint32_t>(parent_pool_.size());
  n.parent_count = static_cast<std::uint32_t>(parents.size());
  for (const Var& p : parents) {
    if (p.graph() != this) {
      throw ContractError(std::string("operand of ") + op_name(op) +
                          " belongs to a different graph");
    }
    if (grad_enabled_) {
      parent_pool_.push_back(p.id());
      n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
    }
  }
  if (!grad_enabled_) n.parent_count = 0;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) {
  return push(OpKind::Constant, std::move(value), {});
}

Var Graph::leaf(Tensor value) {
  Var v = push(OpKind::Leaf, std::move(value), {});
  nodes_[v.id()].requires_grad = grad_enabled_;
  return v;
}

Var Graph::param(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
    return Var(this, it->second);
  }
  Var v = push(OpKind::Param, p.value, {});
  nodes_[v.id()].requires_grad = grad_enabled_;
  param_nodes_.emplace(&p, v.id());
  return v;
}

std::span<const std::uint32_t> Graph::parents(Var v) const {
  const Node& n = nodes_[v.id()];
  return std::span<const std::uint32_t>(parent_pool_)
      .subspan(n.parent_begin, n.parent_count);
}

const Tensor* Graph::grad(Var v) const {
  if (v.graph() != this) return nullptr;
  const Node& n = nodes_[v.id()];
  return n.grad.empty() ? nullptr : &n.grad;
}

const Tensor* Graph::param_grad(const Parameter& p) const {
  auto it = param_nodes_.find(&p);
  if (it == param_nodes_.end()) return nullptr;
  const Node& n = nodes_[it->second];
  return n.grad.empty() ? nullptr : &n.grad;
}

Tensor& Graph::grad_slot(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Graph::backward(Var loss) {
  if (loss.graph() != this) {
    throw ContractError("backward() on a Var from another graph");
  }
  if (!grad_enabled_) {
    throw ContractError("backward() on a graph built without gradients");
  }
  if (!loss.value().is_scalar()) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  grad_slot(loss.id())[0] = 1;
  for (std::uint32_t id = loss.id() + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || n.parent_count == 0) continue;
    backprop_node(id);
  }
}

namespace {

struct MatDims {
  std::size_t m, k, n;
};

MatDims matmul_dims(const Tensor& a, const Tensor& b) {
  auto fail = [&] {
    throw DimensionError("matmul shape mismatch: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
  };
  if (a.rank() > 2 || b.rank() > 2) fail();
  if (a.rank() == 1 && b.rank() == 1) fail();
  std::size_t m = a.rank() == 2 ? a.shape()[0] : 1;
  std::size_t k = a.rank() == 2 ? a.shape()[1] : a.shape()[0];
  std::size_t kb = b.shape()[0];
  std::size_t n = b.rank() == 2 ? b.shape()[1] : 1;
  if (k != kb) fail();
  return {m, k, n};
}

Shape matmul_shape(const Tensor& a, const Tensor& b, const MatDims& d) {
  if (a.rank() == 1) return {d.n};
  if (b.rank() == 1) return {d.m};
  return {d.m, d.n};
}

void gemm_acc(const Real* a, const Real* b, Real* c, const MatDims& d) {
  for (std::size_t i = 0; i < d.m; ++i) {
    Real* crow = c + i * d.n;
    const Real* arow = a + i * d.k;
    for (std::size_t p = 0; p < d.k; ++p) {
      const Real av = arow[p];
      const Real* brow = b + p * d.n;
      for (std::size_t j = 0; j < d.n; ++j) crow[j] += av * brow[j];
    }
  }
}

void require_same_shape(const char* what, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + " shape mismatch: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void softmax_inplace(std::span<Real> x) {
  Real mx = *std::max_element(x.begin(), x.end());
  Real total = 0;
  for (auto& v : x) {
    v = std::exp(v - mx);
    total += v;
  }
  for (auto& v : x) v /= total;
}

Real log_sum_exp(std::span<const Real> x) {
  Real mx = *std::max_element(x.begin(), x.end());
  Real total = 0;
  for (auto v : x) total += std::exp(v - mx);
  return mx + std::log(total);
}

}  // namespace

void Graph::backprop_node(std::uint32_t id) {
  // No node is appended during backward, so references into nodes_ stay valid.
  const Node& n = nodes_[id];
  const Tensor& g = n.grad;
  const auto par = std::span<const std::uint32_t>(parent_pool_)
                       .subspan(n.parent_begin, n.parent_count);
  auto needs = [&](std::size_t i) { return nodes_[par[i]].requires_grad; };

  switch (n.op) {
    case OpKind::Constant:
    case OpKind::Leaf:
    case OpKind::Param:
      break;
    case OpKind::MatMul: {
      const Tensor& a = nodes_[par[0]].value;
      const Tensor& b = nodes_[par[1]].value;
      MatDims d = matmul_dims(a, b);
      if (needs(0)) {
        Real* ga = grad_slot(par[0]).data().data();
        for (std::size_t i = 0; i < d.m; ++i) {
          for (std::size_t p = 0; p < d.k; ++p) {
            Real acc = 0;
            const Real* brow = b.data().data() + p * d.n;
            const Real* grow = g.data().data() + i * d.n;
            for (std::size_t j = 0; j < d.n; ++j) acc += grow[j] * brow[j];
            ga[i * d.k + p] += acc;
          }
        }
      }
      if (needs(1)) {
        Real* gb = grad_slot(par[1]).data().data();
        for (std::size_t i = 0; i < d.m; ++i) {
          const Real* grow = g.data().data() + i * d.n;
          for (std::size_t p = 0; p < d.k; ++p) {
            const Real av = a.data()[i * d.k + p];
            Real* gbrow = gb + p * d.n;
            for (std::size_t j = 0; j < d.n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
      break;
    }
    case OpKind::Add:
    case OpKind::Sub: {
      const Real sign = n.op == OpKind::Add ? 1 : -1;
      if (needs(0)) {
        auto ga = grad_slot(par[0]).data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (needs(1)) {
        auto gb = grad_slot(par[1]).data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
      }
      break;
    }
    case OpKind::Mul: {
      const Tensor& a = nodes_[par[0]].value;
      const Tensor& b = nodes_[par[1]].value;
      if (needs(0)) {
        auto ga = grad_slot(par[0]).data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (needs(1)) {
        auto gb = grad_slot(par[1]).data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
      break;
    }
    case OpKind::Tanh: {
      auto gx = grad_slot(par[0]).data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Real y = n.value[i];
        gx[i] += g[i] * (1 - y * y);
      }
      break;
    }
    case OpKind::Sigmoid: {
      auto gx = grad_slot(par[0]).data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Real y = n.value[i];
        gx[i] += g[i] * y * (1 - y);
      }
      break;
    }
    case OpKind::Softmax:
    case OpKind::SoftmaxRows: {
      const std::size_t rows = n.op == OpKind::Softmax ? 1 : n.value.rows();
      const std::size_t cols = n.value.size() / rows;
      auto gx = grad_slot(par[0]).data();
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* y = n.value.data().data() + r * cols;
        const Real* gr = g.data().data() + r * cols;
        Real dot = 0;
        for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * y[j];
        for (std::size_t j = 0; j < cols; ++j) {
          gx[r * cols + j] += y[j] * (gr[j] - dot);
        }
      }
      break;
    }
    case OpKind::SqL2: {
      const Tensor& a = nodes_[par[0]].value;
      const Tensor& b = nodes_[par[1]].value;
      const Real up = g[0];
      if (needs(0)) {
        auto ga = grad_slot(par[0]).data();
        for (std::size_t i = 0; i < a.size(); ++i) {
          ga[i] += 2 * (a[i] - b[i]) * up;
        }
      }
      if (needs(1)) {
        auto gb = grad_slot(par[1]).data();
        for (std::size_t i = 0; i < a.size(); ++i) {
          gb[i] -= 2 * (a[i] - b[i]) * up;
        }
      }
      break;
    }
    case OpKind::Scale: {
      auto gx = grad_slot(par[0]).data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += n.scalar * g[i];
      break;
    }
    case OpKind::Sum: {
      auto gx = grad_slot(par[0]).data();
      for (auto& v : gx) v += g[0];
      break;
    }
    case OpKind::Concat: {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < par.size(); ++p) {
        const std::size_t len = nodes_[par[p]].value.size();
        if (needs(p)) {
          auto gp = grad_slot(par[p]).data();
          for (std::size_t i = 0; i < len; ++i) gp[i] += g[offset + i];
        }
        offset += len;
      }
      break;
    }
    case OpKind::StackRows: {
      // Parents may repeat; accumulate per occurrence.
      const std::size_t cols = n.value.cols();
      for (std::size_t p = 0; p < par.size(); ++p) {
        if (!needs(p)) continue;
        auto gp = grad_slot(par[p]).data();
        for (std::size_t j = 0; j < cols; ++j) gp[j] += g[p * cols + j];
      }
      break;
    }
    case OpKind::Row: {
      const std::size_t cols = g.size();
      auto gx = grad_slot(par[0]).data();
      for (std::size_t j = 0; j < cols; ++j) gx[n.index * cols + j] += g[j];
      break;
    }
    case OpKind::Transpose: {
      const std::size_t r = n.value.rows();
      const std::size_t c = n.value.cols();
      auto gx = grad_slot(par[0]).data();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gx[j * r + i] += g[i * c + j];
      }
      break;
    }
    case OpKind::Nll: {
      const Tensor& logits = nodes_[par[0]].value;
      std::vector<Real> p(logits.data().begin(), logits.data().end());
      softmax_inplace(p);
      p[n.index] -= 1;
      auto gx = grad_slot(par[0]).data();
      for (std::size_t i = 0; i < p.size(); ++i) gx[i] += g[0] * p[i];
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

Graph& graph_of(Var a) {
  if (!a.valid()) throw ContractError("operation on an unbound Var");
  return *a.graph();
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  MatDims d = matmul_dims(a, b);
  Tensor out(matmul_shape(a, b, d));
  gemm_acc(a.data().data(), b.data().data(), out.data().data(), d);
  return out;
}

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a);
  return g.push(OpKind::MatMul, matmul(a.value(), b.value()), {a, b});
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return graph_of(a).push(OpKind::Add, std::move(out), {a, b});
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return graph_of(a).push(OpKind::Sub, std::move(out), {a, b});
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return graph_of(a).push(OpKind::Mul, std::move(out), {a, b});
}

Var tanh(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = std::tanh(v);
  return graph_of(x).push(OpKind::Tanh, std::move(out), {x});
}

Var sigmoid(Var x) {
  Tensor out = x.value();
  for (auto& v : out.data()) v = 1 / (1 + std::exp(-v));
  return graph_of(x).push(OpKind::Sigmoid, std::move(out), {x});
}

std::vector<Real> softmax(std::span<const Real> x) {
  if (x.empty()) throw DomainError("softmax of an empty vector");
  std::vector<Real> out(x.begin(), x.end());
  softmax_inplace(out);
  return out;
}

std::vector<Real> log_softmax(std::span<const Real> x) {
  if (x.empty()) throw DomainError("log_softmax of an empty vector");
  const Real lse = log_sum_exp(x);
  std::vector<Real> out(x.begin(), x.end());
  for (auto& v : out) v -= lse;
  return out;
}

Var softmax(Var x) {
  if (x.value().rank() != 1) {
    throw DimensionError("softmax expects a vector, got " +
                         shape_str(x.shape()));
  }
  Tensor out = x.value();
  softmax_inplace(out.data());
  return graph_of(x).push(OpKind::Softmax, std::move(out), {x});
}

Var softmax_rows(Var x) {
  if (x.value().rank() != 2) {
    throw DimensionError("softmax_rows expects a matrix, got " +
                         shape_str(x.shape()));
  }
  Tensor out = x.value();
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  return graph_of(x).push(OpKind::SoftmaxRows, std::move(out), {x});
}

Var sq_l2(Var a, Var b) {
  require_same_shape("sq_l2", a.value(), b.value());
  const auto& av = a.value();
  const auto& bv = b.value();
  Real acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const Real d = av[i] - bv[i];
    acc += d * d;
  }
  return graph_of(a).push(OpKind::SqL2, Tensor::scalar(acc), {a, b});
}

Var scale(Var x, Real factor) {
  Tensor out = x.value();
  for (auto& v : out.data()) v *= factor;
  return graph_of(x).push(OpKind::Scale, std::move(out), {x}, factor);
}

Var sum(Var x) {
  Real acc = 0;
  for (auto v : x.value().data()) acc += v;
  return graph_of(x).push(OpKind::Sum, Tensor::scalar(acc), {x});
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  std::vector<Real> out;
  for (const Var& p : parts) {
    if (p.value().rank() != 1) {
      throw DimensionError("concat expects vectors, got " +
                           shape_str(p.shape()));
    }
    out.insert(out.end(), p.value().data().begin(), p.value().data().end());
  }
  return graph_of(parts[0]).push(OpKind::Concat, Tensor::vector(std::move(out)),
                                 parts);
}

Var concat(Var a, Var b) {
  const Var parts[2] = {a, b};
  return concat(std::span<const Var>(parts));
}

Var row(Var matrix, std::size_t index) {
  const Tensor& m = matrix.value();
  if (m.rank() != 2) {
    throw DimensionError("row() expects a matrix, got " + shape_str(m.shape()));
  }
  if (index >= m.rows()) {
    throw ContractError("row index " + std::to_string(index) +
                        " out of range for " + shape_str(m.shape()));
  }
  auto r = m.row(index);
  return graph_of(matrix).push(
      OpKind::Row, Tensor::vector(std::vector<Real>(r.begin(), r.end())),
      {matrix}, 0, index);
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw DimensionError("stack_rows of zero vectors");
  const std::size_t cols = rows[0].value().size();
  std::vector<Real> out;
  out.reserve(cols * rows.size());
  for (const Var& r : rows) {
    if (r.value().rank() != 1 || r.value().size() != cols) {
      throw DimensionError("stack_rows expects equal-length vectors, got " +
                           shape_str(r.shape()) + " with row length " +
                           std::to_string(cols));
    }
    out.insert(out.end(), r.value().data().begin(), r.value().data().end());
  }
  return graph_of(rows[0]).push(
      OpKind::StackRows, Tensor::matrix(rows.size(), cols, std::move(out)),
      rows);
}

Var transpose(Var matrix) {
  const Tensor& m = matrix.value();
  if (m.rank() != 2) {
    throw DimensionError("transpose expects a matrix, got " +
                         shape_str(m.shape()));
  }
  Tensor out(Shape{m.cols(), m.rows()});
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out.at(j, i) = m.at(i, j);
  }
  return graph_of(matrix).push(OpKind::Transpose, std::move(out), {matrix});
}

Var nll(Var logits, std::size_t target) {
  const Tensor& x = logits.value();
  if (x.rank() != 1) {
    throw DimensionError("nll expects a logit vector, got " +
                         shape_str(x.shape()));
  }
  if (target >= x.size()) {
    throw ContractError("nll target " + std::to_string(target) +
                        " out of range for " + std::to_string(x.size()) +
                        " classes");
  }
  const Real loss = log_sum_exp(x.data()) - x[target];
  return graph_of(logits).push(OpKind::Nll, Tensor::scalar(loss), {logits}, 0,
                               target);
}

Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw DimensionError("add_n of zero terms");
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace libs
