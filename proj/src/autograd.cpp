#include "dphoi/autograd.hpp"

#include "dphoi/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

namespace dphoi::ag {

namespace {

thread_local bool g_grad_enabled = true;

void check(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

// Builds a result node; the backward closure is only kept when some input
// needs a gradient and grad mode is on.
Var make(Matrix value, std::vector<NodePtr> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in->requires_grad;
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

template <typename Derived>
void push(Node& in, const Eigen::MatrixBase<Derived>& g) {
  if (in.requires_grad) in.accumulate(g);
}

}  // namespace

Var::Var(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var Var::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return Var(std::move(m));
}

Matrix Var::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

double Var::item() const {
  check(rows() == 1 && cols() == 1, "item(): value is not 1x1");
  return node_->value(0, 0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& root) {
  check(root.rows() == 1 && root.cols() == 1, "backward(): root must be 1x1");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
}

Var constant(Matrix value) { return Var(std::move(value), false); }

Var detach(const Var& a) { return Var(a.value(), false); }

// ---- linear algebra ----

Var matmul(const Var& a, const Var& b) {
  check(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  return make(std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) x.accumulate(self.grad * y.value.transpose());
    if (y.requires_grad) y.accumulate(x.value.transpose() * self.grad);
  });
}

Var transpose(const Var& a) {
  Matrix out = a.value().transpose();
  return make(std::move(out), {a.node()}, [](Node& self) {
    push(*self.inputs[0], self.grad.transpose());
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  check(x.cols() == weight.rows(), "linear: input width does not match weight rows");
  check(bias.rows() == 1 && bias.cols() == weight.cols(), "linear: bias shape");
  Matrix out = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  return make(std::move(out), {x.node(), weight.node(), bias.node()}, [](Node& self) {
    Node& in = *self.inputs[0];
    Node& w = *self.inputs[1];
    Node& b = *self.inputs[2];
    if (in.requires_grad) in.accumulate(self.grad * w.value.transpose());
    if (w.requires_grad) w.accumulate(in.value.transpose() * self.grad);
    if (b.requires_grad) b.accumulate(self.grad.colwise().sum());
  });
}

// ---- elementwise binary ----

Var add(const Var& a, const Var& b) {
  same_shape(a, b, "add");
  return make(a.value() + b.value(), {a.node(), b.node()}, [](Node& self) {
    push(*self.inputs[0], self.grad);
    push(*self.inputs[1], self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  same_shape(a, b, "sub");
  return make(a.value() - b.value(), {a.node(), b.node()}, [](Node& self) {
    push(*self.inputs[0], self.grad);
    push(*self.inputs[1], -self.grad);
  });
}

Var mul(const Var& a, const Var& b) {
  same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return make(std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) x.accumulate(self.grad.cwiseProduct(y.value));
    if (y.requires_grad) y.accumulate(self.grad.cwiseProduct(x.value));
  });
}

Var div(const Var& a, const Var& b) {
  same_shape(a, b, "div");
  Matrix out = a.value().cwiseQuotient(b.value());
  return make(std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    if (x.requires_grad) x.accumulate(self.grad.cwiseQuotient(y.value));
    if (y.requires_grad) {
      y.accumulate(-self.grad.cwiseProduct(self.value).cwiseQuotient(y.value));
    }
  });
}

Var minimum(const Var& a, const Var& b) {
  same_shape(a, b, "minimum");
  Matrix out = a.value().cwiseMin(b.value());
  return make(std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    const auto first = (x.value.array() <= y.value.array()).cast<double>().matrix();
    if (x.requires_grad) x.accumulate(self.grad.cwiseProduct(first));
    if (y.requires_grad) {
      y.accumulate(self.grad.cwiseProduct((Matrix::Ones(first.rows(), first.cols()) - first)));
    }
  });
}

Var maximum(const Var& a, const Var& b) {
  same_shape(a, b, "maximum");
  Matrix out = a.value().cwiseMax(b.value());
  return make(std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& x = *self.inputs[0];
    Node& y = *self.inputs[1];
    const auto first = (x.value.array() >= y.value.array()).cast<double>().matrix();
    if (x.requires_grad) x.accumulate(self.grad.cwiseProduct(first));
    if (y.requires_grad) {
      y.accumulate(self.grad.cwiseProduct((Matrix::Ones(first.rows(), first.cols()) - first)));
    }
  });
}

Var add_row(const Var& a, const Var& row) {
  check(row.rows() == 1 && row.cols() == a.cols(), "add_row: row shape");
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return make(std::move(out), {a.node(), row.node()}, [](Node& self) {
    push(*self.inputs[0], self.grad);
    push(*self.inputs[1], self.grad.colwise().sum());
  });
}

// ---- elementwise unary ----

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a.node()}, [s](Node& self) { push(*self.inputs[0], self.grad * s); });
}

Var add_scalar(const Var& a, double s) {
  Matrix out = a.value().array() + s;
  return make(std::move(out), {a.node()}, [](Node& self) { push(*self.inputs[0], self.grad); });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var relu(const Var& a) {
  Matrix out = a.value().cwiseMax(0.0);
  return make(std::move(out), {a.node()}, [](Node& self) {
    const auto active = (self.inputs[0]->value.array() > 0.0).cast<double>().matrix();
    push(*self.inputs[0], self.grad.cwiseProduct(active));
  });
}

Var sigmoid(const Var& a) {
  Matrix out = a.value().unaryExpr([](double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  });
  return make(std::move(out), {a.node()}, [](Node& self) {
    const Matrix& y = self.value;
    push(*self.inputs[0],
         self.grad.cwiseProduct(y.cwiseProduct((Matrix::Ones(y.rows(), y.cols()) - y))));
  });
}

Var exp(const Var& a) {
  Matrix out = a.value().array().exp();
  return make(std::move(out), {a.node()}, [](Node& self) {
    push(*self.inputs[0], self.grad.cwiseProduct(self.value));
  });
}

Var log(const Var& a) {
  Matrix out = a.value().array().log();
  return make(std::move(out), {a.node()}, [](Node& self) {
    push(*self.inputs[0], self.grad.cwiseQuotient(self.inputs[0]->value));
  });
}

Var abs(const Var& a) {
  Matrix out = a.value().cwiseAbs();
  return make(std::move(out), {a.node()}, [](Node& self) {
    const Matrix sign = self.inputs[0]->value.unaryExpr(
        [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
    push(*self.inputs[0], self.grad.cwiseProduct(sign));
  });
}

Var pow(const Var& a, double exponent) {
  Matrix out = a.value().array().pow(exponent);
  return make(std::move(out), {a.node()}, [exponent](Node& self) {
    const Matrix d = exponent * self.inputs[0]->value.array().pow(exponent - 1.0);
    push(*self.inputs[0], self.grad.cwiseProduct(d));
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return make(std::move(out), {a.node()}, [lo, hi](Node& self) {
    const auto inside = self.inputs[0]->value.unaryExpr(
        [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
    push(*self.inputs[0], self.grad.cwiseProduct(inside));
  });
}

// ---- reductions ----

Var sum(const Var& a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return make(std::move(out), {a.node()}, [](Node& self) {
    Node& in = *self.inputs[0];
    push(in, Matrix::Constant(in.value.rows(), in.value.cols(), self.grad(0, 0)));
  });
}

Var mean(const Var& a) {
  check(a.value().size() > 0, "mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var row_sum(const Var& a) {
  Matrix out = a.value().rowwise().sum();
  return make(std::move(out), {a.node()}, [](Node& self) {
    Node& in = *self.inputs[0];
    Matrix g(in.value.rows(), in.value.cols());
    g.colwise() = self.grad.col(0);
    push(in, g);
  });
}

Var col_max(const Var& a) {
  check(a.rows() > 0, "col_max: empty input");
  const Matrix& v = a.value();
  Matrix out(1, v.cols());
  std::vector<Index> arg(static_cast<std::size_t>(v.cols()));
  for (Index j = 0; j < v.cols(); ++j) {
    Index best = 0;
    for (Index i = 1; i < v.rows(); ++i) {
      if (v(i, j) > v(best, j)) best = i;
    }
    arg[static_cast<std::size_t>(j)] = best;
    out(0, j) = v(best, j);
  }
  return make(std::move(out), {a.node()}, [arg = std::move(arg)](Node& self) {
    Node& in = *self.inputs[0];
    Matrix g = Matrix::Zero(in.value.rows(), in.value.cols());
    for (Index j = 0; j < g.cols(); ++j) g(arg[static_cast<std::size_t>(j)], j) = self.grad(0, j);
    push(in, g);
  });
}

Var col_mean(const Var& a) {
  check(a.rows() > 0, "col_mean: empty input");
  Matrix out = a.value().colwise().mean();
  return make(std::move(out), {a.node()}, [](Node& self) {
    Node& in = *self.inputs[0];
    Matrix g(in.value.rows(), in.value.cols());
    g.rowwise() = self.grad.row(0) / static_cast<double>(in.value.rows());
    push(in, g);
  });
}

// ---- structure ----

Var slice_rows(const Var& a, Index start, Index count) {
  check(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows: out of range");
  Matrix out = a.value().middleRows(start, count);
  return make(std::move(out), {a.node()}, [start, count](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Matrix g = Matrix::Zero(in.value.rows(), in.value.cols());
    g.middleRows(start, count) = self.grad;
    in.accumulate(g);
  });
}

Var slice_cols(const Var& a, Index start, Index count) {
  check(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: out of range");
  Matrix out = a.value().middleCols(start, count);
  return make(std::move(out), {a.node()}, [start, count](Node& self) {
    Node& in = *self.inputs[0];
    if (!in.requires_grad) return;
    Matrix g = Matrix::Zero(in.value.rows(), in.value.cols());
    g.middleCols(start, count) = self.grad;
    in.accumulate(g);
  });
}

Var select_rows(const Var& a, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    check(rows[i] >= 0 && rows[i] < a.rows(), "select_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  std::vector<Index> idx(rows.begin(), rows.end());
  return make(std::move(out), {a.node()}, [idx = std::move(idx)](Node& self) {
    Node& in = *self.inputs[0];
    Matrix g = Matrix::Zero(in.value.rows(), in.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Index>(i));
    push(in, g);
  });
}

Var select_cols(const Var& a, std::span<const Index> cols) {
  Matrix out(a.rows(), static_cast<Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) {
    check(cols[j] >= 0 && cols[j] < a.cols(), "select_cols: index out of range");
    out.col(static_cast<Index>(j)) = a.value().col(cols[j]);
  }
  std::vector<Index> idx(cols.begin(), cols.end());
  return make(std::move(out), {a.node()}, [idx = std::move(idx)](Node& self) {
    Node& in = *self.inputs[0];
    Matrix g = Matrix::Zero(in.value.rows(), in.value.cols());
    for (std::size_t j = 0; j < idx.size(); ++j) g.col(idx[j]) += self.grad.col(static_cast<Index>(j));
    push(in, g);
  });
}

Var concat_rows(std::span<const Var> parts) {
  check(!parts.empty(), "concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  std::vector<NodePtr> inputs;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    check(p.cols() == cols, "concat_rows: column counts differ");
    offsets.push_back(rows);
    rows += p.rows();
    inputs.push_back(p.node());
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    out.middleRows(offsets[i], parts[i].rows()) = parts[i].value();
  }
  return make(std::move(out), std::move(inputs), [offsets = std::move(offsets)](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      Node& in = *self.inputs[i];
      if (in.requires_grad) in.accumulate(self.grad.middleRows(offsets[i], in.value.rows()));
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  check(!parts.empty(), "concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts.front().rows();
  std::vector<NodePtr> inputs;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    check(p.rows() == rows, "concat_cols: row counts differ");
    offsets.push_back(cols);
    cols += p.cols();
    inputs.push_back(p.node());
  }
  Matrix out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    out.middleCols(offsets[i], parts[i].cols()) = parts[i].value();
  }
  return make(std::move(out), std::move(inputs), [offsets = std::move(offsets)](Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      Node& in = *self.inputs[i];
      if (in.requires_grad) in.accumulate(self.grad.middleCols(offsets[i], in.value.cols()));
    }
  });
}

Var gather(const Var& a, std::vector<Index> index, Index rows, Index cols) {
  check(static_cast<Index>(index.size()) == rows * cols, "gather: index size != rows*cols");
  const Index n = a.value().size();
  Matrix out(rows, cols);
  const double* src = a.value().data();
  double* dst = out.data();
  for (std::size_t k = 0; k < index.size(); ++k) {
    check(index[k] < n, "gather: index out of range");
    dst[k] = index[k] >= 0 ? src[index[k]] : 0.0;
  }
  return make(std::move(out), {a.node()}, [index = std::move(index)](Node& self) {
    Node& in = *self.inputs[0];
    Matrix g = Matrix::Zero(in.value.rows(), in.value.cols());
    double* gd = g.data();
    const double* sd = self.grad.data();
    for (std::size_t k = 0; k < index.size(); ++k) {
      if (index[k] >= 0) gd[index[k]] += sd[k];
    }
    push(in, g);
  });
}

Var pick_per_row(const Var& a, std::span<const Index> cols) {
  check(static_cast<Index>(cols.size()) == a.rows(), "pick_per_row: one column per row required");
  Matrix out(a.rows(), 1);
  for (Index i = 0; i < a.rows(); ++i) {
    const Index c = cols[static_cast<std::size_t>(i)];
    check(c >= 0 && c < a.cols(), "pick_per_row: column out of range");
    out(i, 0) = a.value()(i, c);
  }
  std::vector<Index> idx(cols.begin(), cols.end());
  return make(std::move(out), {a.node()}, [idx = std::move(idx)](Node& self) {
    Node& in = *self.inputs[0];
    Matrix g = Matrix::Zero(in.value.rows(), in.value.cols());
    for (Index i = 0; i < g.rows(); ++i) g(i, idx[static_cast<std::size_t>(i)]) = self.grad(i, 0);
    push(in, g);
  });
}

// ---- fused normalizations ----

Var softmax_rows(const Var& a, const BoolMatrix& allowed) {
  const Matrix& v = a.value();
  const bool masked = allowed.size() != 0;
  if (masked) check(allowed.rows() == v.rows() && allowed.cols() == v.cols(), "softmax_rows: mask shape");
  Matrix out = Matrix::Zero(v.rows(), v.cols());
  for (Index i = 0; i < v.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < v.cols(); ++j) {
      if (!masked || allowed(i, j)) mx = std::max(mx, v(i, j));
    }
    if (!std::isfinite(mx)) continue;
    double total = 0.0;
    for (Index j = 0; j < v.cols(); ++j) {
      if (!masked || allowed(i, j)) {
        out(i, j) = std::exp(v(i, j) - mx);
        total += out(i, j);
      }
    }
    out.row(i) /= total;
  }
  return make(std::move(out), {a.node()}, [](Node& self) {
    const Matrix& y = self.value;
    const Eigen::VectorXd dot = self.grad.cwiseProduct(y).rowwise().sum();
    Matrix g = self.grad;
    g.colwise() -= dot;
    push(*self.inputs[0], y.cwiseProduct(g));
  });
}

Var log_softmax_rows(const Var& a) {
  const Matrix& v = a.value();
  Matrix out(v.rows(), v.cols());
  for (Index i = 0; i < v.rows(); ++i) {
    const double mx = v.row(i).maxCoeff();
    const double lse = mx + std::log((v.row(i).array() - mx).exp().sum());
    out.row(i) = v.row(i).array() - lse;
  }
  return make(std::move(out), {a.node()}, [](Node& self) {
    const Matrix prob = self.value.array().exp();
    const Eigen::VectorXd total = self.grad.rowwise().sum();
    Matrix g = self.grad;
    for (Index i = 0; i < g.rows(); ++i) g.row(i) -= prob.row(i) * total(i);
    push(*self.inputs[0], g);
  });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  check(gamma.rows() == 1 && gamma.cols() == x.cols(), "layer_norm: gamma shape");
  check(beta.rows() == 1 && beta.cols() == x.cols(), "layer_norm: beta shape");
  const Matrix& v = x.value();
  const Index d = v.cols();
  Matrix xhat(v.rows(), d);
  Eigen::VectorXd rstd(v.rows());
  for (Index i = 0; i < v.rows(); ++i) {
    const double mu = v.row(i).mean();
    const double var = (v.row(i).array() - mu).square().mean();
    rstd(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (v.row(i).array() - mu) * rstd(i);
  }
  Matrix out = xhat;
  for (Index i = 0; i < v.rows(); ++i) {
    out.row(i) = xhat.row(i).cwiseProduct(gamma.value().row(0)) + beta.value().row(0);
  }
  return make(std::move(out), {x.node(), gamma.node(), beta.node()},
              [xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                Node& in = *self.inputs[0];
                Node& g = *self.inputs[1];
                Node& b = *self.inputs[2];
                const Matrix& dy = self.grad;
                if (g.requires_grad) g.accumulate(dy.cwiseProduct(xhat).colwise().sum());
                if (b.requires_grad) b.accumulate(dy.colwise().sum());
                if (in.requires_grad) {
                  const double dn = static_cast<double>(xhat.cols());
                  Matrix dx(xhat.rows(), xhat.cols());
                  for (Index i = 0; i < xhat.rows(); ++i) {
                    const Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(g.value.row(0));
                    const double m1 = dxhat.sum() / dn;
                    const double m2 = dxhat.dot(xhat.row(i)) / dn;
                    dx.row(i) = rstd(i) * (dxhat.array() - m1 - xhat.row(i).array() * m2);
                  }
                  in.accumulate(dx);
                }
              });
}

Var l2_normalize_rows(const Var& x, double eps) {
  const Matrix& v = x.value();
  Eigen::VectorXd norms = v.rowwise().norm();
  for (Index i = 0; i < norms.size(); ++i) norms(i) = std::max(norms(i), eps);
  Matrix out = v;
  for (Index i = 0; i < v.rows(); ++i) out.row(i) /= norms(i);
  return make(std::move(out), {x.node()}, [norms = std::move(norms)](Node& self) {
    const Matrix& y = self.value;
    Matrix g(y.rows(), y.cols());
    for (Index i = 0; i < y.rows(); ++i) {
      const double d = self.grad.row(i).dot(y.row(i));
      g.row(i) = (self.grad.row(i) - y.row(i) * d) / norms(i);
    }
    push(*self.inputs[0], g);
  });
}

}  // namespace dphoi::ag
