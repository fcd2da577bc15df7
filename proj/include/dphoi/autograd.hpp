#pragma once

// Minimal reverse-mode automatic differentiation over dense float64 matrices.
//
// Every value is a 2-D row-major matrix. Operations build a graph of Nodes on
// the fly; backward() walks it in reverse topological order. Parameters are
// leaf Vars with requires_grad set, owned by a ParamStore and reused across
// graphs.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace dphoi {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

}  // namespace dphoi

namespace dphoi::ag {

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

using NodePtr = std::shared_ptr<Node>;

class Var {
 public:
  Var() = default;
  explicit Var(Matrix value, bool requires_grad = false);
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var scalar(double v);

  [[nodiscard]] bool defined() const { return node_ != nullptr; }
  [[nodiscard]] const Matrix& value() const { return node_->value; }
  // Direct mutation is reserved for optimizers and checkpoint loading.
  [[nodiscard]] Matrix& mutable_value() { return node_->value; }
  // Gradient accumulated by backward(); zeros when nothing flowed.
  [[nodiscard]] Matrix grad() const;
  void zero_grad() { node_->grad.resize(0, 0); }

  [[nodiscard]] Index rows() const { return node_->value.rows(); }
  [[nodiscard]] Index cols() const { return node_->value.cols(); }
  [[nodiscard]] double item() const;
  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
  [[nodiscard]] const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Seeds d(root)/d(root) = 1 and propagates. root must be 1x1.
void backward(const Var& root);

// While alive, new operations record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

Var constant(Matrix value);
// Same value, cut from the graph.
Var detach(const Var& a);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
// x [n x in] * weight [in x out] + bias [1 x out]
Var linear(const Var& x, const Var& weight, const Var& bias);

// ---- elementwise binary (identical shapes) ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var minimum(const Var& a, const Var& b);
Var maximum(const Var& a, const Var& b);
// a [r x c] + row [1 x c] broadcast over rows
Var add_row(const Var& a, const Var& row);

// ---- elementwise unary ----
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var abs(const Var& a);
Var pow(const Var& a, double exponent);  // requires a > 0 where exponent is non-integer
Var clamp(const Var& a, double lo, double hi);

// ---- reductions ----
Var sum(const Var& a);   // 1x1
Var mean(const Var& a);  // 1x1
Var row_sum(const Var& a);  // r x 1
Var col_max(const Var& a);  // 1 x c, gradient routed to the first arg-max
Var col_mean(const Var& a);  // 1 x c

// ---- structure ----
Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
Var select_rows(const Var& a, std::span<const Index> rows);
Var select_cols(const Var& a, std::span<const Index> cols);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
// out.flat[k] = a.flat[index[k]], or 0 when index[k] < 0.
Var gather(const Var& a, std::vector<Index> index, Index rows, Index cols);
// out[i] = a[i, cols[i]], shape r x 1.
Var pick_per_row(const Var& a, std::span<const Index> cols);

// ---- fused normalizations ----
// Row-wise softmax. When `allowed` is non-empty, disallowed entries get weight
// exactly zero. A row with no allowed entry yields all zeros.
Var softmax_rows(const Var& a, const BoolMatrix& allowed = BoolMatrix());
Var log_softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_rows(const Var& x, double eps = 1e-12);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace dphoi::ag
