#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major double matrices.
// A graph is built per forward pass; parameters are persistent leaves that accumulate gradients.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace triphase::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Matrix& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double scalar() const { return node_->value(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }
  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// A trainable tensor. Copies are deep: copying a model snapshots its weights.
class Parameter {
 public:
  Parameter() : node_(std::make_shared<Node>()) {}
  explicit Parameter(Matrix init);
  Parameter(const Parameter& other);
  Parameter& operator=(const Parameter& other);
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  Var var() const { return Var(node_); }
  Matrix& value() { return node_->value; }
  const Matrix& value() const { return node_->value; }
  /// Gradient accumulated since the last zero_grad (zeros if nothing flowed in).
  const Matrix& grad() const;
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }

  bool trainable() const { return node_->requires_grad; }
  void set_trainable(bool on) { node_->requires_grad = on; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Matrix value);

/// While alive on this thread, operations record no backward graph (evaluation mode).
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

/// Back-propagates d(root)/d(.) scaled by `seed` into every reachable node that requires grad.
/// `root` must be 1x1.
void backward(const Var& root, double seed = 1.0);

// ---------------------------------------------------------------------------
// Operations

Var matmul(const Var& a, const Var& b);
/// x * W + b, with b a 1 x out row broadcast over the rows of x.
Var linear(const Var& x, const Var& weight, const Var& bias);
Var add(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
/// Exact (erf-based) GELU.
Var gelu(const Var& a);
Var tanh(const Var& a);
/// Row-wise layer normalization with learned gain and bias (both 1 x cols).
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// Gathers rows of `table`.
Var embedding(const Var& table, std::span<const int> ids);
/// Multi-head scaled dot-product attention. `key_mask[j] == false` excludes key j.
/// `causal` additionally restricts query i to keys j <= i.
Var attention(const Var& q, const Var& k, const Var& v, int n_heads, const std::vector<bool>& key_mask,
              bool causal);
/// Mean of the rows selected by `mask`, as a 1 x cols row.
Var masked_mean_rows(const Var& x, const std::vector<bool>& mask);
/// Sum over rows of -log softmax(logits)[row, target[row]], as 1x1.
Var cross_entropy_sum(const Var& logits, std::span<const int> targets);
/// Cosine similarity of two 1 x d rows, as 1x1. Throws on zero vectors.
Var cosine(const Var& u, const Var& v);
/// (target - x)^2 for 1x1 x.
Var squared_error(const Var& x, double target);

}  // namespace triphase::ag
