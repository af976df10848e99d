#include "triphase/autograd.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace triphase::ag {

Matrix& Node::grad_buffer() {
  if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
  return grad;
}

Parameter::Parameter(Matrix init) : node_(std::make_shared<Node>()) {
  node_->value = std::move(init);
  node_->requires_grad = true;
}

Parameter::Parameter(const Parameter& other) : node_(std::make_shared<Node>()) {
  node_->value = other.node_->value;
  node_->requires_grad = other.node_->requires_grad;
}

Parameter& Parameter::operator=(const Parameter& other) {
  if (this != &other) {
    node_ = std::make_shared<Node>();
    node_->value = other.node_->value;
    node_->requires_grad = other.node_->requires_grad;
  }
  return *this;
}

const Matrix& Parameter::grad() const { return node_->grad_buffer(); }

Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

namespace {

using NodePtr = std::shared_ptr<Node>;

// Creates a result node. Only nodes with at least one grad-requiring input keep their inputs.
Var make_result(Matrix value, std::vector<NodePtr> inputs, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (g_grad_enabled) {
    for (const auto& in : inputs) n->requires_grad = n->requires_grad || in->requires_grad;
  }
  if (n->requires_grad) {
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(fn);
  }
  return Var(std::move(n));
}

void check(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

void backward(const Var& root, double seed) {
  check(root.rows() == 1 && root.cols() == 1, "backward root must be a scalar");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
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

  root.node()->grad_buffer()(0, 0) += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
}

Var matmul(const Var& a, const Var& b) {
  check(a.cols() == b.rows(), "matmul shape mismatch");
  Matrix out = a.value() * b.value();
  return make_result(std::move(out), {a.node(), b.node()}, [](Node& self) {
    auto& A = *self.inputs[0];
    auto& B = *self.inputs[1];
    if (A.requires_grad) A.grad_buffer().noalias() += self.grad * B.value.transpose();
    if (B.requires_grad) B.grad_buffer().noalias() += A.value.transpose() * self.grad;
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  check(x.cols() == weight.rows(), "linear input width mismatch");
  check(bias.rows() == 1 && bias.cols() == weight.cols(), "linear bias shape mismatch");
  Matrix out = x.value() * weight.value();
  out.rowwise() += bias.value().row(0);
  return make_result(std::move(out), {x.node(), weight.node(), bias.node()}, [](Node& self) {
    auto& X = *self.inputs[0];
    auto& W = *self.inputs[1];
    auto& b = *self.inputs[2];
    if (X.requires_grad) X.grad_buffer().noalias() += self.grad * W.value.transpose();
    if (W.requires_grad) W.grad_buffer().noalias() += X.value.transpose() * self.grad;
    if (b.requires_grad) b.grad_buffer() += self.grad.colwise().sum();
  });
}

Var add(const Var& a, const Var& b) {
  check(a.rows() == b.rows() && a.cols() == b.cols(), "add shape mismatch");
  Matrix out = a.value() + b.value();
  return make_result(std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (in->requires_grad) in->grad_buffer() += self.grad;
    }
  });
}

Var scale(const Var& a, double factor) {
  Matrix out = a.value() * factor;
  return make_result(std::move(out), {a.node()}, [factor](Node& self) {
    self.inputs[0]->grad_buffer() += self.grad * factor;
  });
}

Var gelu(const Var& a) {
  const Matrix& x = a.value();
  Matrix out = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2)); });
  return make_result(std::move(out), {a.node()}, [](Node& self) {
    auto& X = *self.inputs[0];
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    Matrix d = X.value.unaryExpr([](double v) {
      return 0.5 * (1.0 + std::erf(v * M_SQRT1_2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
    });
    X.grad_buffer() += self.grad.cwiseProduct(d);
  });
}

Var tanh(const Var& a) {
  Matrix out = a.value().array().tanh().matrix();
  return make_result(std::move(out), {a.node()}, [](Node& self) {
    auto& X = *self.inputs[0];
    X.grad_buffer() += self.grad.cwiseProduct((1.0 - self.value.array().square()).matrix());
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Eigen::Index n = x.rows();
  const Eigen::Index d = x.cols();
  check(gain.cols() == d && bias.cols() == d && gain.rows() == 1 && bias.rows() == 1, "layer_norm shape mismatch");
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.value().row(i).mean();
    const auto centered = x.value().row(i).array() - mu;
    const double var = centered.square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = centered * inv_std(i);
  }
  Matrix out = xhat.array().rowwise() * gain.value().row(0).array();
  out.rowwise() += bias.value().row(0);
  return make_result(std::move(out), {x.node(), gain.node(), bias.node()},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       auto& X = *self.inputs[0];
                       auto& G = *self.inputs[1];
                       auto& B = *self.inputs[2];
                       if (G.requires_grad) G.grad_buffer() += self.grad.cwiseProduct(xhat).colwise().sum();
                       if (B.requires_grad) B.grad_buffer() += self.grad.colwise().sum();
                       if (!X.requires_grad) return;
                       auto& gx = X.grad_buffer();
                       const double d = static_cast<double>(xhat.cols());
                       for (Eigen::Index i = 0; i < xhat.rows(); ++i) {
                         const Eigen::RowVectorXd dxhat = self.grad.row(i).cwiseProduct(G.value.row(0));
                         const double mean_d = dxhat.sum() / d;
                         const double mean_dx = dxhat.dot(xhat.row(i)) / d;
                         gx.row(i).array() +=
                             inv_std(i) * (dxhat.array() - mean_d - xhat.row(i).array() * mean_dx);
                       }
                     });
}

Var embedding(const Var& table, std::span<const int> ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    check(ids[i] >= 0 && ids[i] < table.rows(), "embedding id out of range");
    out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return make_result(std::move(out), {table.node()}, [idx = std::move(idx)](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += self.grad.row(static_cast<Eigen::Index>(i));
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int n_heads, const std::vector<bool>& key_mask,
              bool causal) {
  const Eigen::Index tq = q.rows();
  const Eigen::Index tk = k.rows();
  const Eigen::Index width = q.cols();
  check(k.cols() == width && v.cols() == width && v.rows() == tk, "attention shape mismatch");
  check(n_heads > 0 && width % n_heads == 0, "attention width must be divisible by head count");
  check(static_cast<Eigen::Index>(key_mask.size()) == tk, "attention key mask length mismatch");
  check(!causal || tq == tk, "causal attention needs equal query and key lengths");
  const Eigen::Index hd = width / n_heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<Matrix> probs(static_cast<std::size_t>(n_heads));
  Matrix out(tq, width);
  for (int h = 0; h < n_heads; ++h) {
    const auto qh = q.value().middleCols(h * hd, hd);
    const auto kh = k.value().middleCols(h * hd, hd);
    const auto vh = v.value().middleCols(h * hd, hd);
    Matrix s = (qh * kh.transpose()) * scale_factor;
    Matrix& p = probs[static_cast<std::size_t>(h)];
    p = Matrix::Zero(tq, tk);
    for (Eigen::Index i = 0; i < tq; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < tk; ++j) {
        if (key_mask[static_cast<std::size_t>(j)] && (!causal || j <= i)) mx = std::max(mx, s(i, j));
      }
      check(std::isfinite(mx), "attention row has no visible keys");
      double z = 0.0;
      for (Eigen::Index j = 0; j < tk; ++j) {
        if (key_mask[static_cast<std::size_t>(j)] && (!causal || j <= i)) {
          p(i, j) = std::exp(s(i, j) - mx);
          z += p(i, j);
        }
      }
      p.row(i) /= z;
    }
    out.middleCols(h * hd, hd).noalias() = p * vh;
  }

  return make_result(std::move(out), {q.node(), k.node(), v.node()},
                     [probs = std::move(probs), n_heads, hd, scale_factor](Node& self) {
                       auto& Q = *self.inputs[0];
                       auto& K = *self.inputs[1];
                       auto& V = *self.inputs[2];
                       for (int h = 0; h < n_heads; ++h) {
                         const Matrix& p = probs[static_cast<std::size_t>(h)];
                         const auto go = self.grad.middleCols(h * hd, hd);
                         if (V.requires_grad) V.grad_buffer().middleCols(h * hd, hd).noalias() += p.transpose() * go;
                         if (!Q.requires_grad && !K.requires_grad) continue;
                         const Matrix dp = go * V.value.middleCols(h * hd, hd).transpose();
                         const Eigen::VectorXd row_dot = dp.cwiseProduct(p).rowwise().sum();
                         Matrix ds = p.cwiseProduct(dp.colwise() - row_dot) * scale_factor;
                         if (Q.requires_grad) {
                           Q.grad_buffer().middleCols(h * hd, hd).noalias() += ds * K.value.middleCols(h * hd, hd);
                         }
                         if (K.requires_grad) {
                           K.grad_buffer().middleCols(h * hd, hd).noalias() +=
                               ds.transpose() * Q.value.middleCols(h * hd, hd);
                         }
                       }
                     });
}

Var masked_mean_rows(const Var& x, const std::vector<bool>& mask) {
  check(static_cast<Eigen::Index>(mask.size()) == x.rows(), "pool mask length mismatch");
  Matrix out = Matrix::Zero(1, x.cols());
  std::size_t count = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    out.row(0) += x.value().row(static_cast<Eigen::Index>(i));
    ++count;
  }
  check(count > 0, "cannot pool a sequence without visible positions");
  const double inv = 1.0 / static_cast<double>(count);
  out *= inv;
  return make_result(std::move(out), {x.node()}, [mask, inv](Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) g.row(static_cast<Eigen::Index>(i)) += self.grad.row(0) * inv;
    }
  });
}

Var cross_entropy_sum(const Var& logits, std::span<const int> targets) {
  check(static_cast<Eigen::Index>(targets.size()) == logits.rows(), "cross entropy target count mismatch");
  const Matrix& z = logits.value();
  Matrix soft(z.rows(), z.cols());
  double total = 0.0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    check(t >= 0 && t < z.cols(), "cross entropy target out of range");
    const double mx = z.row(i).maxCoeff();
    soft.row(i) = (z.row(i).array() - mx).exp();
    const double sum = soft.row(i).sum();
    soft.row(i) /= sum;
    total += -(z(i, t) - mx - std::log(sum));
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  std::vector<int> tgt(targets.begin(), targets.end());
  return make_result(std::move(out), {logits.node()}, [soft = std::move(soft), tgt = std::move(tgt)](Node& self) {
    const double g = self.grad(0, 0);
    auto& gz = self.inputs[0]->grad_buffer();
    gz += soft * g;
    for (std::size_t i = 0; i < tgt.size(); ++i) gz(static_cast<Eigen::Index>(i), tgt[i]) -= g;
  });
}

Var cosine(const Var& u, const Var& v) {
  check(u.rows() == 1 && v.rows() == 1 && u.cols() == v.cols(), "cosine needs two rows of equal width");
  const double nu = u.value().norm();
  const double nv = v.value().norm();
  if (nu == 0.0 || nv == 0.0) throw std::domain_error("cosine similarity of a zero vector");
  const double c = u.value().row(0).dot(v.value().row(0)) / (nu * nv);
  Matrix out(1, 1);
  out(0, 0) = c;
  return make_result(std::move(out), {u.node(), v.node()}, [nu, nv, c](Node& self) {
    const double g = self.grad(0, 0);
    auto& U = *self.inputs[0];
    auto& V = *self.inputs[1];
    if (U.requires_grad) U.grad_buffer() += g * (V.value / (nu * nv) - c * U.value / (nu * nu));
    if (V.requires_grad) V.grad_buffer() += g * (U.value / (nu * nv) - c * V.value / (nv * nv));
  });
}

Var squared_error(const Var& x, double target) {
  check(x.rows() == 1 && x.cols() == 1, "squared_error needs a scalar");
  const double r = x.scalar() - target;
  Matrix out(1, 1);
  out(0, 0) = r * r;
  return make_result(std::move(out), {x.node()}, [r](Node& self) {
    self.inputs[0]->grad_buffer()(0, 0) += 2.0 * r * self.grad(0, 0);
  });
}

}  // namespace triphase::ag
