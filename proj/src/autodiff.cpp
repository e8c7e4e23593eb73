#include "structret/autodiff.hpp"

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>

namespace structret::ad {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var Tape::push(Matrix value, std::function<void(Tape&)> backward) {
  nodes_.push_back(Node{std::move(value), Matrix(), record_ ? std::move(backward) : nullptr});
  return Var{nodes_.size() - 1};
}

Matrix& Tape::grad(Var v) {
  Node& n = nodes_[v.id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward() {
  if (!record_) throw std::logic_error("backward on a non-recording tape");
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.grad.size() != 0) n.backward(*this);
  }
}

Var Tape::constant(Matrix value) { return push(std::move(value)); }

Var Tape::embed(const Matrix& table, Matrix* table_grad, const std::vector<std::int32_t>& ids) {
  Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || ids[r] >= table.rows()) throw std::out_of_range("embed: token id out of range");
    out.row(static_cast<Eigen::Index>(r)) = table.row(ids[r]);
  }
  const std::size_t self = nodes_.size();
  return push(std::move(out), [self, ids, table_grad](Tape& t) {
    if (table_grad == nullptr) return;
    const Matrix& g = t.nodes_[self].grad;
    for (std::size_t r = 0; r < ids.size(); ++r) table_grad->row(ids[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

Var Tape::add(Var a, Var b) {
  check_same_shape(value(a), value(b), "add");
  const std::size_t self = nodes_.size();
  return push(value(a) + value(b), [self, a, b](Tape& t) {
    const Matrix g = t.nodes_[self].grad;
    t.grad(a) += g;
    t.grad(b) += g;
  });
}

Var Tape::add_constant(Var a, const Matrix& c) {
  check_same_shape(value(a), c, "add_constant");
  const std::size_t self = nodes_.size();
  return push(value(a) + c, [self, a](Tape& t) { t.grad(a) += t.nodes_[self].grad; });
}

Var Tape::linear(Var x, const Matrix& w, Matrix* w_grad) {
  if (value(x).cols() != w.rows()) throw std::invalid_argument("linear: shape mismatch");
  const std::size_t self = nodes_.size();
  return push(value(x) * w, [self, x, &w, w_grad](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    if (w_grad != nullptr) w_grad->noalias() += t.value(x).transpose() * g;
    t.grad(x).noalias() += g * w.transpose();
  });
}

Var Tape::rms_norm(Var x, const Matrix& gain, Matrix* gain_grad, double eps) {
  const Matrix& xv = value(x);
  const auto d = xv.cols();
  Eigen::VectorXd inv(xv.rows());
  Matrix out(xv.rows(), d);
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    inv[r] = 1.0 / std::sqrt(xv.row(r).squaredNorm() / static_cast<double>(d) + eps);
    out.row(r) = (xv.row(r) * inv[r]).cwiseProduct(gain.row(0));
  }
  const std::size_t self = nodes_.size();
  return push(std::move(out), [self, x, &gain, gain_grad, inv, d](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& xv = t.value(x);
    Matrix& gx = t.grad(x);
    for (Eigen::Index r = 0; r < xv.rows(); ++r) {
      const double s = inv[r];
      const auto gy = g.row(r).cwiseProduct(gain.row(0));
      if (gain_grad != nullptr) gain_grad->row(0) += (xv.row(r) * s).cwiseProduct(g.row(r));
      const double dot = xv.row(r).dot(gy);
      gx.row(r) += s * gy - (s * s * s / static_cast<double>(d)) * dot * xv.row(r);
    }
  });
}

Var Tape::gelu(Var x) {
  const Matrix& xv = value(x);
  Matrix out = xv.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
  });
  const std::size_t self = nodes_.size();
  return push(std::move(out), [self, x](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix deriv = t.value(x).unaryExpr([](double v) {
      const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
      return 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
    });
    t.grad(x) += g.cwiseProduct(deriv);
  });
}

Var Tape::attention(Var q, Var k, Var v, int n_heads, bool causal) {
  const Matrix& qv = value(q);
  const Matrix& kv = value(k);
  const Matrix& vv = value(v);
  const auto d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() || d % n_heads != 0) {
    throw std::invalid_argument("attention: shape mismatch");
  }
  const auto n = qv.rows();
  const auto m = kv.rows();
  const auto dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(n_heads));
  Matrix out(n, d);
  for (int h = 0; h < n_heads; ++h) {
    Matrix s = (qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose()) * scale;
    for (Eigen::Index i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < m; ++j) {
        if (causal && j > i) {
          s(i, j) = -std::numeric_limits<double>::infinity();
        } else {
          mx = std::max(mx, s(i, j));
        }
      }
      double sum = 0.0;
      for (Eigen::Index j = 0; j < m; ++j) {
        s(i, j) = (causal && j > i) ? 0.0 : std::exp(s(i, j) - mx);
        sum += s(i, j);
      }
      s.row(i) /= sum;
    }
    out.middleCols(h * dh, dh).noalias() = s * vv.middleCols(h * dh, dh);
    (*probs)[static_cast<std::size_t>(h)] = std::move(s);
  }
  const std::size_t self = nodes_.size();
  return push(std::move(out), [self, q, k, v, n_heads, dh, scale, probs](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& qv = t.value(q);
    const Matrix& kv = t.value(k);
    const Matrix& vv = t.value(v);
    Matrix gq = Matrix::Zero(qv.rows(), qv.cols());
    Matrix gk = Matrix::Zero(kv.rows(), kv.cols());
    Matrix gv = Matrix::Zero(vv.rows(), vv.cols());
    for (int h = 0; h < n_heads; ++h) {
      const Matrix& p = (*probs)[static_cast<std::size_t>(h)];
      const auto go = g.middleCols(h * dh, dh);
      gv.middleCols(h * dh, dh).noalias() += p.transpose() * go;
      Matrix gp = go * vv.middleCols(h * dh, dh).transpose();
      const Eigen::VectorXd rowdot = gp.cwiseProduct(p).rowwise().sum();
      Matrix gs = p.cwiseProduct(gp.colwise() - rowdot) * scale;
      gq.middleCols(h * dh, dh).noalias() += gs * kv.middleCols(h * dh, dh);
      gk.middleCols(h * dh, dh).noalias() += gs.transpose() * qv.middleCols(h * dh, dh);
    }
    t.grad(q) += gq;
    t.grad(k) += gk;
    t.grad(v) += gv;
  });
}

Var Tape::tied_log_softmax(Var h, const Matrix& table, Matrix* table_grad, double scale) {
  Matrix logits = (value(h) * table.transpose()) * scale;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    logits.row(r).array() -= lse;
  }
  const std::size_t self = nodes_.size();
  return push(std::move(logits), [self, h, &table, table_grad, scale](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    const Matrix& logp = t.nodes_[self].value;
    const Eigen::VectorXd gsum = g.rowwise().sum();
    Matrix glogits = g - (logp.array().exp().matrix().array().colwise() * gsum.array()).matrix();
    glogits *= scale;
    if (table_grad != nullptr) table_grad->noalias() += glogits.transpose() * t.value(h);
    t.grad(h).noalias() += glogits * table;
  });
}

Var Tape::pick(Var logp, const std::vector<std::int32_t>& targets) {
  const Matrix& lp = value(logp);
  if (static_cast<Eigen::Index>(targets.size()) != lp.rows()) throw std::invalid_argument("pick: length mismatch");
  Matrix out(lp.rows(), 1);
  for (Eigen::Index r = 0; r < lp.rows(); ++r) {
    const auto c = targets[static_cast<std::size_t>(r)];
    if (c < 0 || c >= lp.cols()) throw std::out_of_range("pick: target out of range");
    out(r, 0) = lp(r, c);
  }
  const std::size_t self = nodes_.size();
  return push(std::move(out), [self, logp, targets](Tape& t) {
    const Matrix& g = t.nodes_[self].grad;
    Matrix& gl = t.grad(logp);
    for (std::size_t r = 0; r < targets.size(); ++r) gl(static_cast<Eigen::Index>(r), targets[r]) += g(static_cast<Eigen::Index>(r), 0);
  });
}

Var Tape::row(Var x, std::size_t r) {
  const auto ri = static_cast<Eigen::Index>(r);
  if (ri >= value(x).rows()) throw std::out_of_range("row: index out of range");
  const std::size_t self = nodes_.size();
  return push(value(x).row(ri), [self, x, ri](Tape& t) { t.grad(x).row(ri) += t.nodes_[self].grad.row(0); });
}

}  // namespace structret::ad
