#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace structret::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Var {
  std::size_t id = 0;
};

// Reverse-mode tape over dense row-major matrices. Parameters are not tape
// nodes: ops that read a parameter take its value and an optional gradient
// accumulator, which backward() adds into.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  Var constant(Matrix value);
  // Rows of `table` selected by ids.
  Var embed(const Matrix& table, Matrix* table_grad, const std::vector<std::int32_t>& ids);
  Var add(Var a, Var b);
  Var add_constant(Var a, const Matrix& c);
  // x * w
  Var linear(Var x, const Matrix& w, Matrix* w_grad);
  // Row-wise RMS normalization with a learned 1 x d gain.
  Var rms_norm(Var x, const Matrix& gain, Matrix* gain_grad, double eps = 1e-6);
  // tanh-approximated GELU.
  Var gelu(Var x);
  // Multi-head scaled dot-product attention; causal masks keys after the query position.
  Var attention(Var q, Var k, Var v, int n_heads, bool causal);
  // scale * h * table^T followed by a row-wise log-softmax.
  Var tied_log_softmax(Var h, const Matrix& table, Matrix* table_grad, double scale);
  // Column vector of logp[r, targets[r]].
  Var pick(Var logp, const std::vector<std::int32_t>& targets);
  Var row(Var x, std::size_t r);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  // Gradient buffer of a node, zero-allocated on first access.
  Matrix& grad(Var v);
  bool recording() const { return record_; }

  // Propagates seeded gradients to inputs and parameter accumulators.
  void backward();

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void(Tape&)> backward;
  };

  Var push(Matrix value, std::function<void(Tape&)> backward = {});

  bool record_;
  std::vector<Node> nodes_;
};

}  // namespace structret::ad
