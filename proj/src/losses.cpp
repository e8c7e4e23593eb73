#include "structret/losses.hpp"

#include <cmath>
#include <limits>

#include "structret/common.hpp"

namespace structret {

double softmax_cross_entropy(std::span<const double> scores, std::size_t positive, std::span<double> grad) {
  if (positive >= scores.size()) throw ValidationError("positive index out of range");
  if (!grad.empty() && grad.size() != scores.size()) throw ValidationError("gradient buffer size mismatch");
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : scores) mx = std::max(mx, s);
  if (!std::isfinite(scores[positive]) || std::isnan(mx) || mx == std::numeric_limits<double>::infinity()) {
    throw NumericError("non-finite score in contrastive loss");
  }
  double sum = 0.0;
  for (double s : scores) sum += std::exp(s - mx);
  const double lse = mx + std::log(sum);
  if (!grad.empty()) {
    for (std::size_t j = 0; j < scores.size(); ++j) grad[j] = std::exp(scores[j] - lse);
    grad[positive] -= 1.0;
  }
  return lse - scores[positive];
}

ContrastiveLoss loss_sda(const Matrix& passages, const Matrix& docs) {
  if (passages.rows() != docs.rows()) {
    throw ValidationError("loss_sda: " + std::to_string(passages.rows()) + " passages vs " +
                          std::to_string(docs.rows()) + " documents");
  }
  if (passages.rows() == 0) throw ValidationError("loss_sda: empty batch");
  if (passages.cols() != docs.cols()) throw ValidationError("loss_sda: embedding width mismatch");
  const auto b = passages.rows();
  const Matrix scores = passages * docs.transpose();
  Matrix dscores(b, b);
  ContrastiveLoss out;
  std::vector<double> row(static_cast<std::size_t>(b));
  std::vector<double> grow(static_cast<std::size_t>(b));
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < b; ++j) row[static_cast<std::size_t>(j)] = scores(i, j);
    out.value += softmax_cross_entropy(row, static_cast<std::size_t>(i), grow);
    for (Eigen::Index j = 0; j < b; ++j) dscores(i, j) = grow[static_cast<std::size_t>(j)];
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  out.value *= inv_b;
  dscores *= inv_b;
  out.grad_queries = dscores * docs;
  out.grad_docs = dscores.transpose() * passages;
  return out;
}

DenseRetrievalLoss loss_dr(const Matrix& queries, const Matrix& positives, const std::vector<Matrix>& hard,
                           NegativePool pool) {
  const auto b = queries.rows();
  if (positives.rows() != b || static_cast<Eigen::Index>(hard.size()) != b) {
    throw ValidationError("loss_dr: batch size mismatch");
  }
  if (b == 0) throw ValidationError("loss_dr: empty batch");
  const auto d = queries.cols();

  // Candidate matrix: positives first, then every hard negative in query order.
  std::vector<Eigen::Index> hard_offset(static_cast<std::size_t>(b));
  Eigen::Index n_hard = 0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto& h = hard[static_cast<std::size_t>(i)];
    if (h.rows() > 0 && h.cols() != d) throw ValidationError("loss_dr: hard negative width mismatch");
    hard_offset[static_cast<std::size_t>(i)] = b + n_hard;
    n_hard += h.rows();
  }
  Matrix candidates(b + n_hard, d);
  candidates.topRows(b) = positives;
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto& h = hard[static_cast<std::size_t>(i)];
    if (h.rows() > 0) candidates.middleRows(hard_offset[static_cast<std::size_t>(i)], h.rows()) = h;
  }
  const Matrix scores = queries * candidates.transpose();
  Matrix dscores = Matrix::Zero(b, candidates.rows());

  DenseRetrievalLoss out;
  const double inv_b = 1.0 / static_cast<double>(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    // Columns of `scores` participating for this query; the positive goes first.
    std::vector<Eigen::Index> cols{i};
    if (pool == NegativePool::inbatch_and_hard) {
      for (Eigen::Index j = 0; j < candidates.rows(); ++j) {
        if (j != i) cols.push_back(j);
      }
    } else {
      const auto off = hard_offset[static_cast<std::size_t>(i)];
      for (Eigen::Index j = 0; j < hard[static_cast<std::size_t>(i)].rows(); ++j) cols.push_back(off + j);
    }
    if (cols.size() < 2) throw ValidationError("loss_dr: query " + std::to_string(i) + " has no negatives");
    std::vector<double> s(cols.size());
    std::vector<double> g(cols.size());
    for (std::size_t c = 0; c < cols.size(); ++c) s[c] = scores(i, cols[c]);
    out.value += softmax_cross_entropy(s, 0, g) * inv_b;
    for (std::size_t c = 0; c < cols.size(); ++c) dscores(i, cols[c]) += g[c] * inv_b;
  }
  out.grad_queries = dscores * candidates;
  const Matrix gcand = dscores.transpose() * queries;
  out.grad_positives = gcand.topRows(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto rows = hard[static_cast<std::size_t>(i)].rows();
    out.grad_hard.push_back(rows > 0 ? Matrix(gcand.middleRows(hard_offset[static_cast<std::size_t>(i)], rows))
                                     : Matrix(0, d));
  }
  return out;
}

MepLoss loss_mep(const std::vector<std::vector<double>>& target_logprobs) {
  MepLoss out;
  for (const auto& item : target_logprobs) {
    if (item.empty()) continue;
    ++out.item_count;
    for (double lp : item) {
      out.sum -= lp;
      ++out.token_count;
    }
  }
  if (out.item_count == 0) {
    throw ValidationError("masked entity prediction batch has no targets; exclude zero-entity documents");
  }
  out.batch_mean = out.sum / static_cast<double>(out.item_count);
  out.per_token_mean = out.sum / static_cast<double>(out.token_count);
  return out;
}

}  // namespace structret
