#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "structret/common.hpp"
#include "structret/losses.hpp"

namespace structret {
namespace {

// Direct evaluation of mean_i -log(exp(s_ii) / sum_j exp(s_ij)) with no max shift.
double naive_sda(const Matrix& p, const Matrix& d) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    double denom = 0.0;
    for (Eigen::Index j = 0; j < d.rows(); ++j) denom += std::exp(p.row(i).dot(d.row(j)));
    total += -std::log(std::exp(p.row(i).dot(d.row(i))) / denom);
  }
  return total / static_cast<double>(p.rows());
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, unsigned seed) {
  std::srand(seed);
  return Matrix::Random(r, c);
}

TEST(SoftmaxCrossEntropy, NegativeInfinityContributesNothing) {
  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<double> with{1.0, 0.5, -inf};
  const std::vector<double> without{1.0, 0.5};
  EXPECT_NEAR(softmax_cross_entropy(with, 0), softmax_cross_entropy(without, 0), 1e-15);
  const std::vector<double> pos_inf{1.0, inf};
  EXPECT_THROW(softmax_cross_entropy(pos_inf, 0), NumericError);
}

TEST(LossSda, SingleItemIsZero) {
  const Matrix p = random_matrix(1, 4, 1);
  EXPECT_EQ(loss_sda(p, random_matrix(1, 4, 2)).value, 0.0);
}

TEST(LossSda, IdenticalScoresGiveLogBatch) {
  const Matrix p = Matrix::Zero(5, 3);
  EXPECT_NEAR(loss_sda(p, random_matrix(5, 3, 3)).value, std::log(5.0), 1e-12);
}

TEST(LossSda, HandCaseMatchesNaiveOracle) {
  Matrix p(2, 2), d(2, 2);
  p << 2, 0, 0, 2;
  d << 1, 0, 0, 1;
  EXPECT_NEAR(loss_sda(p, d).value, naive_sda(p, d), 1e-12);
  EXPECT_NEAR(loss_sda(p, d).value, 0.126928, 1e-6);
}

TEST(LossSda, RandomBatchesMatchNaiveOracle) {
  for (unsigned s = 0; s < 20; ++s) {
    const Matrix p = random_matrix(6, 4, 10 + s), d = random_matrix(6, 4, 100 + s);
    EXPECT_NEAR(loss_sda(p, d).value, naive_sda(p, d), 1e-12);
  }
}

TEST(LossSda, PermutationInvariant) {
  const Matrix p = random_matrix(4, 3, 7), d = random_matrix(4, 3, 8);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(4);
  perm.indices() << 2, 0, 3, 1;
  EXPECT_NEAR(loss_sda(perm * p, perm * d).value, loss_sda(p, d).value, 1e-12);
}

TEST(LossSda, DecreasesAsPositiveScoreGrows) {
  Matrix p = random_matrix(3, 3, 9), d = random_matrix(3, 3, 10);
  double prev = loss_sda(p, d).value;
  for (int k = 0; k < 5; ++k) {
    p.row(0) += 0.2 * d.row(0) / d.row(0).squaredNorm();
    const double now = loss_sda(p, d).value;
    EXPECT_LT(now, prev);
    prev = now;
  }
}

TEST(LossSda, MismatchedBatchIsError) {
  EXPECT_THROW(loss_sda(Matrix::Zero(2, 3), Matrix::Zero(3, 3)), ValidationError);
  EXPECT_THROW(loss_sda(Matrix::Zero(0, 3), Matrix::Zero(0, 3)), ValidationError);
}

TEST(LossSda, GradientMatchesFiniteDifferences) {
  const Matrix p = random_matrix(4, 3, 11), d = random_matrix(4, 3, 12);
  const auto out = loss_sda(p, d);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < 4; ++i) {
    for (Eigen::Index j = 0; j < 3; ++j) {
      Matrix pp = p, pm = p, dp = d, dm = d;
      pp(i, j) += h;
      pm(i, j) -= h;
      dp(i, j) += h;
      dm(i, j) -= h;
      EXPECT_NEAR(out.grad_queries(i, j), (naive_sda(pp, d) - naive_sda(pm, d)) / (2 * h), 1e-7);
      EXPECT_NEAR(out.grad_docs(i, j), (naive_sda(p, dp) - naive_sda(p, dm)) / (2 * h), 1e-7);
    }
  }
}

// Pool: own positive, other positives, and every hard negative in the batch.
double naive_dr(const Matrix& q, const Matrix& pos, const std::vector<Matrix>& hard) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    double denom = 0.0;
    for (Eigen::Index j = 0; j < pos.rows(); ++j) denom += std::exp(q.row(i).dot(pos.row(j)));
    for (const auto& h : hard) {
      for (Eigen::Index j = 0; j < h.rows(); ++j) denom += std::exp(q.row(i).dot(h.row(j)));
    }
    total += std::log(denom) - q.row(i).dot(pos.row(i));
  }
  return total / static_cast<double>(q.rows());
}

TEST(LossDr, EqualScoresGiveLogTwo) {
  const Matrix q = Matrix::Zero(2, 3);
  EXPECT_NEAR(loss_dr(q, random_matrix(2, 3, 1), {Matrix(0, 3), Matrix(0, 3)}).value, std::log(2.0), 1e-12);
}

TEST(LossDr, HandCase) {
  Matrix q(1, 2), pos(1, 2), neg(1, 2);
  q << 1, 0;
  pos << 2, 0;
  neg << 0, 5;
  EXPECT_NEAR(loss_dr(q, pos, {neg}).value, std::log(1.0 + std::exp(-2.0)), 1e-12);
  EXPECT_NEAR(loss_dr(q, pos, {neg}, NegativePool::hard_only).value, 0.126928, 1e-6);
}

TEST(LossDr, NoNegativesIsError) {
  EXPECT_THROW(loss_dr(Matrix::Zero(1, 2), Matrix::Zero(1, 2), {Matrix(0, 2)}), ValidationError);
  EXPECT_THROW(loss_dr(Matrix::Zero(2, 2), Matrix::Zero(2, 2), {Matrix(0, 2), Matrix(0, 2)},
                       NegativePool::hard_only),
               ValidationError);
}

TEST(LossDr, DuplicatePositiveAsNegativeIsAtLeastLogTwo) {
  const Matrix q = random_matrix(1, 4, 5), pos = random_matrix(1, 4, 6);
  EXPECT_GE(loss_dr(q, pos, {pos}).value, std::log(2.0) - 1e-12);
}

TEST(LossDr, RandomBatchesMatchNaiveOracle) {
  for (unsigned s = 0; s < 10; ++s) {
    const Matrix q = random_matrix(3, 4, s), pos = random_matrix(3, 4, 50 + s);
    const std::vector<Matrix> hard{random_matrix(2, 4, 90 + s), Matrix(0, 4), random_matrix(1, 4, 130 + s)};
    EXPECT_NEAR(loss_dr(q, pos, hard).value, naive_dr(q, pos, hard), 1e-12);
  }
}

TEST(LossDr, GradientMatchesFiniteDifferences) {
  const Matrix q = random_matrix(2, 3, 21), pos = random_matrix(2, 3, 22);
  const std::vector<Matrix> hard{random_matrix(1, 3, 23), random_matrix(2, 3, 24)};
  const auto out = loss_dr(q, pos, hard);
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < 2; ++i) {
    for (Eigen::Index j = 0; j < 3; ++j) {
      Matrix qp = q, qm = q, pp = pos, pm = pos;
      qp(i, j) += h;
      qm(i, j) -= h;
      pp(i, j) += h;
      pm(i, j) -= h;
      EXPECT_NEAR(out.grad_queries(i, j), (naive_dr(qp, pos, hard) - naive_dr(qm, pos, hard)) / (2 * h), 1e-7);
      EXPECT_NEAR(out.grad_positives(i, j), (naive_dr(q, pp, hard) - naive_dr(q, pm, hard)) / (2 * h), 1e-7);
    }
  }
  auto hp = hard, hm = hard;
  hp[1](1, 2) += h;
  hm[1](1, 2) -= h;
  EXPECT_NEAR(out.grad_hard[1](1, 2), (naive_dr(q, pos, hp) - naive_dr(q, pos, hm)) / (2 * h), 1e-7);
}

TEST(LossMep, Examples) {
  const double v = 130.0;
  const auto uniform = loss_mep({{-std::log(v), -std::log(v)}});
  EXPECT_NEAR(uniform.per_token_mean, std::log(v), 1e-12);
  EXPECT_EQ(loss_mep({{0.0, 0.0}}).sum, 0.0);
  const auto two = loss_mep({{-1.0}, {}, {-0.5, -0.5}});
  EXPECT_EQ(two.item_count, 2u);
  EXPECT_EQ(two.token_count, 3u);
  EXPECT_NEAR(two.sum, 2.0, 1e-15);
  EXPECT_NEAR(two.batch_mean, 1.0, 1e-15);
  EXPECT_THROW(loss_mep({{}, {}}), ValidationError);
}

}  // namespace
}  // namespace structret
