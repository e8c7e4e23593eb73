#pragma once

#include <span>
#include <vector>

#include "structret/model.hpp"

namespace structret {

// -log softmax(scores)[positive]. -inf scores contribute nothing.
// When grad is non-empty it receives d loss / d scores.
double softmax_cross_entropy(std::span<const double> scores, std::size_t positive, std::span<double> grad = {});

struct ContrastiveLoss {
  double value = 0.0;
  Matrix grad_queries;  // d value / d row embeddings, same shape as the inputs
  Matrix grad_docs;
};

// Structured data alignment: mean over i of -log(e^{f(p_i,d_i)} / sum_j e^{f(p_i,d_j)}),
// f the dot product and the other in-batch docs as negatives.
ContrastiveLoss loss_sda(const Matrix& passages, const Matrix& docs);

enum class NegativePool {
  // Other in-batch positives plus every hard negative in the batch.
  inbatch_and_hard,
  // Only the query's own hard negatives.
  hard_only,
};

struct DenseRetrievalLoss {
  double value = 0.0;
  Matrix grad_queries;
  Matrix grad_positives;
  std::vector<Matrix> grad_hard;  // per query, same shape as the hard-negative rows
};

// Finetuning loss: mean over queries of -log(e^{f(q,d+)} / (e^{f(q,d+)} + sum_{d-} e^{f(q,d-)})).
// hard[i] holds query i's hard-negative embeddings as rows (may have zero rows).
DenseRetrievalLoss loss_dr(const Matrix& queries, const Matrix& positives, const std::vector<Matrix>& hard,
                           NegativePool pool = NegativePool::inbatch_and_hard);

struct MepLoss {
  double sum = 0.0;            // sum over items and positions of -log p
  double batch_mean = 0.0;     // sum / number of items
  double per_token_mean = 0.0; // sum / number of target tokens
  std::size_t token_count = 0;
  std::size_t item_count = 0;
};

// Masked entity prediction from per-item teacher-forced log-probabilities.
// Items with no positions are ignored; an all-empty batch is an error.
MepLoss loss_mep(const std::vector<std::vector<double>>& target_logprobs);

}  // namespace structret
