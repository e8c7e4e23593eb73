#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "structret/corpus.hpp"
#include "structret/losses.hpp"
#include "structret/masker.hpp"
#include "structret/model.hpp"

namespace structret {

struct PretrainItem {
  TokenIds passage;
  TokenIds doc;            // unmasked structured document
  TokenIds masked_source;  // X_d^mask
  TokenIds target;         // Y_d ids plus the end token; empty when the doc has no entities
};
using PretrainBatch = std::vector<PretrainItem>;

struct FinetuneItem {
  TokenIds query;
  TokenIds positive;
  std::vector<TokenIds> hard_negatives;
};
using FinetuneBatch = std::vector<FinetuneItem>;

struct ObjectiveOptions {
  bool sda = true;
  bool mep = true;
  // Ablation: align against the masked source instead of the unmasked document.
  bool sda_uses_masked_input = false;
  NegativePool negatives = NegativePool::inbatch_and_hard;
  // Per-item work is split across threads; 1 is the strict single-threaded path.
  std::size_t threads = 1;
};

struct LossReport {
  double l_sda = 0.0;
  double l_mep = 0.0;  // per-item sums averaged over the batch
  double l_total = 0.0;
  double l_dr = 0.0;
  double mep_sum = 0.0;
  double mep_per_token = 0.0;
  std::size_t mep_token_count = 0;
};

// l_total = l_sda + l_mep. Accumulates gradients into `grads` when non-null.
LossReport loss_pretrain(const PretrainBatch& batch, const ModelParams& params, const ObjectiveOptions& options,
                         ModelParams* grads = nullptr);
// l_dr (also reported as l_total).
LossReport loss_finetune(const FinetuneBatch& batch, const ModelParams& params, const ObjectiveOptions& options,
                         ModelParams* grads = nullptr);

struct OptimizerConfig {
  double lr = 1e-3;
  double warmup_proportion = 0.1;
  std::size_t total_steps = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global-norm clipping; <= 0 disables
};

// Adam moments and the step counter.
struct OptimizerState {
  OptimizerConfig config;
  ModelParams first_moment;
  ModelParams second_moment;
  std::size_t step = 0;

  static OptimizerState create(const ModelParams& params, const OptimizerConfig& config);
  // Linear warmup over the first warmup_proportion of steps, then constant.
  // `step_number` is 1-based.
  double learning_rate(std::size_t step_number) const;
};

enum class TrainMode { pretrain, finetune };

LossReport train_step(ModelParams& params, OptimizerState& state, const PretrainBatch& batch,
                      const ObjectiveOptions& options);
LossReport train_step(ModelParams& params, OptimizerState& state, const FinetuneBatch& batch,
                      const ObjectiveOptions& options);

enum class Objective { sda, mep, dr };
std::string to_string(Objective o);

struct GradCheckEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::vector<GradCheckEntry> entries;
};

// Central differences on `sample` scalar parameters chosen uniformly under `seed`.
// relative error = |analytic - numeric| / max(|numeric|, 1e-8).
GradCheckResult grad_check(const ModelParams& params, const PretrainBatch& pretrain, const FinetuneBatch& finetune,
                           Objective objective, double epsilon, std::size_t sample, std::uint64_t seed);
// Same, restricted to explicit flat parameter indices.
GradCheckResult grad_check_indices(const ModelParams& params, const PretrainBatch& pretrain,
                                   const FinetuneBatch& finetune, Objective objective, double epsilon,
                                   const std::vector<std::size_t>& flat_indices);

// Random contiguous spans covering about `rate` of the tokens, each replaced
// by its own sequential sentinel (random-span baseline for ablations).
MaskedExample span_mask_ablation(const Document& doc, double rate, std::uint64_t seed);
MaskedExample span_mask_tokens(const std::string& doc_id, const std::vector<std::string>& tokens, double rate,
                               Rng& rng);

enum class MaskingStrategy { entity, span };

struct PretrainExample {
  std::string doc_id;
  std::vector<std::string> doc_tokens;
  PretrainItem item;
};

struct PretrainData {
  std::vector<PretrainExample> examples;
  std::size_t zero_entity_docs = 0;
};

// Tokenizes, extracts entities and masks each (passage, doc) pair.
PretrainData prepare_pretrain_data(const DocumentCollection& docs, const std::vector<TrainingPair>& pairs,
                                   const Vocabulary& vocab, std::size_t max_len, MaskingStrategy masking,
                                   double span_rate, std::uint64_t seed);

// Same, with masks computed ahead of time (keyed by doc id).
PretrainData prepare_pretrain_data(const DocumentCollection& docs, const std::vector<TrainingPair>& pairs,
                                   const Vocabulary& vocab, std::size_t max_len,
                                   const std::map<std::string, MaskedExample>& masked);

TokenIds encode_target(const MaskedExample& example, const Vocabulary& vocab, std::size_t max_len);
TokenIds encode_text(const std::string& text, TokenizeMode mode, const Vocabulary& vocab, std::size_t max_len);
TokenIds encode_document(const Document& doc, const Vocabulary& vocab, std::size_t max_len);
// Vocabulary over every document body and query text.
Vocabulary build_vocabulary(const DocumentCollection& docs, const QueryCollection* queries, std::size_t min_count);

struct TrainConfig {
  TrainMode mode = TrainMode::pretrain;
  std::size_t batch_size = 16;
  double lr = 1e-3;
  double warmup = 0.1;
  std::size_t steps = 500;
  std::uint64_t seed = 0;
  MaskingStrategy masking = MaskingStrategy::entity;
  double span_rate = 0.15;
  double clip_norm = 1.0;
  ObjectiveOptions objectives;
  std::size_t hard_negatives_per_query = 1;
};

struct TrainLogEntry {
  std::size_t step = 0;
  LossReport loss;
  double lr = 0.0;
};

std::string log_entry_to_json(const TrainLogEntry& entry);

using StepCallback = std::function<void(const TrainLogEntry&)>;

// Epoch-shuffled batches under config.seed; span masks are re-sampled per epoch.
std::vector<TrainLogEntry> run_pretraining(ModelParams& params, PretrainData data, const Vocabulary& vocab,
                                           const TrainConfig& config, const StepCallback& on_step = {});
std::vector<TrainLogEntry> run_finetuning(ModelParams& params, const std::vector<FinetuneItem>& items,
                                          const TrainConfig& config, const StepCallback& on_step = {});

}  // namespace structret
