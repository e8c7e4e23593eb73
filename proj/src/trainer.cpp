#include "structret/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "structret/structparse.hpp"

namespace structret {

namespace {

std::vector<Matrix*> tensors_of(ModelParams& p) {
  std::vector<Matrix*> out;
  p.visit([&out](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

void add_into(ModelParams& dst, ModelParams& src) {
  auto d = tensors_of(dst);
  auto s = tensors_of(src);
  for (std::size_t i = 0; i < d.size(); ++i) *d[i] += *s[i];
}

// Item i always runs on worker i % workers, so each gradient buffer has a
// single writer and the reduction order is fixed.
template <typename Fn>
void run_items(std::size_t n, std::size_t workers, Fn&& fn) {
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Per-worker gradient buffers; worker 0 writes straight into the caller's buffer.
class GradBuffers {
 public:
  GradBuffers(ModelParams* grads, std::size_t workers) : grads_(grads) {
    if (grads_ != nullptr) {
      for (std::size_t w = 1; w < workers; ++w) extra_.push_back(grads_->zeros_like());
    }
  }
  std::size_t workers() const { return extra_.size() + 1; }
  ModelParams* for_item(std::size_t i) {
    if (grads_ == nullptr) return nullptr;
    const std::size_t w = i % workers();
    return w == 0 ? grads_ : &extra_[w - 1];
  }
  void reduce() {
    for (auto& e : extra_) add_into(*grads_, e);
  }

 private:
  ModelParams* grads_;
  std::vector<ModelParams> extra_;
};

struct TapedEmbedding {
  std::unique_ptr<ad::Tape> tape;
  ad::Var out;
};

Matrix stack_rows(const std::vector<TapedEmbedding>& items, std::size_t d) {
  Matrix m(static_cast<Eigen::Index>(items.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < items.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = items[i].tape->value(items[i].out);
  return m;
}

void backprop_row(TapedEmbedding& e, const Eigen::Ref<const Eigen::RowVectorXd>& g) {
  e.tape->grad(e.out).row(0) += g;
  e.tape->backward();
}

std::size_t worker_count(const ObjectiveOptions& options, std::size_t items) {
  return std::max<std::size_t>(1, std::min(options.threads, items));
}

}  // namespace

LossReport loss_pretrain(const PretrainBatch& batch, const ModelParams& params, const ObjectiveOptions& options,
                         ModelParams* grads) {
  if (batch.empty()) throw ValidationError("empty pretraining batch");
  const bool record = grads != nullptr;
  const std::size_t b = batch.size();
  const std::size_t d = params.config.d_model;
  GradBuffers buffers(grads, worker_count(options, b));
  LossReport report;

  if (options.sda) {
    std::vector<TapedEmbedding> p(b), q(b);
    run_items(b, buffers.workers(), [&](std::size_t i) {
      ModelParams* g = buffers.for_item(i);
      p[i].tape = std::make_unique<ad::Tape>(record);
      p[i].out = representation(*p[i].tape, params, g, batch[i].passage);
      q[i].tape = std::make_unique<ad::Tape>(record);
      const auto& doc_input = options.sda_uses_masked_input ? batch[i].masked_source : batch[i].doc;
      q[i].out = representation(*q[i].tape, params, g, doc_input);
    });
    const auto sda = loss_sda(stack_rows(p, d), stack_rows(q, d));
    report.l_sda = sda.value;
    if (record) {
      run_items(b, buffers.workers(), [&](std::size_t i) {
        backprop_row(p[i], sda.grad_queries.row(static_cast<Eigen::Index>(i)));
        backprop_row(q[i], sda.grad_docs.row(static_cast<Eigen::Index>(i)));
      });
    }
  }

  if (options.mep) {
    std::vector<TapedEmbedding> t(b);
    std::vector<std::vector<double>> logprobs(b);
    run_items(b, buffers.workers(), [&](std::size_t i) {
      if (batch[i].target.empty()) return;
      t[i].tape = std::make_unique<ad::Tape>(record);
      t[i].out = target_log_probs(*t[i].tape, params, buffers.for_item(i), batch[i].masked_source, batch[i].target);
      const auto& v = t[i].tape->value(t[i].out);
      logprobs[i].assign(v.data(), v.data() + v.size());
    });
    const auto mep = loss_mep(logprobs);
    report.l_mep = mep.batch_mean;
    report.mep_sum = mep.sum;
    report.mep_per_token = mep.per_token_mean;
    report.mep_token_count = mep.token_count;
    if (record) {
      const double seed = -1.0 / static_cast<double>(mep.item_count);
      run_items(b, buffers.workers(), [&](std::size_t i) {
        if (!t[i].tape) return;
        t[i].tape->grad(t[i].out).array() += seed;
        t[i].tape->backward();
      });
    }
  }

  if (record) buffers.reduce();
  report.l_total = report.l_sda + report.l_mep;
  return report;
}

LossReport loss_finetune(const FinetuneBatch& batch, const ModelParams& params, const ObjectiveOptions& options,
                         ModelParams* grads) {
  if (batch.empty()) throw ValidationError("empty finetuning batch");
  const bool record = grads != nullptr;
  const std::size_t b = batch.size();
  const std::size_t d = params.config.d_model;
  GradBuffers buffers(grads, worker_count(options, b));

  std::vector<TapedEmbedding> q(b), pos(b);
  std::vector<std::vector<TapedEmbedding>> hard(b);
  run_items(b, buffers.workers(), [&](std::size_t i) {
    ModelParams* g = buffers.for_item(i);
    q[i].tape = std::make_unique<ad::Tape>(record);
    q[i].out = representation(*q[i].tape, params, g, batch[i].query);
    pos[i].tape = std::make_unique<ad::Tape>(record);
    pos[i].out = representation(*pos[i].tape, params, g, batch[i].positive);
    for (const auto& neg : batch[i].hard_negatives) {
      TapedEmbedding e;
      e.tape = std::make_unique<ad::Tape>(record);
      e.out = representation(*e.tape, params, g, neg);
      hard[i].push_back(std::move(e));
    }
  });
  std::vector<Matrix> hard_rows;
  for (std::size_t i = 0; i < b; ++i) {
    hard_rows.push_back(hard[i].empty() ? Matrix(0, static_cast<Eigen::Index>(d)) : stack_rows(hard[i], d));
  }
  const auto dr = loss_dr(stack_rows(q, d), stack_rows(pos, d), hard_rows, options.negatives);
  if (record) {
    run_items(b, buffers.workers(), [&](std::size_t i) {
      const auto r = static_cast<Eigen::Index>(i);
      backprop_row(q[i], dr.grad_queries.row(r));
      backprop_row(pos[i], dr.grad_positives.row(r));
      for (std::size_t k = 0; k < hard[i].size(); ++k) {
        backprop_row(hard[i][k], dr.grad_hard[i].row(static_cast<Eigen::Index>(k)));
      }
    });
    buffers.reduce();
  }
  LossReport report;
  report.l_dr = dr.value;
  report.l_total = dr.value;
  return report;
}

OptimizerState OptimizerState::create(const ModelParams& params, const OptimizerConfig& config) {
  if (config.total_steps == 0) throw ValidationError("total_steps must be positive");
  if (config.warmup_proportion < 0.0 || config.warmup_proportion > 1.0) {
    throw ValidationError("warmup proportion must lie in [0, 1]");
  }
  return OptimizerState{config, params.zeros_like(), params.zeros_like(), 0};
}

double OptimizerState::learning_rate(std::size_t step_number) const {
  const double warmup_steps = config.warmup_proportion * static_cast<double>(config.total_steps);
  if (warmup_steps <= 0.0 || static_cast<double>(step_number) >= warmup_steps) return config.lr;
  return config.lr * static_cast<double>(step_number) / warmup_steps;
}

namespace {

void check_params(const ModelParams& params) {
  params.visit([](const std::string& name, const Matrix& p) {
    if (!p.allFinite()) throw NumericError("non-finite value in parameter " + name);
  });
}

void check_finite(const LossReport& report, ModelParams& grads) {
  if (!std::isfinite(report.l_total)) throw NumericError("non-finite loss");
  grads.visit([](const std::string& name, const Matrix& g) {
    if (!g.allFinite()) throw NumericError("non-finite gradient in parameter " + name);
  });
}

void apply_update(ModelParams& params, OptimizerState& state, ModelParams& grads) {
  const auto& cfg = state.config;
  if (cfg.clip_norm > 0.0) {
    double sq = 0.0;
    grads.visit([&sq](const std::string&, const Matrix& g) { sq += g.squaredNorm(); });
    const double norm = std::sqrt(sq);
    if (norm > cfg.clip_norm) {
      const double factor = cfg.clip_norm / norm;
      grads.visit([factor](const std::string&, Matrix& g) { g *= factor; });
    }
  }
  state.step += 1;
  const double lr = state.learning_rate(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  auto p = tensors_of(params);
  auto g = tensors_of(grads);
  auto m = tensors_of(state.first_moment);
  auto v = tensors_of(state.second_moment);
  for (std::size_t t = 0; t < p.size(); ++t) {
    m[t]->array() = cfg.beta1 * m[t]->array() + (1.0 - cfg.beta1) * g[t]->array();
    v[t]->array() = cfg.beta2 * v[t]->array() + (1.0 - cfg.beta2) * g[t]->array().square();
    p[t]->array() -= lr * (m[t]->array() / bc1) / ((v[t]->array() / bc2).sqrt() + cfg.eps);
  }
}

}  // namespace

LossReport train_step(ModelParams& params, OptimizerState& state, const PretrainBatch& batch,
                      const ObjectiveOptions& options) {
  check_params(params);
  ModelParams grads = params.zeros_like();
  const auto report = loss_pretrain(batch, params, options, &grads);
  check_finite(report, grads);
  apply_update(params, state, grads);
  return report;
}

LossReport train_step(ModelParams& params, OptimizerState& state, const FinetuneBatch& batch,
                      const ObjectiveOptions& options) {
  check_params(params);
  ModelParams grads = params.zeros_like();
  const auto report = loss_finetune(batch, params, options, &grads);
  check_finite(report, grads);
  apply_update(params, state, grads);
  return report;
}

std::string to_string(Objective o) {
  switch (o) {
    case Objective::sda: return "sda";
    case Objective::mep: return "mep";
    case Objective::dr: return "dr";
  }
  return "sda";
}

namespace {

double objective_loss(const ModelParams& params, const PretrainBatch& pretrain, const FinetuneBatch& finetune,
                      Objective objective, ModelParams* grads) {
  ObjectiveOptions opts;
  opts.threads = 1;
  switch (objective) {
    case Objective::sda:
      opts.mep = false;
      return loss_pretrain(pretrain, params, opts, grads).l_sda;
    case Objective::mep:
      opts.sda = false;
      return loss_pretrain(pretrain, params, opts, grads).l_mep;
    case Objective::dr:
      return loss_finetune(finetune, params, opts, grads).l_dr;
  }
  return 0.0;
}

}  // namespace

GradCheckResult grad_check_indices(const ModelParams& params, const PretrainBatch& pretrain,
                                   const FinetuneBatch& finetune, Objective objective, double epsilon,
                                   const std::vector<std::size_t>& flat_indices) {
  ModelParams grads = params.zeros_like();
  const double base = objective_loss(params, pretrain, finetune, objective, &grads);
  if (!std::isfinite(base)) throw NumericError("non-finite loss in gradient check");

  ModelParams work = params;
  std::vector<std::pair<std::string, Matrix*>> work_tensors;
  work.visit([&](const std::string& name, Matrix& m) { work_tensors.emplace_back(name, &m); });
  const auto grad_tensors = tensors_of(grads);

  GradCheckResult result;
  for (std::size_t flat : flat_indices) {
    std::size_t t = 0;
    std::size_t offset = flat;
    while (t < work_tensors.size() && offset >= static_cast<std::size_t>(work_tensors[t].second->size())) {
      offset -= static_cast<std::size_t>(work_tensors[t].second->size());
      ++t;
    }
    if (t == work_tensors.size()) throw ValidationError("parameter index out of range");
    double& x = work_tensors[t].second->data()[offset];
    const double saved = x;
    x = saved + epsilon;
    const double up = objective_loss(work, pretrain, finetune, objective, nullptr);
    x = saved - epsilon;
    const double down = objective_loss(work, pretrain, finetune, objective, nullptr);
    x = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) throw NumericError("non-finite loss in gradient check");
    GradCheckEntry e;
    e.tensor = work_tensors[t].first;
    e.index = offset;
    e.analytic = grad_tensors[t]->data()[offset];
    e.numeric = (up - down) / (2.0 * epsilon);
    e.relative_error = std::abs(e.analytic - e.numeric) / std::max(std::abs(e.numeric), 1e-8);
    result.max_relative_error = std::max(result.max_relative_error, e.relative_error);
    result.entries.push_back(e);
  }
  return result;
}

GradCheckResult grad_check(const ModelParams& params, const PretrainBatch& pretrain, const FinetuneBatch& finetune,
                           Objective objective, double epsilon, std::size_t sample, std::uint64_t seed) {
  Rng rng(seed);
  const auto picks = rng.sample_without_replacement(params.parameter_count(), sample);
  return grad_check_indices(params, pretrain, finetune, objective, epsilon, picks);
}

MaskedExample span_mask_tokens(const std::string& doc_id, const std::vector<std::string>& tokens, double rate,
                               Rng& rng) {
  if (!(rate > 0.0 && rate < 1.0)) throw ValidationError("span mask rate must lie in (0, 1)");
  const std::size_t n = tokens.size();
  const auto budget = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
  std::vector<bool> masked(n, false);
  std::size_t covered = 0;
  for (int attempt = 0; attempt < 1000 && covered < budget; ++attempt) {
    const std::size_t start = rng.uniform_below(n);
    // Span lengths 1..5, mean 3.
    const std::size_t len = std::min<std::size_t>(1 + rng.uniform_below(5), std::min(n - start, budget - covered));
    bool free = true;
    for (std::size_t i = start; i < start + len; ++i) free = free && !masked[i];
    if (!free) continue;
    for (std::size_t i = start; i < start + len; ++i) masked[i] = true;
    covered += len;
  }

  MaskedExample ex;
  ex.doc_id = doc_id;
  std::size_t i = 0;
  while (i < n) {
    if (!masked[i] || ex.mapping.size() >= kSentinelCount) {
      ex.source.push_back(tokens[i++]);
      continue;
    }
    const std::size_t idx = ex.mapping.size();
    ex.source.push_back(sentinel_token(idx));
    ex.target.push_back(sentinel_token(idx));
    for (; i < n && masked[i]; ++i) ex.target.push_back(tokens[i]);
    ex.mapping.emplace_back("span" + std::to_string(idx), idx);
  }
  return ex;
}

MaskedExample span_mask_ablation(const Document& doc, double rate, std::uint64_t seed) {
  Rng rng(seed);
  return span_mask_tokens(doc.id, tokenize(doc.body, body_mode(doc), false), rate, rng);
}

TokenIds encode_target(const MaskedExample& example, const Vocabulary& vocab, std::size_t max_len) {
  if (example.target.empty()) return {};
  return vocab.encode(example.target, max_len);
}

TokenIds encode_text(const std::string& text, TokenizeMode mode, const Vocabulary& vocab, std::size_t max_len) {
  return vocab.encode(tokenize(text, mode, false), max_len);
}

TokenIds encode_document(const Document& doc, const Vocabulary& vocab, std::size_t max_len) {
  return encode_text(doc.body, body_mode(doc), vocab, max_len);
}

Vocabulary build_vocabulary(const DocumentCollection& docs, const QueryCollection* queries, std::size_t min_count) {
  std::vector<std::vector<std::string>> streams;
  for (const auto& d : docs) {
    streams.push_back(tokenize(d.body, body_mode(d), false));
    for (const auto& bullet : d.bullets) streams.push_back(tokenize(bullet, TokenizeMode::natural, false));
  }
  if (queries != nullptr) {
    for (const auto& q : *queries) streams.push_back(tokenize(q.text, TokenizeMode::natural, false));
  }
  return Vocabulary::build(streams, min_count);
}

PretrainData prepare_pretrain_data(const DocumentCollection& docs, const std::vector<TrainingPair>& pairs,
                                   const Vocabulary& vocab, std::size_t max_len, MaskingStrategy masking,
                                   double span_rate, std::uint64_t seed) {
  PretrainData data;
  Rng rng(seed);
  for (const auto& pair : pairs) {
    const Document& passage = docs.at(pair.passage_id);
    const Document& doc = docs.at(pair.doc_id);
    PretrainExample ex;
    ex.doc_id = doc.id;
    ex.doc_tokens = tokenize(doc.body, body_mode(doc), false);
    MaskedExample masked = masking == MaskingStrategy::entity
                               ? mask_entities(doc, extract_entities(doc))
                               : span_mask_tokens(doc.id, ex.doc_tokens, span_rate, rng);
    if (masked.target.empty()) ++data.zero_entity_docs;
    ex.item.passage = encode_document(passage, vocab, max_len);
    ex.item.doc = vocab.encode(ex.doc_tokens, max_len);
    ex.item.masked_source = vocab.encode(masked.source, max_len);
    ex.item.target = encode_target(masked, vocab, max_len);
    data.examples.push_back(std::move(ex));
  }
  return data;
}

PretrainData prepare_pretrain_data(const DocumentCollection& docs, const std::vector<TrainingPair>& pairs,
                                   const Vocabulary& vocab, std::size_t max_len,
                                   const std::map<std::string, MaskedExample>& masked) {
  PretrainData data;
  for (const auto& pair : pairs) {
    const Document& doc = docs.at(pair.doc_id);
    auto it = masked.find(doc.id);
    if (it == masked.end()) throw ValidationError("no masked example for document '" + doc.id + "'");
    PretrainExample ex;
    ex.doc_id = doc.id;
    ex.doc_tokens = tokenize(doc.body, body_mode(doc), false);
    if (it->second.target.empty()) ++data.zero_entity_docs;
    ex.item.passage = encode_document(docs.at(pair.passage_id), vocab, max_len);
    ex.item.doc = vocab.encode(ex.doc_tokens, max_len);
    ex.item.masked_source = vocab.encode(it->second.source, max_len);
    ex.item.target = encode_target(it->second, vocab, max_len);
    data.examples.push_back(std::move(ex));
  }
  return data;
}

std::string log_entry_to_json(const TrainLogEntry& entry) {
  nlohmann::ordered_json j;
  j["step"] = entry.step;
  j["l_sda"] = entry.loss.l_sda;
  j["l_mep"] = entry.loss.l_mep;
  j["l_dr"] = entry.loss.l_dr;
  j["l_total"] = entry.loss.l_total;
  j["lr"] = entry.lr;
  return j.dump();
}

namespace {

// Yields index batches from per-epoch permutations; never repeats an index inside a batch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : n_(n), batch_(std::min(batch_size, n)), rng_(seed) {
    if (n == 0) throw ValidationError("no training examples");
    if (batch_size == 0) throw ValidationError("batch_size must be positive");
    order_.resize(n);
    reshuffle();
  }
  // True when the returned batch starts a new epoch.
  bool next(std::vector<std::size_t>& out) {
    bool fresh = false;
    if (pos_ + batch_ > n_) {
      reshuffle();
      fresh = true;
    }
    out.assign(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
               order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return fresh;
  }

 private:
  void reshuffle() {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    rng_.shuffle(order_);
    pos_ = 0;
  }
  std::size_t n_;
  std::size_t batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

OptimizerConfig optimizer_config(const TrainConfig& config) {
  OptimizerConfig oc;
  oc.lr = config.lr;
  oc.warmup_proportion = config.warmup;
  oc.total_steps = config.steps;
  oc.clip_norm = config.clip_norm;
  return oc;
}

}  // namespace

std::vector<TrainLogEntry> run_pretraining(ModelParams& params, PretrainData data, const Vocabulary& vocab,
                                           const TrainConfig& config, const StepCallback& on_step) {
  auto state = OptimizerState::create(params, optimizer_config(config));
  BatchSampler sampler(data.examples.size(), config.batch_size, config.seed);
  Rng mask_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<TrainLogEntry> log;
  std::vector<std::size_t> idx;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const bool new_epoch = sampler.next(idx);
    if (new_epoch && step > 1 && config.masking == MaskingStrategy::span) {
      for (auto& ex : data.examples) {
        auto masked = span_mask_tokens(ex.doc_id, ex.doc_tokens, config.span_rate, mask_rng);
        ex.item.masked_source = vocab.encode(masked.source, params.config.max_len);
        ex.item.target = encode_target(masked, vocab, params.config.max_len);
      }
    }
    PretrainBatch batch;
    for (auto i : idx) batch.push_back(data.examples[i].item);
    TrainLogEntry entry;
    entry.step = step;
    entry.lr = state.learning_rate(step);
    entry.loss = train_step(params, state, batch, config.objectives);
    if (on_step) on_step(entry);
    log.push_back(entry);
  }
  return log;
}

std::vector<TrainLogEntry> run_finetuning(ModelParams& params, const std::vector<FinetuneItem>& items,
                                          const TrainConfig& config, const StepCallback& on_step) {
  auto state = OptimizerState::create(params, optimizer_config(config));
  BatchSampler sampler(items.size(), config.batch_size, config.seed);
  std::vector<TrainLogEntry> log;
  std::vector<std::size_t> idx;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    sampler.next(idx);
    FinetuneBatch batch;
    for (auto i : idx) {
      FinetuneItem item = items[i];
      if (item.hard_negatives.size() > config.hard_negatives_per_query) {
        item.hard_negatives.resize(config.hard_negatives_per_query);
      }
      batch.push_back(std::move(item));
    }
    TrainLogEntry entry;
    entry.step = step;
    entry.lr = state.learning_rate(step);
    entry.loss = train_step(params, state, batch, config.objectives);
    if (on_step) on_step(entry);
    log.push_back(entry);
  }
  return log;
}

}  // namespace structret
