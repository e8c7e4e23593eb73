#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "structret/autodiff.hpp"
#include "structret/tokenizer.hpp"

namespace structret {

using ad::Matrix;
using TokenIds = std::vector<std::int32_t>;
// A d_model-dimensional representation (h_q, h_d, h_p).
using Embedding = std::vector<double>;

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t ffn_dim = 128;
  std::size_t max_len = 128;
  std::uint64_t seed = 0;

  // Throws ValidationError when inconsistent.
  void validate() const;
  bool operator==(const EncoderConfig&) const = default;
};

struct AttentionWeights {
  Matrix wq, wk, wv, wo;
};

struct EncoderLayer {
  Matrix attn_norm;
  AttentionWeights self_attn;
  Matrix ffn_norm;
  Matrix ffn_in, ffn_out;
};

struct DecoderLayer {
  Matrix self_norm;
  AttentionWeights self_attn;
  Matrix cross_norm;
  AttentionWeights cross_attn;
  Matrix ffn_norm;
  Matrix ffn_in, ffn_out;
};

// Encoder-decoder weights. The output projection is tied to `embedding`.
struct ModelParams {
  EncoderConfig config;
  Matrix embedding;
  std::vector<EncoderLayer> encoder;
  Matrix encoder_norm;
  std::vector<DecoderLayer> decoder;
  Matrix decoder_norm;

  static ModelParams initialize(const EncoderConfig& config);
  // Same shapes, all zeros. Used for gradients and optimizer moments.
  ModelParams zeros_like() const;

  // Visits every tensor in a fixed order with a stable name.
  template <typename Fn>
  void visit(Fn&& fn);
  template <typename Fn>
  void visit(Fn&& fn) const;

  std::size_t parameter_count() const;
  void set_zero();
  bool all_finite() const;
};

// Sinusoidal position table, rows = positions.
Matrix positional_encoding(std::size_t length, std::size_t d_model);

// Tape-level building blocks shared by inference and training. `grads` may be null.
ad::Var encode_sequence(ad::Tape& tape, const ModelParams& params, ModelParams* grads, const TokenIds& source);
ad::Var decode_sequence(ad::Tape& tape, const ModelParams& params, ModelParams* grads, ad::Var memory,
                        const TokenIds& decoder_input);
// Decoder position-0 hidden state after one step on the start token (1 x d).
ad::Var representation(ad::Tape& tape, const ModelParams& params, ModelParams* grads, const TokenIds& source);
// Per-position log-probabilities of `target` under teacher forcing (m x 1).
ad::Var target_log_probs(ad::Tape& tape, const ModelParams& params, ModelParams* grads, const TokenIds& source,
                         const TokenIds& target);

Embedding encode_representation(const ModelParams& params, const TokenIds& source);
// Encodes each input independently.
std::vector<Embedding> encode_batch(const ModelParams& params, const std::vector<TokenIds>& sources);

double similarity(std::span<const double> a, std::span<const double> b);

std::vector<double> decode_teacher_forced(const ModelParams& params, const TokenIds& source, const TokenIds& target);
// Full per-position log-distribution (m x vocab).
Matrix decode_distribution(const ModelParams& params, const TokenIds& source, const TokenIds& target);
// Argmax decoding until the end token or max_steps.
TokenIds greedy_decode(const ModelParams& params, const TokenIds& source, std::size_t max_steps);

// Binary checkpoint: magic, format version, config, then named tensors with shapes.
std::string serialize_checkpoint(const ModelParams& params);
ModelParams deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);
std::string checkpoint_fingerprint(const ModelParams& params);

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Fn>
void ModelParams::visit(Fn&& fn) {
  fn(std::string("embedding"), embedding);
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    auto& L = encoder[l];
    const std::string p = "encoder." + std::to_string(l) + ".";
    fn(p + "attn_norm", L.attn_norm);
    fn(p + "self_attn.wq", L.self_attn.wq);
    fn(p + "self_attn.wk", L.self_attn.wk);
    fn(p + "self_attn.wv", L.self_attn.wv);
    fn(p + "self_attn.wo", L.self_attn.wo);
    fn(p + "ffn_norm", L.ffn_norm);
    fn(p + "ffn_in", L.ffn_in);
    fn(p + "ffn_out", L.ffn_out);
  }
  fn(std::string("encoder_norm"), encoder_norm);
  for (std::size_t l = 0; l < decoder.size(); ++l) {
    auto& L = decoder[l];
    const std::string p = "decoder." + std::to_string(l) + ".";
    fn(p + "self_norm", L.self_norm);
    fn(p + "self_attn.wq", L.self_attn.wq);
    fn(p + "self_attn.wk", L.self_attn.wk);
    fn(p + "self_attn.wv", L.self_attn.wv);
    fn(p + "self_attn.wo", L.self_attn.wo);
    fn(p + "cross_norm", L.cross_norm);
    fn(p + "cross_attn.wq", L.cross_attn.wq);
    fn(p + "cross_attn.wk", L.cross_attn.wk);
    fn(p + "cross_attn.wv", L.cross_attn.wv);
    fn(p + "cross_attn.wo", L.cross_attn.wo);
    fn(p + "ffn_norm", L.ffn_norm);
    fn(p + "ffn_in", L.ffn_in);
    fn(p + "ffn_out", L.ffn_out);
  }
  fn(std::string("decoder_norm"), decoder_norm);
}

template <typename Fn>
void ModelParams::visit(Fn&& fn) const {
  const_cast<ModelParams*>(this)->visit(
      [&fn](const std::string& name, Matrix& m) { fn(name, static_cast<const Matrix&>(m)); });
}

}  // namespace structret
