#include "structret/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>

#include "structret/common.hpp"

namespace structret {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void EncoderConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(Vocabulary::kReservedCount)) {
    throw ValidationError("vocab_size must exceed the reserved block");
  }
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ValidationError("d_model must be a positive multiple of n_heads");
  }
  if (n_layers == 0 || ffn_dim == 0) throw ValidationError("n_layers and ffn_dim must be positive");
  if (max_len < 8) throw ValidationError("max_len must be at least 8");
}

namespace {

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * stddev;
  return m;
}

Matrix ones_row(std::size_t d) { return Matrix::Ones(1, static_cast<Eigen::Index>(d)); }

AttentionWeights init_attention(Rng& rng, std::size_t d) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  return {gaussian(rng, d, d, s), gaussian(rng, d, d, s), gaussian(rng, d, d, s), gaussian(rng, d, d, s)};
}

template <typename T>
T* member_or_null(ModelParams* grads, T ModelParams::*field) {
  return grads == nullptr ? nullptr : &(grads->*field);
}

struct AttentionGrads {
  Matrix *wq = nullptr, *wk = nullptr, *wv = nullptr, *wo = nullptr;
};

AttentionGrads attention_grads(AttentionWeights* g) {
  if (g == nullptr) return {};
  return {&g->wq, &g->wk, &g->wv, &g->wo};
}

ad::Var attention_block(ad::Tape& tape, const AttentionWeights& w, AttentionWeights* gw, ad::Var x,
                        ad::Var memory, int n_heads, bool causal) {
  const auto g = attention_grads(gw);
  const auto q = tape.linear(x, w.wq, g.wq);
  const auto k = tape.linear(memory, w.wk, g.wk);
  const auto v = tape.linear(memory, w.wv, g.wv);
  const auto o = tape.attention(q, k, v, n_heads, causal);
  return tape.linear(o, w.wo, g.wo);
}

ad::Var ffn_block(ad::Tape& tape, const Matrix& w_in, const Matrix& w_out, Matrix* g_in, Matrix* g_out, ad::Var x) {
  return tape.linear(tape.gelu(tape.linear(x, w_in, g_in)), w_out, g_out);
}

void check_sequence(const ModelParams& params, const TokenIds& ids, const char* what) {
  if (ids.empty()) throw ValidationError(std::string(what) + " sequence is empty");
  if (ids.size() > params.config.max_len) {
    throw ValidationError(std::string(what) + " sequence longer than max_len (" + std::to_string(ids.size()) + ")");
  }
}

ad::Var embed_with_positions(ad::Tape& tape, const ModelParams& params, ModelParams* grads, const TokenIds& ids) {
  const auto x = tape.embed(params.embedding, member_or_null(grads, &ModelParams::embedding), ids);
  return tape.add_constant(x, positional_encoding(ids.size(), params.config.d_model));
}

}  // namespace

Matrix positional_encoding(std::size_t length, std::size_t d_model) {
  Matrix pe(static_cast<Eigen::Index>(length), static_cast<Eigen::Index>(d_model));
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
      const auto r = static_cast<Eigen::Index>(pos);
      pe(r, static_cast<Eigen::Index>(i)) = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d_model) pe(r, static_cast<Eigen::Index>(i + 1)) = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return pe;
}

ModelParams ModelParams::initialize(const EncoderConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t d = config.d_model;
  const double s_in = 1.0 / std::sqrt(static_cast<double>(d));
  const double s_ffn = 1.0 / std::sqrt(static_cast<double>(config.ffn_dim));
  ModelParams p;
  p.config = config;
  p.embedding = gaussian(rng, config.vocab_size, d, 1.0);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    EncoderLayer L;
    L.attn_norm = ones_row(d);
    L.self_attn = init_attention(rng, d);
    L.ffn_norm = ones_row(d);
    L.ffn_in = gaussian(rng, d, config.ffn_dim, s_in);
    L.ffn_out = gaussian(rng, config.ffn_dim, d, s_ffn);
    p.encoder.push_back(std::move(L));
  }
  p.encoder_norm = ones_row(d);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    DecoderLayer L;
    L.self_norm = ones_row(d);
    L.self_attn = init_attention(rng, d);
    L.cross_norm = ones_row(d);
    L.cross_attn = init_attention(rng, d);
    L.ffn_norm = ones_row(d);
    L.ffn_in = gaussian(rng, d, config.ffn_dim, s_in);
    L.ffn_out = gaussian(rng, config.ffn_dim, d, s_ffn);
    p.decoder.push_back(std::move(L));
  }
  p.decoder_norm = ones_row(d);
  return p;
}

ModelParams ModelParams::zeros_like() const {
  ModelParams z = *this;
  z.set_zero();
  return z;
}

void ModelParams::set_zero() {
  visit([](const std::string&, Matrix& m) { m.setZero(); });
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  visit([&n](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

bool ModelParams::all_finite() const {
  bool ok = true;
  visit([&ok](const std::string&, const Matrix& m) { ok = ok && m.allFinite(); });
  return ok;
}

ad::Var encode_sequence(ad::Tape& tape, const ModelParams& params, ModelParams* grads, const TokenIds& source) {
  check_sequence(params, source, "source");
  const int heads = static_cast<int>(params.config.n_heads);
  auto x = embed_with_positions(tape, params, grads, source);
  for (std::size_t l = 0; l < params.encoder.size(); ++l) {
    const auto& L = params.encoder[l];
    EncoderLayer* G = grads ? &grads->encoder[l] : nullptr;
    auto h = tape.rms_norm(x, L.attn_norm, G ? &G->attn_norm : nullptr);
    x = tape.add(x, attention_block(tape, L.self_attn, G ? &G->self_attn : nullptr, h, h, heads, false));
    h = tape.rms_norm(x, L.ffn_norm, G ? &G->ffn_norm : nullptr);
    x = tape.add(x, ffn_block(tape, L.ffn_in, L.ffn_out, G ? &G->ffn_in : nullptr, G ? &G->ffn_out : nullptr, h));
  }
  return tape.rms_norm(x, params.encoder_norm, member_or_null(grads, &ModelParams::encoder_norm));
}

ad::Var decode_sequence(ad::Tape& tape, const ModelParams& params, ModelParams* grads, ad::Var memory,
                        const TokenIds& decoder_input) {
  check_sequence(params, decoder_input, "decoder");
  const int heads = static_cast<int>(params.config.n_heads);
  auto y = embed_with_positions(tape, params, grads, decoder_input);
  for (std::size_t l = 0; l < params.decoder.size(); ++l) {
    const auto& L = params.decoder[l];
    DecoderLayer* G = grads ? &grads->decoder[l] : nullptr;
    auto h = tape.rms_norm(y, L.self_norm, G ? &G->self_norm : nullptr);
    y = tape.add(y, attention_block(tape, L.self_attn, G ? &G->self_attn : nullptr, h, h, heads, true));
    h = tape.rms_norm(y, L.cross_norm, G ? &G->cross_norm : nullptr);
    y = tape.add(y, attention_block(tape, L.cross_attn, G ? &G->cross_attn : nullptr, h, memory, heads, false));
    h = tape.rms_norm(y, L.ffn_norm, G ? &G->ffn_norm : nullptr);
    y = tape.add(y, ffn_block(tape, L.ffn_in, L.ffn_out, G ? &G->ffn_in : nullptr, G ? &G->ffn_out : nullptr, h));
  }
  return tape.rms_norm(y, params.decoder_norm, member_or_null(grads, &ModelParams::decoder_norm));
}

ad::Var representation(ad::Tape& tape, const ModelParams& params, ModelParams* grads, const TokenIds& source) {
  const auto memory = encode_sequence(tape, params, grads, source);
  const auto hidden = decode_sequence(tape, params, grads, memory, TokenIds{Vocabulary::kStart});
  return tape.row(hidden, 0);
}

namespace {

TokenIds shifted_right(const TokenIds& target) {
  TokenIds in;
  in.reserve(target.size());
  in.push_back(Vocabulary::kStart);
  in.insert(in.end(), target.begin(), target.end() - 1);
  return in;
}

double output_scale(const ModelParams& params) { return 1.0 / std::sqrt(static_cast<double>(params.config.d_model)); }

}  // namespace

ad::Var target_log_probs(ad::Tape& tape, const ModelParams& params, ModelParams* grads, const TokenIds& source,
                         const TokenIds& target) {
  if (target.empty()) throw ValidationError("target sequence is empty");
  const auto memory = encode_sequence(tape, params, grads, source);
  const auto hidden = decode_sequence(tape, params, grads, memory, shifted_right(target));
  const auto logp = tape.tied_log_softmax(hidden, params.embedding, member_or_null(grads, &ModelParams::embedding),
                                          output_scale(params));
  return tape.pick(logp, target);
}

Embedding encode_representation(const ModelParams& params, const TokenIds& source) {
  ad::Tape tape(false);
  const auto& v = tape.value(representation(tape, params, nullptr, source));
  return Embedding(v.data(), v.data() + v.size());
}

std::vector<Embedding> encode_batch(const ModelParams& params, const std::vector<TokenIds>& sources) {
  std::vector<Embedding> out;
  out.reserve(sources.size());
  for (const auto& s : sources) out.push_back(encode_representation(params, s));
  return out;
}

double similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw ValidationError("embedding length mismatch (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> decode_teacher_forced(const ModelParams& params, const TokenIds& source, const TokenIds& target) {
  ad::Tape tape(false);
  const auto& v = tape.value(target_log_probs(tape, params, nullptr, source, target));
  return std::vector<double>(v.data(), v.data() + v.size());
}

Matrix decode_distribution(const ModelParams& params, const TokenIds& source, const TokenIds& target) {
  if (target.empty()) throw ValidationError("target sequence is empty");
  ad::Tape tape(false);
  const auto memory = encode_sequence(tape, params, nullptr, source);
  const auto hidden = decode_sequence(tape, params, nullptr, memory, shifted_right(target));
  return tape.value(tape.tied_log_softmax(hidden, params.embedding, nullptr, output_scale(params)));
}

TokenIds greedy_decode(const ModelParams& params, const TokenIds& source, std::size_t max_steps) {
  ad::Tape tape(false);
  const auto memory = encode_sequence(tape, params, nullptr, source);
  TokenIds input{Vocabulary::kStart};
  TokenIds out;
  max_steps = std::min(max_steps, params.config.max_len);
  while (out.size() < max_steps) {
    const auto hidden = decode_sequence(tape, params, nullptr, memory, input);
    const auto last = tape.row(hidden, input.size() - 1);
    const Matrix logits = tape.value(last) * params.embedding.transpose();
    Eigen::Index best = 0;
    logits.row(0).maxCoeff(&best);
    const auto id = static_cast<std::int32_t>(best);
    if (id == Vocabulary::kEnd) break;
    out.push_back(id);
    input.push_back(id);
  }
  return out;
}

namespace {

constexpr char kMagic[4] = {'S', 'R', 'C', 'K'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ValidationError("checkpoint truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_checkpoint(const ModelParams& params) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  const auto& c = params.config;
  for (std::size_t v : {c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.ffn_dim, c.max_len}) {
    put<std::uint64_t>(out, v);
  }
  put<std::uint64_t>(out, c.seed);
  std::uint32_t count = 0;
  params.visit([&count](const std::string&, const Matrix&) { ++count; });
  put<std::uint32_t>(out, count);
  params.visit([&out](const std::string& name, const Matrix& m) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    out.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  });
  return out;
}

ModelParams deserialize_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(4) != std::string_view(kMagic, 4)) throw ValidationError("not a checkpoint file");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  }
  EncoderConfig c;
  c.vocab_size = in.get<std::uint64_t>();
  c.d_model = in.get<std::uint64_t>();
  c.n_layers = in.get<std::uint64_t>();
  c.n_heads = in.get<std::uint64_t>();
  c.ffn_dim = in.get<std::uint64_t>();
  c.max_len = in.get<std::uint64_t>();
  c.seed = in.get<std::uint64_t>();
  c.validate();
  ModelParams p = ModelParams::initialize(c);
  const auto count = in.get<std::uint32_t>();
  std::uint32_t seen = 0;
  p.visit([&](const std::string& name, Matrix& m) {
    ++seen;
    const auto len = in.get<std::uint32_t>();
    if (in.take(len) != name) throw ValidationError("checkpoint tensor order mismatch at " + name);
    const auto rows = in.get<std::uint32_t>();
    const auto cols = in.get<std::uint32_t>();
    if (rows != m.rows() || cols != m.cols()) throw ValidationError("checkpoint shape mismatch for " + name);
    const auto raw = in.take(static_cast<std::size_t>(rows) * cols * sizeof(double));
    std::memcpy(m.data(), raw.data(), raw.size());
  });
  if (seen != count || !in.done()) throw ValidationError("checkpoint tensor count mismatch");
  return p;
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
  write_file(path, serialize_checkpoint(params));
}

ModelParams load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

std::string checkpoint_fingerprint(const ModelParams& params) {
  return hex64(fnv1a64(serialize_checkpoint(params)));
}

}  // namespace structret
