#include "structret/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <sstream>
#include <thread>

#include "structret/masker.hpp"
#include "structret/trainer.hpp"

namespace structret {

static_assert(std::endian::native == std::endian::little, "index format assumes a little-endian host");

Embedding Index::row(std::size_t i) const {
  if (i >= ids.size()) throw ValidationError("index row out of range");
  const float* r = rows.data() + i * dim;
  return Embedding(r, r + dim);
}

Index build_index(const ModelParams& params, const Vocabulary& vocab, const std::vector<Document>& docs,
                  std::size_t threads) {
  Index index;
  index.dim = params.config.d_model;
  index.fingerprint = checkpoint_fingerprint(params);
  index.rows.resize(docs.size() * index.dim);
  std::vector<std::string> errors(docs.size());
  auto encode_one = [&](std::size_t i) {
    try {
      const auto e = encode_representation(params, encode_document(docs[i], vocab, params.config.max_len));
      for (std::size_t j = 0; j < index.dim; ++j) {
        const auto f = static_cast<float>(e[j]);
        if (!std::isfinite(f)) throw NumericError("non-finite embedding");
        index.rows[i * index.dim + j] = f;
      }
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, docs.size()));
  if (workers == 1) {
    for (std::size_t i = 0; i < docs.size(); ++i) encode_one(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < docs.size(); i += workers) encode_one(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (!errors[i].empty()) throw NumericError("failed to encode document '" + docs[i].id + "': " + errors[i]);
    index.ids.push_back(docs[i].id);
    index.modalities.push_back(docs[i].modality);
  }
  return index;
}

std::vector<SearchResult> search(const Index& index, const Embedding& query, std::size_t k) {
  if (k == 0) throw ValidationError("search: k must be >= 1");
  if (query.size() != index.dim) {
    throw ValidationError("search: query has dimension " + std::to_string(query.size()) + ", index has " +
                          std::to_string(index.dim));
  }
  std::vector<SearchResult> all(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    all[i].doc_id = index.ids[i];
    all[i].score = similarity(query, index.row(i));
  }
  auto better = [](const SearchResult& a, const SearchResult& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc_id < b.doc_id;
  };
  const std::size_t keep = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), better);
  all.resize(keep);
  for (std::size_t r = 0; r < all.size(); ++r) all[r].rank = r + 1;
  return all;
}

std::vector<SearchResult> search(const Index& index, const Embedding& query, std::size_t k,
                                 const std::string& query_fingerprint, bool force) {
  if (!force && query_fingerprint != index.fingerprint) {
    throw ValidationError("query checkpoint " + query_fingerprint + " does not match index checkpoint " +
                          index.fingerprint);
  }
  return search(index, query, k);
}

std::vector<std::string> mine_hard_negatives(const Index& index, const Embedding& source,
                                             const std::set<std::string>& positive_ids, std::size_t pool,
                                             std::size_t n, std::uint64_t seed) {
  if (index.size() == 0) throw ValidationError("mine_hard_negatives: empty index");
  if (n > pool) throw ValidationError("mine_hard_negatives: n exceeds pool");
  std::vector<std::string> candidates;
  for (auto& r : search(index, source, pool)) {
    if (!positive_ids.contains(r.doc_id)) candidates.push_back(std::move(r.doc_id));
  }
  if (candidates.size() <= n) return candidates;
  Rng rng(seed);
  auto picks = rng.sample_without_replacement(candidates.size(), n);
  std::sort(picks.begin(), picks.end());
  std::vector<std::string> out;
  for (auto p : picks) out.push_back(candidates[p]);
  return out;
}

namespace {

constexpr char kIndexMagic[4] = {'S', 'R', 'I', 'X'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
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
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ValidationError("index file is truncated");
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string serialize_index(const Index& index) {
  std::string out(kIndexMagic, 4);
  put<std::uint32_t>(out, kIndexVersion);
  put<std::uint64_t>(out, index.size());
  put<std::uint64_t>(out, index.dim);
  put_string(out, index.fingerprint);
  for (std::size_t i = 0; i < index.size(); ++i) {
    put_string(out, index.ids[i]);
    put<std::uint8_t>(out, index.modalities[i] == Modality::structured ? 0 : 1);
  }
  for (float f : index.rows) put<float>(out, f);
  return out;
}

Index deserialize_index(std::string_view bytes) {
  if (bytes.size() < 4 || bytes.substr(0, 4) != std::string_view(kIndexMagic, 4)) {
    throw ValidationError("not an index file");
  }
  Reader r(bytes.substr(4));
  const auto version = r.get<std::uint32_t>();
  if (version != kIndexVersion) throw ValidationError("unsupported index version " + std::to_string(version));
  Index index;
  const auto n = r.get<std::uint64_t>();
  index.dim = r.get<std::uint64_t>();
  index.fingerprint = r.get_string();
  for (std::uint64_t i = 0; i < n; ++i) {
    index.ids.push_back(r.get_string());
    const auto m = r.get<std::uint8_t>();
    if (m > 1) throw ValidationError("bad modality byte in index file");
    index.modalities.push_back(m == 0 ? Modality::structured : Modality::unstructured);
  }
  r.need(n * index.dim * sizeof(float));
  index.rows.resize(n * index.dim);
  for (auto& f : index.rows) {
    f = r.get<float>();
    if (!std::isfinite(f)) throw ValidationError("non-finite value in index file");
  }
  if (!r.done()) throw ValidationError("trailing bytes in index file");
  return index;
}

void save_index(const Index& index, const std::string& path) { write_file(path, serialize_index(index)); }

Index load_index(const std::string& path) { return deserialize_index(read_file(path)); }

std::string format_trec_run(const std::string& query_id, const std::vector<SearchResult>& results,
                            const std::string& tag) {
  std::string out;
  char buf[64];
  for (const auto& r : results) {
    auto res = std::to_chars(buf, buf + sizeof(buf), r.score);
    out += query_id + " Q0 " + r.doc_id + " " + std::to_string(r.rank) + " " + std::string(buf, res.ptr) + " " +
           tag + "\n";
  }
  return out;
}

RunRanking parse_trec_run(std::string_view text) {
  RunRanking run;
  std::map<std::string, std::set<std::string>> seen;
  std::map<std::string, std::size_t> last_rank;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream fields(line);
    std::string qid, q0, doc, tag;
    long long rank = 0;
    double score = 0.0;
    if (!(fields >> qid >> q0 >> doc >> rank >> score >> tag)) {
      throw ParseError(line_no, "expected `query_id Q0 doc_id rank score tag`");
    }
    if (rank < 1) throw ParseError(line_no, "rank must be >= 1");
    if (!seen[qid].insert(doc).second) {
      throw ParseError(line_no, "duplicate doc '" + doc + "' for query '" + qid + "'");
    }
    auto& last = last_rank[qid];
    if (static_cast<std::size_t>(rank) <= last) throw ParseError(line_no, "ranks must increase within a query");
    last = static_cast<std::size_t>(rank);
    run[qid].push_back(doc);
  }
  return run;
}

}  // namespace structret
