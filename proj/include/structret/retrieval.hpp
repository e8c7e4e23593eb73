#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "structret/corpus.hpp"
#include "structret/model.hpp"

namespace structret {

// Document embeddings in input order. Rows are stored at 32-bit precision,
// matching the on-disk format, and widened to double for scoring.
struct Index {
  std::vector<std::string> ids;
  std::vector<Modality> modalities;
  std::size_t dim = 0;
  std::vector<float> rows;  // ids.size() x dim, row-major
  std::string fingerprint;  // checkpoint fingerprint of the encoder

  std::size_t size() const { return ids.size(); }
  Embedding row(std::size_t i) const;
  bool operator==(const Index&) const = default;
};

struct SearchResult {
  std::string doc_id;
  double score = 0.0;
  std::size_t rank = 0;
  bool operator==(const SearchResult&) const = default;
};

// Encodes each document with encode_representation. `threads` only changes
// wall time; rows land in input order.
Index build_index(const ModelParams& params, const Vocabulary& vocab, const std::vector<Document>& docs,
                  std::size_t threads = 1);

// Exact top-k by dot product; ties by ascending doc_id.
std::vector<SearchResult> search(const Index& index, const Embedding& query, std::size_t k);
// Refuses a query encoded under a different checkpoint unless `force`.
std::vector<SearchResult> search(const Index& index, const Embedding& query, std::size_t k,
                                 const std::string& query_fingerprint, bool force);

// Samples up to n of the top-`pool` results that are not positives.
std::vector<std::string> mine_hard_negatives(const Index& index, const Embedding& source,
                                             const std::set<std::string>& positive_ids, std::size_t pool,
                                             std::size_t n, std::uint64_t seed);

inline constexpr std::uint32_t kIndexVersion = 1;

std::string serialize_index(const Index& index);
Index deserialize_index(std::string_view bytes);
void save_index(const Index& index, const std::string& path);
Index load_index(const std::string& path);

// TREC run lines: `query_id Q0 doc_id rank score tag`.
std::string format_trec_run(const std::string& query_id, const std::vector<SearchResult>& results,
                            const std::string& tag);

// query_id -> doc ids in rank order.
using RunRanking = std::map<std::string, std::vector<std::string>>;
// Rejects malformed lines, duplicate docs per query and out-of-order ranks.
RunRanking parse_trec_run(std::string_view text);

}  // namespace structret
