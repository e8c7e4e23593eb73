#pragma once

#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "structret/corpus.hpp"
#include "structret/retrieval.hpp"

namespace structret {

enum class GainScheme { four_class, two_class };
std::string to_string(GainScheme s);
GainScheme parse_gain_scheme(const std::string& s);

// Grade -> gain. Four-class {E:1, S:0.1, C:0.01, I:0}; two-class {E:1, else 0}.
struct GainTable {
  GainScheme scheme = GainScheme::four_class;
  std::array<double, 4> gains{1.0, 0.1, 0.01, 0.0};  // indexed by grade_to_int descending: E, S, C, I

  static GainTable four_class();
  static GainTable two_class();
  static GainTable of(GainScheme s);
  double gain(Grade g) const;
  // Grades with positive gain; these count as relevant for MRR.
  std::set<Grade> relevant() const;
};

// query_id -> doc_id -> grade.
using JudgmentTable = std::map<std::string, std::map<std::string, Grade>>;
JudgmentTable make_judgment_table(const std::vector<Judgment>& judgments);

struct QueryMetrics {
  double mrr = 0.0;
  double ndcg = 0.0;
};

struct MetricReport {
  std::string scheme;
  std::size_t cutoff = 100;
  double mrr = 0.0;
  double ndcg = 0.0;
  std::map<std::string, QueryMetrics> per_query;
  std::size_t zero_ideal_count = 0;
};

// Mean over run queries of 1/rank of the first doc whose grade is in `relevant`
// within the top k. Queries without judgments are an error.
MetricReport mrr_at_k(const RunRanking& run, const JudgmentTable& judgments, std::size_t k,
                      const std::set<Grade>& relevant);
// Linear gain, log2(r + 1) discount, ideal over every judged doc of the query.
// Queries with zero ideal DCG score 0 and are tallied.
MetricReport ndcg_at_k(const RunRanking& run, const JudgmentTable& judgments, const GainTable& gains,
                       std::size_t k);
// Which grades count as relevant for MRR.
enum class MrrRelevance { exact, positive_gain };
MrrRelevance parse_mrr_relevance(const std::string& s);

// Both metrics. By default only Exact counts as relevant for MRR; positive_gain
// uses every grade with a non-zero gain under the scheme.
MetricReport evaluate_run(const RunRanking& run, const JudgmentTable& judgments, GainScheme scheme,
                          std::size_t k = 100, MrrRelevance relevance = MrrRelevance::exact);

std::string metric_report_to_json(const MetricReport& report);

struct GeometryReport {
  double alignment = 0.0;
  double uniformity = 0.0;
};

// Alignment: mean squared distance between normalized positive pairs.
// Uniformity: log mean over distinct pairs of exp(-2 * squared distance), normalized.
GeometryReport geometry(const std::vector<std::pair<Embedding, Embedding>>& pos_pairs,
                        const std::vector<Embedding>& all_embeddings);

// One line per row: doc_id, modality, then the values, tab-separated.
std::string format_embeddings(const Index& index);
void export_embeddings(const Index& index, const std::string& path);

}  // namespace structret
