#include "structret/evalkit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>

#include <json.hpp>

namespace structret {

std::string to_string(GainScheme s) { return s == GainScheme::four_class ? "four-class" : "two-class"; }

GainScheme parse_gain_scheme(const std::string& s) {
  if (s == "four-class" || s == "four_class" || s == "4") return GainScheme::four_class;
  if (s == "two-class" || s == "two_class" || s == "2") return GainScheme::two_class;
  throw ValidationError("unknown gain scheme '" + s + "'");
}

namespace {

std::size_t gain_slot(Grade g) { return static_cast<std::size_t>(3 - grade_to_int(g)); }

}  // namespace

GainTable GainTable::four_class() { return GainTable{GainScheme::four_class, {1.0, 0.1, 0.01, 0.0}}; }

GainTable GainTable::two_class() { return GainTable{GainScheme::two_class, {1.0, 0.0, 0.0, 0.0}}; }

GainTable GainTable::of(GainScheme s) { return s == GainScheme::four_class ? four_class() : two_class(); }

double GainTable::gain(Grade g) const { return gains[gain_slot(g)]; }

std::set<Grade> GainTable::relevant() const {
  std::set<Grade> out;
  for (Grade g : {Grade::exact, Grade::substitute, Grade::complement, Grade::irrelevant}) {
    if (gain(g) > 0.0) out.insert(g);
  }
  return out;
}

JudgmentTable make_judgment_table(const std::vector<Judgment>& judgments) {
  JudgmentTable table;
  for (const auto& j : judgments) {
    if (!table[j.query_id].emplace(j.doc_id, j.grade).second) {
      throw ValidationError("duplicate judgment for query '" + j.query_id + "' and doc '" + j.doc_id + "'");
    }
  }
  return table;
}

namespace {

const std::map<std::string, Grade>& judged(const JudgmentTable& judgments, const std::string& qid) {
  auto it = judgments.find(qid);
  if (it == judgments.end()) throw ValidationError("query '" + qid + "' in run has no judgments");
  return it->second;
}

void check_cutoff(std::size_t k) {
  if (k == 0) throw ValidationError("cutoff must be >= 1");
}

double mean_of(const std::map<std::string, QueryMetrics>& per_query, double QueryMetrics::*field) {
  if (per_query.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [_, m] : per_query) s += m.*field;
  return s / static_cast<double>(per_query.size());
}

}  // namespace

MetricReport mrr_at_k(const RunRanking& run, const JudgmentTable& judgments, std::size_t k,
                      const std::set<Grade>& relevant) {
  check_cutoff(k);
  MetricReport report;
  report.cutoff = k;
  for (const auto& [qid, docs] : run) {
    const auto& grades = judged(judgments, qid);
    double value = 0.0;
    for (std::size_t r = 0; r < std::min(k, docs.size()); ++r) {
      auto g = grades.find(docs[r]);
      if (g != grades.end() && relevant.contains(g->second)) {
        value = 1.0 / static_cast<double>(r + 1);
        break;
      }
    }
    report.per_query[qid].mrr = value;
  }
  report.mrr = mean_of(report.per_query, &QueryMetrics::mrr);
  return report;
}

MetricReport ndcg_at_k(const RunRanking& run, const JudgmentTable& judgments, const GainTable& gains,
                       std::size_t k) {
  check_cutoff(k);
  MetricReport report;
  report.scheme = to_string(gains.scheme);
  report.cutoff = k;
  for (const auto& [qid, docs] : run) {
    const auto& grades = judged(judgments, qid);
    double dcg = 0.0;
    for (std::size_t r = 0; r < std::min(k, docs.size()); ++r) {
      auto g = grades.find(docs[r]);
      if (g != grades.end()) dcg += gains.gain(g->second) / std::log2(static_cast<double>(r + 2));
    }
    std::vector<double> ideal;
    for (const auto& [_, grade] : grades) ideal.push_back(gains.gain(grade));
    std::sort(ideal.begin(), ideal.end(), std::greater<>());
    double idcg = 0.0;
    for (std::size_t r = 0; r < std::min(k, ideal.size()); ++r) idcg += ideal[r] / std::log2(static_cast<double>(r + 2));
    if (idcg > 0.0) {
      report.per_query[qid].ndcg = dcg / idcg;
    } else {
      report.per_query[qid].ndcg = 0.0;
      ++report.zero_ideal_count;
    }
  }
  report.ndcg = mean_of(report.per_query, &QueryMetrics::ndcg);
  return report;
}

MrrRelevance parse_mrr_relevance(const std::string& s) {
  if (s == "exact") return MrrRelevance::exact;
  if (s == "positive-gain" || s == "positive_gain") return MrrRelevance::positive_gain;
  throw ValidationError("unknown MRR relevance '" + s + "' (expected exact or positive-gain)");
}

MetricReport evaluate_run(const RunRanking& run, const JudgmentTable& judgments, GainScheme scheme, std::size_t k,
                          MrrRelevance relevance) {
  const auto gains = GainTable::of(scheme);
  auto report = ndcg_at_k(run, judgments, gains, k);
  const auto relevant = relevance == MrrRelevance::exact ? std::set<Grade>{Grade::exact} : gains.relevant();
  const auto mrr = mrr_at_k(run, judgments, k, relevant);
  for (const auto& [qid, m] : mrr.per_query) report.per_query[qid].mrr = m.mrr;
  report.mrr = mrr.mrr;
  return report;
}

std::string metric_report_to_json(const MetricReport& report) {
  nlohmann::ordered_json j;
  j["scheme"] = report.scheme;
  j["cutoff"] = report.cutoff;
  j["mrr"] = report.mrr;
  j["ndcg"] = report.ndcg;
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (const auto& [qid, m] : report.per_query) per[qid] = {{"mrr", m.mrr}, {"ndcg", m.ndcg}};
  j["per_query"] = per;
  j["zero_ideal_count"] = report.zero_ideal_count;
  return j.dump(2) + "\n";
}

namespace {

Embedding normalized(const Embedding& e) {
  double sq = 0.0;
  for (double x : e) sq += x * x;
  if (sq == 0.0) throw ValidationError("geometry: zero-norm embedding");
  const double inv = 1.0 / std::sqrt(sq);
  Embedding out(e.size());
  for (std::size_t i = 0; i < e.size(); ++i) out[i] = e[i] * inv;
  return out;
}

double squared_distance(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) throw ValidationError("geometry: embedding length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace

GeometryReport geometry(const std::vector<std::pair<Embedding, Embedding>>& pos_pairs,
                        const std::vector<Embedding>& all_embeddings) {
  if (pos_pairs.empty()) throw ValidationError("geometry: need at least one positive pair");
  if (all_embeddings.size() < 2) throw ValidationError("geometry: need at least two embeddings");
  GeometryReport out;
  for (const auto& [a, b] : pos_pairs) out.alignment += squared_distance(normalized(a), normalized(b));
  out.alignment /= static_cast<double>(pos_pairs.size());

  std::vector<Embedding> unit;
  for (const auto& e : all_embeddings) unit.push_back(normalized(e));
  // log-mean-exp with the maximum factored out.
  std::vector<double> exponents;
  for (std::size_t i = 0; i < unit.size(); ++i) {
    for (std::size_t j = i + 1; j < unit.size(); ++j) exponents.push_back(-2.0 * squared_distance(unit[i], unit[j]));
  }
  const double mx = *std::max_element(exponents.begin(), exponents.end());
  double s = 0.0;
  for (double x : exponents) s += std::exp(x - mx);
  out.uniformity = mx + std::log(s / static_cast<double>(exponents.size()));
  return out;
}

std::string format_embeddings(const Index& index) {
  std::string out;
  char buf[32];
  for (std::size_t i = 0; i < index.size(); ++i) {
    out += index.ids[i];
    out += '\t';
    out += to_string(index.modalities[i]);
    for (std::size_t j = 0; j < index.dim; ++j) {
      auto res = std::to_chars(buf, buf + sizeof(buf), index.rows[i * index.dim + j]);
      out += '\t';
      out.append(buf, res.ptr);
    }
    out += '\n';
  }
  return out;
}

void export_embeddings(const Index& index, const std::string& path) { write_file(path, format_embeddings(index)); }

}  // namespace structret
