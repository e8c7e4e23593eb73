#include <gtest/gtest.h>

#include <cmath>

#include <json.hpp>

#include "structret/evalkit.hpp"
#include "test_util.hpp"

namespace structret {
namespace {

JudgmentTable table(const std::string& qid, const std::vector<std::pair<std::string, Grade>>& grades) {
  std::vector<Judgment> js;
  for (const auto& [doc, g] : grades) js.push_back({qid, doc, g});
  return make_judgment_table(js);
}

// Independent oracle: DCG over the run prefix, IDCG from every judged gain sorted.
double oracle_ndcg(const std::vector<std::string>& ranking, const std::map<std::string, Grade>& grades,
                   const GainTable& gains, std::size_t k) {
  double dcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) {
    auto it = grades.find(ranking[r]);
    if (it != grades.end()) dcg += gains.gain(it->second) / std::log2(static_cast<double>(r) + 2.0);
  }
  std::vector<double> ideal;
  for (const auto& [doc, g] : grades) ideal.push_back(gains.gain(g));
  std::sort(ideal.rbegin(), ideal.rend());
  double idcg = 0.0;
  for (std::size_t r = 0; r < std::min(k, ideal.size()); ++r) idcg += ideal[r] / std::log2(static_cast<double>(r) + 2.0);
  return idcg == 0.0 ? 0.0 : dcg / idcg;
}

double oracle_rr(const std::vector<std::string>& ranking, const std::map<std::string, Grade>& grades, std::size_t k) {
  for (std::size_t r = 0; r < std::min(k, ranking.size()); ++r) {
    auto it = grades.find(ranking[r]);
    if (it != grades.end() && it->second == Grade::exact) return 1.0 / static_cast<double>(r + 1);
  }
  return 0.0;
}

TEST(Gains, Tables) {
  const auto four = GainTable::four_class();
  EXPECT_EQ(four.gain(Grade::exact), 1.0);
  EXPECT_EQ(four.gain(Grade::substitute), 0.1);
  EXPECT_EQ(four.gain(Grade::complement), 0.01);
  EXPECT_EQ(four.gain(Grade::irrelevant), 0.0);
  const auto two = GainTable::two_class();
  EXPECT_EQ(two.gain(Grade::substitute), 0.0);
  EXPECT_EQ(two.relevant(), std::set<Grade>{Grade::exact});
  EXPECT_EQ(parse_gain_scheme(to_string(GainScheme::two_class)), GainScheme::two_class);
  EXPECT_THROW(parse_gain_scheme("five-class"), ValidationError);
}

TEST(Mrr, Examples) {
  const auto j = table("q", {{"a", Grade::irrelevant}, {"b", Grade::exact}});
  EXPECT_DOUBLE_EQ(mrr_at_k({{"q", {"a", "b"}}}, j, 10, {Grade::exact}).mrr, 0.5);
  EXPECT_DOUBLE_EQ(mrr_at_k({{"q", {"b", "a"}}}, j, 10, {Grade::exact}).mrr, 1.0);
  EXPECT_DOUBLE_EQ(mrr_at_k({{"q", {"a", "b"}}}, j, 1, {Grade::exact}).mrr, 0.0);
  EXPECT_DOUBLE_EQ(mrr_at_k({{"q", {"a", "x"}}}, j, 10, {Grade::exact}).mrr, 0.0);
}

TEST(Mrr, UnjudgedQueryIsNamed) {
  const auto j = table("q", {{"a", Grade::exact}});
  try {
    mrr_at_k({{"nope", {"a"}}}, j, 10, {Grade::exact});
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("nope"), std::string::npos);
  }
}

TEST(Ndcg, HandCase) {
  const auto j = table("q", {{"d1", Grade::exact}, {"d2", Grade::substitute}, {"d3", Grade::irrelevant},
                             {"d4", Grade::complement}});
  const RunRanking run{{"q", {"d3", "d2", "d1"}}};
  const double dcg = 0.1 / std::log2(3.0) + 1.0 / 2.0;
  const double idcg = 1.0 + 0.1 / std::log2(3.0) + 0.01 / 2.0;
  EXPECT_NEAR(ndcg_at_k(run, j, GainTable::four_class(), 10).ndcg, dcg / idcg, 1e-12);
  EXPECT_NEAR(dcg / idcg, 0.527195, 1e-6);
  EXPECT_NEAR(ndcg_at_k(run, j, GainTable::two_class(), 10).ndcg, 0.5, 1e-12);
}

TEST(Ndcg, ZeroIdealScoresZeroAndIsCounted) {
  const auto j = table("q", {{"a", Grade::irrelevant}});
  const auto r = ndcg_at_k({{"q", {"a"}}}, j, GainTable::four_class(), 10);
  EXPECT_EQ(r.ndcg, 0.0);
  EXPECT_EQ(r.zero_ideal_count, 1u);
}

TEST(Metrics, MatchBruteForceOracleOnRandomRuns) {
  Rng rng(17);
  const std::array<Grade, 4> grades{Grade::exact, Grade::substitute, Grade::complement, Grade::irrelevant};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Judgment> js;
    RunRanking run;
    for (int q = 0; q < 4; ++q) {
      const std::string qid = "q" + std::to_string(q);
      for (auto d : rng.sample_without_replacement(20, 1 + rng.uniform_below(8))) {
        js.push_back({qid, "d" + std::to_string(d), grades[rng.uniform_below(4)]});
      }
      for (auto d : rng.sample_without_replacement(20, 1 + rng.uniform_below(15))) {
        run[qid].push_back("d" + std::to_string(d));
      }
    }
    const auto jt = make_judgment_table(js);
    const std::size_t k = 1 + rng.uniform_below(12);
    for (auto scheme : {GainScheme::four_class, GainScheme::two_class}) {
      const auto report = evaluate_run(run, jt, scheme, k);
      double mrr = 0.0, ndcg = 0.0;
      for (const auto& [qid, ranking] : run) {
        const double n = oracle_ndcg(ranking, jt.at(qid), GainTable::of(scheme), k);
        const double rr = oracle_rr(ranking, jt.at(qid), k);
        EXPECT_NEAR(report.per_query.at(qid).ndcg, n, 1e-12);
        EXPECT_NEAR(report.per_query.at(qid).mrr, rr, 1e-12);
        EXPECT_GE(report.per_query.at(qid).ndcg, 0.0);
        EXPECT_LE(report.per_query.at(qid).ndcg, 1.0 + 1e-12);
        mrr += rr;
        ndcg += n;
      }
      EXPECT_NEAR(report.mrr, mrr / 4.0, 1e-12);
      EXPECT_NEAR(report.ndcg, ndcg / 4.0, 1e-12);
    }
  }
}

TEST(Metrics, AppendingIrrelevantDocsChangesNothing) {
  const auto j = table("q", {{"a", Grade::exact}, {"b", Grade::substitute}, {"c", Grade::irrelevant}});
  RunRanking run{{"q", {"b", "a"}}};
  const auto before = evaluate_run(run, j, GainScheme::four_class, 100);
  run["q"].push_back("c");
  run["q"].push_back("unjudged");
  const auto after = evaluate_run(run, j, GainScheme::four_class, 100);
  EXPECT_EQ(before.mrr, after.mrr);
  EXPECT_EQ(before.ndcg, after.ndcg);
}

TEST(Metrics, SchemesAgreeWithoutMiddleGrades) {
  const auto j = table("q", {{"a", Grade::exact}, {"b", Grade::irrelevant}, {"c", Grade::exact}});
  const RunRanking run{{"q", {"b", "c", "x", "a"}}};
  const auto four = evaluate_run(run, j, GainScheme::four_class, 10);
  const auto two = evaluate_run(run, j, GainScheme::two_class, 10);
  EXPECT_EQ(four.ndcg, two.ndcg);
  EXPECT_EQ(four.mrr, two.mrr);
}

TEST(Metrics, PositiveGainRelevanceCountsSubstitutes) {
  const auto j = table("q", {{"a", Grade::substitute}, {"b", Grade::exact}});
  const RunRanking run{{"q", {"a", "b"}}};
  EXPECT_EQ(evaluate_run(run, j, GainScheme::four_class, 10).mrr, 0.5);
  EXPECT_EQ(evaluate_run(run, j, GainScheme::four_class, 10, MrrRelevance::positive_gain).mrr, 1.0);
  EXPECT_EQ(evaluate_run(run, j, GainScheme::two_class, 10, MrrRelevance::positive_gain).mrr, 0.5);
}

TEST(Metrics, ReportJson) {
  const auto j = table("q", {{"a", Grade::exact}});
  const auto doc = nlohmann::json::parse(metric_report_to_json(evaluate_run({{"q", {"a"}}}, j, GainScheme::two_class, 5)));
  EXPECT_EQ(doc.at("scheme"), "two-class");
  EXPECT_EQ(doc.at("cutoff"), 5);
  EXPECT_EQ(doc.at("mrr"), 1.0);
  EXPECT_EQ(doc.at("ndcg"), 1.0);
  EXPECT_EQ(doc.at("per_query").at("q").at("mrr"), 1.0);
  EXPECT_EQ(doc.at("zero_ideal_count"), 0);
}

TEST(Geometry, Examples) {
  const Embedding x{1, 0}, y{0, 1};
  const auto orth = geometry({{x, x}}, {x, y});
  EXPECT_NEAR(orth.alignment, 0.0, 1e-15);
  EXPECT_NEAR(orth.uniformity, -4.0, 1e-12);
  const auto opposite = geometry({{x, Embedding{-3, 0}}}, {x, Embedding{5, 0}});
  EXPECT_NEAR(opposite.alignment, 4.0, 1e-12);
  EXPECT_NEAR(opposite.uniformity, 0.0, 1e-12);
  EXPECT_THROW(geometry({{x, Embedding{0, 0}}}, {x, y}), ValidationError);
  EXPECT_THROW(geometry({}, {x, y}), ValidationError);
  EXPECT_THROW(geometry({{x, y}}, {x}), ValidationError);
}

TEST(Geometry, UniformityIsLogMeanOverDistinctPairs) {
  const std::vector<Embedding> e{{1, 0}, {0, 1}, {-1, 0}};
  // Squared distances 2, 4 and 2.
  const double expected = std::log((std::exp(-4.0) + std::exp(-8.0) + std::exp(-4.0)) / 3.0);
  EXPECT_NEAR(geometry({{e[0], e[1]}}, e).uniformity, expected, 1e-12);
}

TEST(Export, OneTabSeparatedLinePerRow) {
  Index index;
  index.ids = {"a", "b"};
  index.modalities = {Modality::structured, Modality::unstructured};
  index.dim = 2;
  index.rows = {0.5f, -1.0f, 2.0f, 0.25f};
  EXPECT_EQ(format_embeddings(index), "a\tstructured\t0.5\t-1\nb\tunstructured\t2\t0.25\n");
  testing::TempDir dir;
  export_embeddings(index, dir.file("e.tsv"));
  EXPECT_EQ(read_file(dir.file("e.tsv")), format_embeddings(index));
}

}  // namespace
}  // namespace structret
