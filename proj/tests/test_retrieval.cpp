#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "structret/retrieval.hpp"
#include "structret/trainer.hpp"
#include "test_util.hpp"

namespace structret {
namespace {

Index make_index(const std::vector<std::string>& ids, const std::vector<std::vector<float>>& rows) {
  Index index;
  index.ids = ids;
  index.modalities.assign(ids.size(), Modality::structured);
  index.dim = rows.front().size();
  for (const auto& r : rows) index.rows.insert(index.rows.end(), r.begin(), r.end());
  index.fingerprint = "fp";
  return index;
}

Index random_index(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::string> ids;
  std::vector<std::vector<float>> rows;
  for (std::size_t i = 0; i < n; ++i) {
    ids.push_back("doc" + std::to_string(i));
    std::vector<float> r(dim);
    for (auto& v : r) v = static_cast<float>(rng.normal());
    rows.push_back(r);
  }
  return make_index(ids, rows);
}

TEST(Search, RanksByDotProduct) {
  const auto index = make_index({"a", "b"}, {{1, 0}, {2, 0}});
  const auto results = search(index, {1.0, 0.0}, 10);
  ASSERT_EQ(results.size(), 2u);
  EXPECT_EQ(results[0], (SearchResult{"b", 2.0, 1}));
  EXPECT_EQ(results[1], (SearchResult{"a", 1.0, 2}));
}

TEST(Search, TiesBreakByDocId) {
  const auto index = make_index({"z", "m", "a"}, {{1, 0}, {1, 0}, {1, 0}});
  const auto results = search(index, {1.0, 0.0}, 3);
  EXPECT_EQ(results[0].doc_id, "a");
  EXPECT_EQ(results[1].doc_id, "m");
  EXPECT_EQ(results[2].doc_id, "z");
}

TEST(Search, PrefixConsistentAndSortedAgainstBruteForce) {
  const auto index = random_index(50, 6, 3);
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    Embedding q(6);
    for (auto& v : q) v = rng.normal();
    const auto full = search(index, q, 50);
    std::vector<std::pair<double, std::string>> oracle;
    for (std::size_t i = 0; i < index.size(); ++i) oracle.emplace_back(-similarity(q, index.row(i)), index.ids[i]);
    std::sort(oracle.begin(), oracle.end());
    for (std::size_t r = 0; r < full.size(); ++r) {
      EXPECT_EQ(full[r].doc_id, oracle[r].second);
      EXPECT_EQ(full[r].rank, r + 1);
    }
    for (std::size_t k : {1u, 5u, 17u}) {
      const auto top = search(index, q, k);
      EXPECT_TRUE(std::equal(top.begin(), top.end(), full.begin()));
    }
  }
}

TEST(Search, KLargerThanIndexReturnsAll) {
  const auto index = random_index(5, 3, 1);
  EXPECT_EQ(search(index, {1, 1, 1}, 100).size(), 5u);
  EXPECT_THROW(search(index, {1, 1, 1}, 0), ValidationError);
  EXPECT_THROW(search(index, {1, 1}, 3), ValidationError);
}

TEST(Search, FingerprintMismatchNeedsForce) {
  const auto index = random_index(4, 3, 2);
  EXPECT_THROW(search(index, {1, 0, 0}, 2, "other", false), ValidationError);
  EXPECT_EQ(search(index, {1, 0, 0}, 2, "other", true), search(index, {1, 0, 0}, 2));
  EXPECT_NO_THROW(search(index, {1, 0, 0}, 2, "fp", false));
}

TEST(Mining, ExcludesPositivesAndStaysInPool) {
  const auto index = random_index(30, 4, 5);
  const Embedding q{1, 0.5, -0.2, 0.1};
  const auto top = search(index, q, 10);
  std::set<std::string> pool_ids;
  for (const auto& r : top) pool_ids.insert(r.doc_id);
  const std::set<std::string> positives{top[0].doc_id, top[3].doc_id};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto neg = mine_hard_negatives(index, q, positives, 10, 3, seed);
    ASSERT_EQ(neg.size(), 3u);
    for (const auto& id : neg) {
      EXPECT_TRUE(pool_ids.count(id));
      EXPECT_FALSE(positives.count(id));
    }
    EXPECT_EQ(neg, mine_hard_negatives(index, q, positives, 10, 3, seed));
  }
}

TEST(Mining, ExhaustedPoolReturnsEverything) {
  const auto index = random_index(3, 2, 6);
  const auto top = search(index, {1, 1}, 3);
  const auto neg = mine_hard_negatives(index, {1, 1}, {top[1].doc_id}, 3, 3, 1);
  EXPECT_EQ(neg, (std::vector<std::string>{top[0].doc_id, top[2].doc_id}));
  EXPECT_THROW(mine_hard_negatives(index, {1, 1}, {}, 2, 3, 1), ValidationError);
  EXPECT_THROW(mine_hard_negatives(Index{}, {1, 1}, {}, 2, 1, 1), ValidationError);
}

TEST(IndexFile, RoundTripAndCorruption) {
  testing::TempDir dir;
  auto index = random_index(7, 5, 8);
  index.modalities[2] = Modality::unstructured;
  save_index(index, dir.file("index.bin"));
  EXPECT_EQ(load_index(dir.file("index.bin")), index);
  const auto bytes = serialize_index(index);
  EXPECT_THROW(deserialize_index(bytes.substr(0, bytes.size() - 1)), ValidationError);
  EXPECT_THROW(deserialize_index(bytes + "x"), ValidationError);
  EXPECT_THROW(deserialize_index("JUNK"), ValidationError);
}

TEST(BuildIndex, MatchesDirectEncodingAndThreadCount) {
  SyntheticOptions opts;
  opts.n_pairs = 12;
  opts.vocab_size = 16;
  opts.heldout = 0;
  const auto corpus = generate_synthetic(opts);
  const auto vocab = build_vocabulary(corpus.documents, &corpus.queries, 1);
  EncoderConfig c;
  c.vocab_size = vocab.size();
  c.d_model = 8;
  c.n_layers = 1;
  c.ffn_dim = 16;
  c.max_len = 48;
  const auto params = ModelParams::initialize(c);
  const auto& docs = corpus.documents.items();
  const auto one = build_index(params, vocab, docs, 1);
  EXPECT_EQ(build_index(params, vocab, docs, 3), one);
  EXPECT_EQ(one.fingerprint, checkpoint_fingerprint(params));
  ASSERT_EQ(one.size(), docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    EXPECT_EQ(one.ids[i], docs[i].id);
    const auto direct = encode_representation(params, encode_document(docs[i], vocab, c.max_len));
    for (std::size_t j = 0; j < c.d_model; ++j) EXPECT_NEAR(one.row(i)[j], direct[j], 1e-6 * (1 + std::abs(direct[j])));
  }
}

TEST(TrecRun, FormatAndParse) {
  const std::vector<SearchResult> results{{"d2", 1.5, 1}, {"d1", 0.25, 2}};
  const auto text = format_trec_run("q1", results, "tag");
  EXPECT_EQ(text, "q1 Q0 d2 1 1.5 tag\nq1 Q0 d1 2 0.25 tag\n");
  EXPECT_EQ(parse_trec_run(text).at("q1"), (std::vector<std::string>{"d2", "d1"}));
  EXPECT_THROW(parse_trec_run("q1 Q0 d2 1 1.5\n"), ParseError);
  EXPECT_THROW(parse_trec_run("q1 Q0 d2 1 1 t\nq1 Q0 d2 2 0 t\n"), ParseError);
  EXPECT_THROW(parse_trec_run("q1 Q0 d2 2 1 t\nq1 Q0 d3 1 0 t\n"), ParseError);
}

}  // namespace
}  // namespace structret
