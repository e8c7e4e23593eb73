#include <algorithm>
#include <array>
#include <set>
#include <string>

#include "structret/corpus.hpp"

namespace structret {

namespace {

constexpr std::array<const char*, 14> kConsonants = {"b", "d", "f", "g", "k", "l", "m",
                                                     "n", "p", "r", "s", "t", "v", "z"};
constexpr std::array<const char*, 5> kVowels = {"a", "e", "i", "o", "u"};

constexpr std::array<const char*, 12> kPassageFillers = {
    "returns", "the", "value", "of", "given", "computes", "with", "and", "a", "for", "using",
    "result"};
constexpr std::array<const char*, 9> kQueryFillers = {"how",  "to",    "find",     "get", "code",
                                                      "that", "which", "function", "for"};

std::string syllables(Rng& rng, int n) {
  std::string out;
  for (int i = 0; i < n; ++i) {
    out += kConsonants[rng.uniform_below(kConsonants.size())];
    out += kVowels[rng.uniform_below(kVowels.size())];
  }
  return out;
}

struct Concept {
  std::string word;        // natural-language surface
  std::string identifier;  // code surface
  int literal = 0;         // constant that accompanies the identifier in code
};

std::vector<Concept> make_concepts(Rng& rng, std::size_t n) {
  std::vector<Concept> concepts(n);
  std::set<std::string> used;
  for (auto& c : concepts) {
    do {
      c.word = syllables(rng, 3);
    } while (!used.insert(c.word).second);
    do {
      c.identifier = syllables(rng, 2) + "_" + syllables(rng, 2);
    } while (!used.insert(c.identifier).second);
  }
  // Distinct three-digit literals.
  auto literals = rng.sample_without_replacement(900, n);
  for (std::size_t i = 0; i < n; ++i) concepts[i].literal = static_cast<int>(100 + literals[i]);
  return concepts;
}

std::string padded(const char* prefix, std::size_t i) {
  std::string digits = std::to_string(i);
  if (digits.size() < 4) digits.insert(0, 4 - digits.size(), '0');
  return prefix + digits;
}

template <std::size_t N>
std::string filler_sentence(Rng& rng, const std::array<const char*, N>& fillers,
                            const std::vector<std::string>& content, std::size_t n_fillers) {
  std::vector<std::string> words = content;
  for (std::size_t i = 0; i < n_fillers; ++i) words.emplace_back(fillers[rng.uniform_below(N)]);
  rng.shuffle(words);
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticOptions& options) {
  if (options.n_pairs < 1) throw ValidationError("n_pairs must be >= 1");
  if (options.vocab_size < 16) throw ValidationError("vocab_size must be >= 16");
  if (options.heldout > options.n_pairs) throw ValidationError("heldout exceeds n_pairs");

  Rng rng(options.seed);
  const std::size_t n_concepts = options.vocab_size;
  const std::size_t n_topics = std::max<std::size_t>(2, n_concepts / 8);
  const auto concepts = make_concepts(rng, n_concepts);

  std::vector<std::vector<std::size_t>> topic_members(n_topics);
  for (std::size_t c = 0; c < n_concepts; ++c) topic_members[c % n_topics].push_back(c);

  SyntheticCorpus out;
  std::set<std::vector<std::size_t>> used_sets;
  std::vector<std::size_t> pair_topic(options.n_pairs);

  for (std::size_t i = 0; i < options.n_pairs; ++i) {
    std::size_t topic = 0;
    std::vector<std::size_t> picked;
    bool found = false;
    for (int attempt = 0; attempt < 10000 && !found; ++attempt) {
      topic = rng.uniform_below(n_topics);
      const auto& members = topic_members[topic];
      picked.clear();
      for (auto k : rng.sample_without_replacement(members.size(), 3)) picked.push_back(members[k]);
      auto key = picked;
      std::sort(key.begin(), key.end());
      found = used_sets.insert(key).second;
    }
    if (!found) {
      throw ValidationError("vocab_size too small for " + std::to_string(options.n_pairs) +
                            " distinct concept sets");
    }
    pair_topic[i] = topic;
    const Concept& fn = concepts[picked[0]];
    const Concept& a = concepts[picked[1]];
    const Concept& b = concepts[picked[2]];
    const char* op = rng.uniform_below(2) == 0 ? "+" : "-";

    Document passage;
    passage.id = padded("p", i);
    passage.modality = Modality::unstructured;
    passage.kind = DocKind::passage;
    passage.body = filler_sentence(rng, kPassageFillers, {fn.word, a.word, b.word}, 3);

    Document code;
    code.id = padded("d", i);
    code.modality = Modality::structured;
    code.kind = DocKind::code;
    code.lang_tag = "python";
    code.doc_link = passage.id;
    code.body = "def " + fn.identifier + "(" + a.identifier + ", " + b.identifier + "):\n    return " +
                a.identifier + " * " + std::to_string(a.literal) + " " + op + " " + b.identifier +
                " * " + std::to_string(b.literal) + " - " + std::to_string(fn.literal) + "\n";

    Query query{padded("q", i),
                filler_sentence(rng, kQueryFillers, {fn.word, a.word, b.word}, 2)};

    out.pairs.push_back({passage.id, code.id});
    out.documents.add(std::move(code));
    out.documents.add(std::move(passage));
    out.queries.add(std::move(query));
  }

  for (std::size_t i = 0; i < options.n_pairs; ++i) {
    const std::string qid = padded("q", i);
    out.judgments.push_back({qid, padded("d", i), Grade::exact});
    std::vector<std::size_t> others;
    for (std::size_t j = 0; j < options.n_pairs; ++j) {
      if (j == i) continue;
      if (pair_topic[j] == pair_topic[i]) {
        out.judgments.push_back({qid, padded("d", j), Grade::substitute});
      } else {
        others.push_back(j);
      }
    }
    for (auto k : rng.sample_without_replacement(others.size(), 2)) {
      out.judgments.push_back({qid, padded("d", others[k]), Grade::irrelevant});
    }
  }

  const std::size_t n_train = options.n_pairs - options.heldout;
  for (std::size_t i = 0; i < options.n_pairs; ++i) {
    (i < n_train ? out.split.train : out.split.test).push_back(padded("d", i));
  }
  return out;
}

}  // namespace structret
