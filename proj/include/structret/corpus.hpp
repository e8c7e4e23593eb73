#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "structret/common.hpp"

namespace structret {

enum class Modality { structured, unstructured };
enum class DocKind { code, product, passage, query };
enum class Grade { exact, substitute, complement, irrelevant };

std::string to_string(Modality m);
std::string to_string(DocKind k);
std::string to_string(Grade g);
Modality parse_modality(const std::string& s);
DocKind parse_kind(const std::string& s);
Grade parse_grade(const std::string& s);
// qrels integer: Exact 3, Substitute 2, Complement 1, Irrelevant 0.
int grade_to_int(Grade g);
Grade grade_from_int(int v);

struct Document {
  std::string id;
  Modality modality = Modality::structured;
  DocKind kind = DocKind::code;
  std::optional<std::string> title;
  std::string body;
  std::optional<std::string> lang_tag;
  // Structured doc -> id of its linked unstructured text (code docstring).
  std::optional<std::string> doc_link;
  // Product bullet points, stored on the product record.
  std::vector<std::string> bullets;

  bool operator==(const Document&) const = default;
};

struct Query {
  std::string id;
  std::string text;
  bool operator==(const Query&) const = default;
};

struct TrainingPair {
  std::string passage_id;
  std::string doc_id;
  bool operator==(const TrainingPair&) const = default;
};

struct Judgment {
  std::string query_id;
  std::string doc_id;
  Grade grade = Grade::irrelevant;
  bool operator==(const Judgment&) const = default;
};

// Insertion-ordered collection with unique ids.
template <typename T>
class Collection {
 public:
  Collection() = default;

  // Throws ValidationError on duplicate id.
  void add(T item);
  const T* find(const std::string& id) const;
  const T& at(const std::string& id) const;
  bool contains(const std::string& id) const { return index_.count(id) != 0; }

  const std::vector<T>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  auto begin() const { return items_.begin(); }
  auto end() const { return items_.end(); }

  bool operator==(const Collection& other) const { return items_ == other.items_; }

 private:
  std::vector<T> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename T>
void Collection<T>::add(T item) {
  const std::string id = item.id;
  if (!index_.emplace(id, items_.size()).second) {
    throw ValidationError("duplicate id: " + id);
  }
  items_.push_back(std::move(item));
}

template <typename T>
const T* Collection<T>::find(const std::string& id) const {
  auto it = index_.find(id);
  return it == index_.end() ? nullptr : &items_[it->second];
}

template <typename T>
const T& Collection<T>::at(const std::string& id) const {
  const T* item = find(id);
  if (item == nullptr) throw ValidationError("unknown id: " + id);
  return *item;
}

using DocumentCollection = Collection<Document>;
using QueryCollection = Collection<Query>;

// Train/dev/test partition over pair (structured doc) ids.
struct Split {
  std::vector<std::string> train;
  std::vector<std::string> dev;
  std::vector<std::string> test;
  bool operator==(const Split&) const = default;
};

// JSONL loaders. Malformed lines raise ParseError with the line number;
// duplicate ids name the id and line; dangling references name both ids.
DocumentCollection load_documents(const std::string& path);
QueryCollection load_queries(const std::string& path);
std::vector<TrainingPair> load_pairs(const std::string& path, const DocumentCollection& docs);
std::vector<Judgment> load_judgments(const std::string& path, const QueryCollection& queries,
                                     const DocumentCollection& docs);
// Reference checks skipped; used when the judged docs are not at hand.
std::vector<Judgment> load_judgments_unchecked(const std::string& path);
Split load_split(const std::string& path, const DocumentCollection& docs);

std::string documents_to_jsonl(const DocumentCollection& docs);
std::string queries_to_jsonl(const QueryCollection& queries);
std::string pairs_to_jsonl(const std::vector<TrainingPair>& pairs);
std::string judgments_to_jsonl(const std::vector<Judgment>& judgments);
std::string split_to_json(const Split& split);
// `query_id 0 doc_id grade_int` per line.
std::string judgments_to_qrels(const std::vector<Judgment>& judgments);
std::vector<Judgment> parse_qrels(const std::string& text);

// Converts CodeSearchNet-style records (code, docstring, language, func_name, ...)
// into a code document plus a linked docstring passage per record.
DocumentCollection load_codesearchnet(const std::string& path);

struct PairBuildResult {
  std::vector<TrainingPair> pairs;
  // Chosen product bullet points, materialized as unstructured documents.
  std::vector<Document> transient_passages;
  std::vector<std::string> skipped;
};

// One pair per code doc (its linked docstring); one pair per product with a
// bullet chosen uniformly at random under `seed`.
PairBuildResult build_pairs(const DocumentCollection& docs, std::uint64_t seed);

struct SyntheticCorpus {
  DocumentCollection documents;
  std::vector<TrainingPair> pairs;
  QueryCollection queries;
  std::vector<Judgment> judgments;
  Split split;
};

struct SyntheticOptions {
  std::uint64_t seed = 7;
  std::size_t n_pairs = 256;
  // Number of latent concepts shared between the two modalities.
  std::size_t vocab_size = 40;
  // Trailing pairs held out as the test split.
  std::size_t heldout = 64;
};

// Code documents built from latent concept sets, linked docstrings, and
// paraphrase queries. Pure function of the options.
SyntheticCorpus generate_synthetic(const SyntheticOptions& options);

}  // namespace structret
