#include "structret/corpus.hpp"

#include <set>
#include <sstream>

#include <json.hpp>

namespace structret {

using nlohmann::json;

std::string to_string(Modality m) {
  return m == Modality::structured ? "structured" : "unstructured";
}

std::string to_string(DocKind k) {
  switch (k) {
    case DocKind::code: return "code";
    case DocKind::product: return "product";
    case DocKind::passage: return "passage";
    case DocKind::query: return "query";
  }
  return "passage";
}

std::string to_string(Grade g) {
  switch (g) {
    case Grade::exact: return "Exact";
    case Grade::substitute: return "Substitute";
    case Grade::complement: return "Complement";
    case Grade::irrelevant: return "Irrelevant";
  }
  return "Irrelevant";
}

Modality parse_modality(const std::string& s) {
  if (s == "structured") return Modality::structured;
  if (s == "unstructured") return Modality::unstructured;
  throw ValidationError("unknown modality: " + s);
}

DocKind parse_kind(const std::string& s) {
  if (s == "code") return DocKind::code;
  if (s == "product") return DocKind::product;
  if (s == "passage") return DocKind::passage;
  if (s == "query") return DocKind::query;
  throw ValidationError("unknown kind: " + s);
}

Grade parse_grade(const std::string& s) {
  if (s == "Exact" || s == "E") return Grade::exact;
  if (s == "Substitute" || s == "S") return Grade::substitute;
  if (s == "Complement" || s == "C") return Grade::complement;
  if (s == "Irrelevant" || s == "I") return Grade::irrelevant;
  throw ValidationError("unknown grade: " + s);
}

int grade_to_int(Grade g) {
  switch (g) {
    case Grade::exact: return 3;
    case Grade::substitute: return 2;
    case Grade::complement: return 1;
    case Grade::irrelevant: return 0;
  }
  return 0;
}

Grade grade_from_int(int v) {
  switch (v) {
    case 3: return Grade::exact;
    case 2: return Grade::substitute;
    case 1: return Grade::complement;
    case 0: return Grade::irrelevant;
    default: throw ValidationError("grade integer out of range: " + std::to_string(v));
  }
}

namespace {

// Calls fn(object, line_number) for every non-blank line.
template <typename Fn>
void for_each_json_line(const std::string& path, Fn&& fn) {
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ParseError(line_no, "expected a JSON object");
    try {
      fn(obj, line_no);
    } catch (const ParseError&) {
      throw;
    } catch (const ValidationError& e) {
      throw ParseError(line_no, e.what());
    } catch (const json::exception& e) {
      throw ParseError(line_no, std::string("schema mismatch: ") + e.what());
    }
  }
}

std::string required_string(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_string()) {
    throw ValidationError(std::string("missing string field '") + key + "'");
  }
  return it->get<std::string>();
}

std::optional<std::string> optional_string(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw ValidationError(std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

Document document_from_json(const json& obj) {
  Document d;
  d.id = required_string(obj, "id");
  if (d.id.empty()) throw ValidationError("empty id");
  d.modality = parse_modality(required_string(obj, "modality"));
  d.kind = parse_kind(required_string(obj, "kind"));
  d.title = optional_string(obj, "title");
  d.body = required_string(obj, "body");
  if (d.body.empty()) throw ValidationError("empty body for document " + d.id);
  d.lang_tag = optional_string(obj, "lang_tag");
  d.doc_link = optional_string(obj, "doc_link");
  if (auto it = obj.find("bullets"); it != obj.end() && !it->is_null()) {
    d.bullets = it->get<std::vector<std::string>>();
  }
  if (d.kind == DocKind::code && !d.lang_tag) {
    throw ValidationError("code document " + d.id + " has no lang_tag");
  }
  return d;
}

json document_to_json(const Document& d) {
  json obj = json::object();
  obj["id"] = d.id;
  obj["modality"] = to_string(d.modality);
  obj["kind"] = to_string(d.kind);
  if (d.title) obj["title"] = *d.title;
  obj["body"] = d.body;
  if (d.lang_tag) obj["lang_tag"] = *d.lang_tag;
  if (d.doc_link) obj["doc_link"] = *d.doc_link;
  if (!d.bullets.empty()) obj["bullets"] = d.bullets;
  return obj;
}

template <typename T>
void add_unique(Collection<T>& c, T item, std::size_t line_no) {
  if (c.contains(item.id)) {
    throw ParseError(line_no, "duplicate id '" + item.id + "'");
  }
  c.add(std::move(item));
}

}  // namespace

DocumentCollection load_documents(const std::string& path) {
  DocumentCollection docs;
  for_each_json_line(path, [&](const json& obj, std::size_t line_no) {
    add_unique(docs, document_from_json(obj), line_no);
  });
  return docs;
}

QueryCollection load_queries(const std::string& path) {
  QueryCollection queries;
  for_each_json_line(path, [&](const json& obj, std::size_t line_no) {
    Query q{required_string(obj, "id"), required_string(obj, "text")};
    if (q.id.empty()) throw ValidationError("empty id");
    if (q.text.empty()) throw ValidationError("empty text for query " + q.id);
    add_unique(queries, std::move(q), line_no);
  });
  return queries;
}

std::vector<TrainingPair> load_pairs(const std::string& path, const DocumentCollection& docs) {
  std::vector<TrainingPair> pairs;
  for_each_json_line(path, [&](const json& obj, std::size_t) {
    TrainingPair p{required_string(obj, "passage_id"), required_string(obj, "doc_id")};
    const Document* passage = docs.find(p.passage_id);
    const Document* doc = docs.find(p.doc_id);
    if (passage == nullptr || doc == nullptr) {
      throw ValidationError("dangling pair reference (passage_id '" + p.passage_id +
                            "', doc_id '" + p.doc_id + "')");
    }
    if (passage->modality != Modality::unstructured || doc->modality != Modality::structured) {
      throw ValidationError("pair (" + p.passage_id + ", " + p.doc_id +
                            ") must link an unstructured passage to a structured doc");
    }
    pairs.push_back(std::move(p));
  });
  return pairs;
}

namespace {

std::vector<Judgment> load_judgments_impl(const std::string& path, const QueryCollection* queries,
                                          const DocumentCollection* docs) {
  std::vector<Judgment> out;
  std::set<std::pair<std::string, std::string>> seen;
  for_each_json_line(path, [&](const json& obj, std::size_t line_no) {
    Judgment j;
    j.query_id = required_string(obj, "query_id");
    j.doc_id = required_string(obj, "doc_id");
    const auto& g = obj.at("grade");
    j.grade = g.is_number_integer() ? grade_from_int(g.get<int>()) : parse_grade(g.get<std::string>());
    if (queries != nullptr && docs != nullptr &&
        (!queries->contains(j.query_id) || !docs->contains(j.doc_id))) {
      throw ValidationError("dangling judgment reference (query_id '" + j.query_id +
                            "', doc_id '" + j.doc_id + "')");
    }
    if (!seen.emplace(j.query_id, j.doc_id).second) {
      throw ParseError(line_no, "duplicate judgment (" + j.query_id + ", " + j.doc_id + ")");
    }
    out.push_back(std::move(j));
  });
  return out;
}

}  // namespace

std::vector<Judgment> load_judgments(const std::string& path, const QueryCollection& queries,
                                     const DocumentCollection& docs) {
  return load_judgments_impl(path, &queries, &docs);
}

std::vector<Judgment> load_judgments_unchecked(const std::string& path) {
  return load_judgments_impl(path, nullptr, nullptr);
}

Split load_split(const std::string& path, const DocumentCollection& docs) {
  json obj;
  try {
    obj = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("malformed split file: ") + e.what());
  }
  Split split;
  auto read = [&](const char* key, std::vector<std::string>& dst) {
    if (auto it = obj.find(key); it != obj.end()) dst = it->get<std::vector<std::string>>();
  };
  read("train", split.train);
  read("dev", split.dev);
  read("test", split.test);
  std::set<std::string> seen;
  for (const auto* part : {&split.train, &split.dev, &split.test}) {
    for (const auto& id : *part) {
      if (!docs.contains(id)) throw ValidationError("split references unknown id: " + id);
      if (!seen.insert(id).second) throw ValidationError("split parts overlap on id: " + id);
    }
  }
  return split;
}

std::string documents_to_jsonl(const DocumentCollection& docs) {
  std::string out;
  for (const auto& d : docs) out += document_to_json(d).dump() + "\n";
  return out;
}

std::string queries_to_jsonl(const QueryCollection& queries) {
  std::string out;
  for (const auto& q : queries) out += json{{"id", q.id}, {"text", q.text}}.dump() + "\n";
  return out;
}

std::string pairs_to_jsonl(const std::vector<TrainingPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) {
    out += json{{"passage_id", p.passage_id}, {"doc_id", p.doc_id}}.dump() + "\n";
  }
  return out;
}

std::string judgments_to_jsonl(const std::vector<Judgment>& judgments) {
  std::string out;
  for (const auto& j : judgments) {
    out += json{{"query_id", j.query_id}, {"doc_id", j.doc_id}, {"grade", to_string(j.grade)}}.dump() +
           "\n";
  }
  return out;
}

std::string split_to_json(const Split& split) {
  return json{{"train", split.train}, {"dev", split.dev}, {"test", split.test}}.dump() + "\n";
}

std::string judgments_to_qrels(const std::vector<Judgment>& judgments) {
  std::string out;
  for (const auto& j : judgments) {
    out += j.query_id + " 0 " + j.doc_id + " " + std::to_string(grade_to_int(j.grade)) + "\n";
  }
  return out;
}

std::vector<Judgment> parse_qrels(const std::string& text) {
  std::vector<Judgment> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::string qid, iter, did;
    int grade = 0;
    if (!(fields >> qid)) continue;
    if (!(fields >> iter >> did >> grade)) throw ParseError(line_no, "malformed qrels line");
    try {
      out.push_back({qid, did, grade_from_int(grade)});
    } catch (const ValidationError& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return out;
}

DocumentCollection load_codesearchnet(const std::string& path) {
  DocumentCollection docs;
  for_each_json_line(path, [&](const json& obj, std::size_t line_no) {
    const std::string code = required_string(obj, "code");
    const std::string language = required_string(obj, "language");
    const std::string docstring = optional_string(obj, "docstring").value_or("");
    const auto func_name = optional_string(obj, "func_name");
    if (code.empty()) throw ValidationError("empty code field");

    const std::string id = "csn-" + std::to_string(line_no);
    Document code_doc;
    code_doc.id = id;
    code_doc.modality = Modality::structured;
    code_doc.kind = DocKind::code;
    code_doc.title = func_name;
    code_doc.body = code;
    code_doc.lang_tag = language;
    if (docstring.find_first_not_of(" \t\r\n") != std::string::npos) {
      code_doc.doc_link = id + "/doc";
    }
    const auto link = code_doc.doc_link;
    add_unique(docs, std::move(code_doc), line_no);
    if (link) {
      Document passage;
      passage.id = *link;
      passage.modality = Modality::unstructured;
      passage.kind = DocKind::passage;
      passage.body = docstring;
      add_unique(docs, std::move(passage), line_no);
    }
  });
  return docs;
}

PairBuildResult build_pairs(const DocumentCollection& docs, std::uint64_t seed) {
  PairBuildResult result;
  Rng rng(seed);
  for (const auto& d : docs) {
    if (d.modality != Modality::structured) continue;
    if (d.kind == DocKind::product) {
      if (d.bullets.empty()) {
        result.skipped.push_back(d.id);
        continue;
      }
      const std::size_t pick = rng.uniform_below(d.bullets.size());
      Document passage;
      passage.id = d.id + "#bullet" + std::to_string(pick);
      passage.modality = Modality::unstructured;
      passage.kind = DocKind::passage;
      passage.body = d.bullets[pick];
      result.pairs.push_back({passage.id, d.id});
      result.transient_passages.push_back(std::move(passage));
      continue;
    }
    const Document* linked = d.doc_link ? docs.find(*d.doc_link) : nullptr;
    if (linked == nullptr || linked->modality != Modality::unstructured) {
      result.skipped.push_back(d.id);
      continue;
    }
    result.pairs.push_back({linked->id, d.id});
  }
  return result;
}

}  // namespace structret
