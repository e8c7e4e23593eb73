#include "structret/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "structret/corpus.hpp"
#include "structret/evalkit.hpp"
#include "structret/masker.hpp"
#include "structret/retrieval.hpp"
#include "structret/structparse.hpp"
#include "structret/trainer.hpp"

namespace structret {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Configuration

struct CommandSpec {
  std::string name;
  std::string help;
  bool stochastic = false;
  ordered_json defaults;
  // Keys naming files or directories. Excluded from the config hash so that
  // relocating inputs or outputs does not change it.
  std::set<std::string> paths;
};

const std::vector<CommandSpec>& command_specs() {
  static const std::vector<CommandSpec> specs = [] {
    std::vector<CommandSpec> s;
    s.push_back({"gen-data", "Generate the seeded synthetic corpus", true,
                 {{"out", nullptr}, {"n_pairs", 256}, {"concepts", 40}, {"heldout", 64}}, {"out"}});
    s.push_back({"extract", "Extract entities from structured documents", false,
                 {{"corpus", nullptr}, {"input", nullptr}, {"format", "jsonl"}, {"out", nullptr}},
                 {"corpus", "input", "out"}});
    s.push_back({"mask", "Build masked entity prediction examples", false,
                 {{"corpus", nullptr},
                  {"entities", nullptr},
                  {"out", nullptr},
                  {"strategy", "entity"},
                  {"span_rate", 0.15}},
                 {"corpus", "entities", "out"}});
    s.push_back({"pretrain", "Pretrain with structured data alignment and masked entity prediction", true,
                 {{"corpus", nullptr},
                  {"masked", nullptr},
                  {"out", nullptr},
                  {"d_model", 64},
                  {"n_layers", 2},
                  {"n_heads", 2},
                  {"ffn_dim", 128},
                  {"max_len", 128},
                  {"batch_size", 16},
                  {"lr", 3e-3},
                  {"warmup", 0.1},
                  {"steps", 500},
                  {"clip_norm", 1.0},
                  {"sda", true},
                  {"mep", true},
                  {"sda_uses_masked_input", false},
                  {"masking", "entity"},
                  {"span_rate", 0.15}},
                 {"corpus", "masked", "out"}});
    s.push_back({"finetune", "Finetune on query/document pairs", true,
                 {{"corpus", nullptr},
                  {"model", nullptr},
                  {"negatives", nullptr},
                  {"out", nullptr},
                  {"batch_size", 16},
                  {"lr", 1e-3},
                  {"warmup", 0.1},
                  {"steps", 200},
                  {"clip_norm", 1.0},
                  {"negative_pool", "inbatch"},
                  {"hard_negatives_per_query", 1}},
                 {"corpus", "model", "negatives", "out"}});
    s.push_back({"mine", "Mine hard negatives from top search results", true,
                 {{"corpus", nullptr}, {"model", nullptr}, {"out", nullptr}, {"pool", 100}, {"n", 1},
                  {"split", "train"}},
                 {"corpus", "model", "out"}});
    s.push_back({"index", "Encode structured documents into an index", false,
                 {{"corpus", nullptr}, {"model", nullptr}, {"out", nullptr}, {"split", "all"}, {"export", false}},
                 {"corpus", "model", "out"}});
    s.push_back({"search", "Search an index and write a TREC run", false,
                 {{"index", nullptr},
                  {"model", nullptr},
                  {"corpus", nullptr},
                  {"out", nullptr},
                  {"k", 100},
                  {"tag", "structret"},
                  {"source", "queries"},
                  {"split", "test"},
                  {"force", false}},
                 {"index", "model", "corpus", "out"}});
    s.push_back({"eval", "Score a TREC run against graded judgments", false,
                 {{"run", nullptr},
                  {"corpus", nullptr},
                  {"out", nullptr},
                  {"scheme", "four-class"},
                  {"cutoff", 100},
                  {"mrr_relevant", "exact"},
                  {"judgments", "queries"}},
                 {"run", "corpus", "out"}});
    s.push_back({"diagnose", "Embedding geometry and export on held-out pairs", false,
                 {{"corpus", nullptr}, {"model", nullptr}, {"out", nullptr}, {"split", "test"}},
                 {"corpus", "model", "out"}});
    s.push_back({"grad-check", "Compare analytic gradients with central differences", true,
                 {{"out", nullptr},
                  {"objective", "all"},
                  {"epsilon", 1e-4},
                  {"sample", 64},
                  {"tolerance", 1e-4},
                  {"d_model", 8},
                  {"n_layers", 1},
                  {"n_heads", 2},
                  {"ffn_dim", 16},
                  {"max_len", 32},
                  {"batch_size", 4}},
                 {"out"}});
    return s;
  }();
  return specs;
}

const CommandSpec& spec_for(const std::string& name) {
  for (const auto& s : command_specs()) {
    if (s.name == name) return s;
  }
  throw ValidationError("unknown command '" + name + "'");
}

// Converts a command-line string to the type of the key's default.
ordered_json coerce(const CommandSpec& spec, const std::string& key, const std::string& text) {
  const auto& def = spec.defaults.at(key);
  auto fail = [&] { return ValidationError("bad value '" + text + "' for " + spec.name + "." + key); };
  if (def.is_boolean()) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw fail();
  }
  if (def.is_number_integer()) {
    std::size_t used = 0;
    long long v = 0;
    try {
      v = std::stoll(text, &used);
    } catch (...) {
      throw fail();
    }
    if (used != text.size() || v < 0) throw fail();
    return v;
  }
  if (def.is_number_float()) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(text, &used);
    } catch (...) {
      throw fail();
    }
    if (used != text.size() || !std::isfinite(v)) throw fail();
    return v;
  }
  return text;
}

void set_key(const CommandSpec& spec, ordered_json& config, const std::string& key, const ordered_json& value) {
  if (key == "seed") {
    if (!value.is_number_unsigned() && !(value.is_number_integer() && value.get<long long>() >= 0)) {
      throw ValidationError("seed must be a non-negative integer");
    }
    config["seed"] = value;
    return;
  }
  if (key == "threads") {
    if (!value.is_number_integer() || value.get<long long>() < 1) throw ValidationError("threads must be >= 1");
    config["threads"] = value;
    return;
  }
  if (key == "strict_determinism") {
    if (!value.is_boolean()) throw ValidationError("strict_determinism must be a boolean");
    config["strict_determinism"] = value;
    return;
  }
  if (!spec.defaults.contains(key)) throw ValidationError("unknown key '" + key + "' for command " + spec.name);
  const auto& def = spec.defaults.at(key);
  const bool ok = def.is_null() ? (value.is_string() || value.is_null())
                  : def.is_boolean() ? value.is_boolean()
                  : def.is_number_integer() ? (value.is_number_integer() && value.get<long long>() >= 0)
                  : def.is_number() ? value.is_number()
                                    : value.is_string();
  if (!ok) throw ValidationError("wrong type for " + spec.name + "." + key + ": " + value.dump());
  config[key] = value;
}

ordered_json load_config_file(const std::string& path, const CommandSpec& spec) {
  ordered_json file;
  try {
    file = ordered_json::parse(read_file(path));
  } catch (const ordered_json::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
  if (!file.is_object()) throw ValidationError("config " + path + ": expected a JSON object");
  ordered_json merged = ordered_json::object();
  std::set<std::string> sections;
  for (const auto& s : command_specs()) sections.insert(s.name);
  for (const auto& [k, v] : file.items()) {
    if (sections.contains(k)) continue;
    merged[k] = v;
  }
  if (file.contains(spec.name)) {
    if (!file[spec.name].is_object()) throw ValidationError("config section '" + spec.name + "' must be an object");
    for (const auto& [k, v] : file[spec.name].items()) merged[k] = v;
  }
  return merged;
}

struct RunConfig {
  const CommandSpec* spec = nullptr;
  ordered_json values;

  bool has(const std::string& key) const { return values.contains(key) && !values[key].is_null(); }
  std::string path(const std::string& key) const {
    if (!has(key)) throw ValidationError(spec->name + ": missing required path '" + key + "'");
    return values[key].get<std::string>();
  }
  std::optional<std::string> optional_path(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    return values[key].get<std::string>();
  }
  std::string str(const std::string& key) const { return values.at(key).get<std::string>(); }
  std::size_t count(const std::string& key) const { return values.at(key).get<std::size_t>(); }
  double real(const std::string& key) const { return values.at(key).get<double>(); }
  bool flag(const std::string& key) const { return values.at(key).get<bool>(); }
  std::uint64_t seed() const {
    if (!has("seed")) throw ValidationError(spec->name + " is stochastic and requires --seed");
    return values["seed"].get<std::uint64_t>();
  }
  std::size_t threads() const {
    if (values.value("strict_determinism", false)) return 1;
    return values.value("threads", std::size_t{1});
  }

  // Non-path settings, used for the manifest and its hash.
  ordered_json hashed() const {
    ordered_json out = ordered_json::object();
    for (const auto& [k, v] : values.items()) {
      if (!spec->paths.contains(k)) out[k] = v;
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Outputs and provenance

class Workspace {
 public:
  Workspace(const RunConfig& config) : config_(config) {}

  // Records a file read by the command under a role name.
  std::string read(const std::string& role, const std::string& path) {
    if (!fs::is_regular_file(path)) throw ValidationError("input " + role + " not found: " + path);
    record_input(role, path);
    return read_file(path);
  }
  std::string input_path(const std::string& role, const std::string& path) {
    if (!fs::is_regular_file(path)) throw ValidationError("input " + role + " not found: " + path);
    record_input(role, path);
    return path;
  }

  void record_input(const std::string& role, const std::string& path) {
    const auto dir = fs::weakly_canonical(path).parent_path().string();
    if (!out_dir_.empty() && fs::weakly_canonical(out_dir_).string() == dir) {
      throw ValidationError("output directory " + out_dir_ + " holds inputs of this run");
    }
    inputs_[role] = file_fingerprint(path);
    input_dirs_.insert(dir);
  }

  void open_output(const std::string& dir) {
    out_dir_ = dir;
    if (!fs::exists(dir)) {
      fs::create_directories(dir);
      created_dir_ = true;
    } else if (!fs::is_directory(dir)) {
      throw ValidationError("output path is not a directory: " + dir);
    }
  }

  void write_now(const std::string& name, const std::string& contents) {
    const auto path = output_path(name);
    write_file(path, contents);
    written_.push_back(path);
  }

  std::string output_path(const std::string& name) {
    if (out_dir_.empty()) throw std::logic_error("output directory not opened");
    const auto dir = fs::weakly_canonical(out_dir_).string();
    if (input_dirs_.contains(dir)) throw ValidationError("output directory " + out_dir_ + " holds inputs of this run");
    return (fs::path(out_dir_) / name).string();
  }

  // Staged in memory; nothing reaches the output directory until commit().
  void write(const std::string& name, std::string_view contents) {
    output_path(name);
    pending_.emplace_back(name, std::string(contents));
  }

  // Writes the staged outputs, then the manifest with their fingerprints.
  void commit() {
    for (const auto& [name, contents] : pending_) {
      outputs_[name] = hex64(fnv1a64(contents));
      write_now(name, contents);
    }
    ordered_json m;
    m["command"] = config_.spec->name;
    m["tool_version"] = kToolVersion;
    const auto hashed = config_.hashed();
    m["config"] = hashed;
    m["config_hash"] = hex64(fnv1a64(hashed.dump()));
    m["inputs"] = inputs_;
    m["outputs"] = outputs_;
    write_now("manifest.json", m.dump(2) + "\n");
  }

  void rollback() {
    pending_.clear();
    for (auto it = written_.rbegin(); it != written_.rend(); ++it) {
      std::error_code ec;
      fs::remove(*it, ec);
    }
    if (created_dir_) {
      std::error_code ec;
      fs::remove(out_dir_, ec);  // only succeeds when empty
    }
  }

 private:
  const RunConfig& config_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
  std::set<std::string> input_dirs_;
  std::vector<std::pair<std::string, std::string>> pending_;
  std::vector<std::string> written_;
  std::string out_dir_;
  bool created_dir_ = false;
};

// ---------------------------------------------------------------------------
// Corpus and model loading

struct Corpus {
  DocumentCollection documents;
  std::vector<TrainingPair> pairs;
  QueryCollection queries;
  std::vector<Judgment> judgments;
  std::optional<Split> split;
};

Corpus load_corpus(Workspace& ws, const std::string& dir, bool need_pairs, bool need_queries) {
  Corpus c;
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw ValidationError("corpus directory not found: " + dir);
  c.documents = load_documents(ws.input_path("corpus/documents.jsonl", (root / "documents.jsonl").string()));
  const auto pairs = root / "pairs.jsonl";
  if (fs::exists(pairs)) {
    c.pairs = load_pairs(ws.input_path("corpus/pairs.jsonl", pairs.string()), c.documents);
  } else if (need_pairs) {
    throw ValidationError("corpus has no pairs.jsonl: " + dir);
  }
  const auto queries = root / "queries.jsonl";
  if (fs::exists(queries)) {
    c.queries = load_queries(ws.input_path("corpus/queries.jsonl", queries.string()));
    const auto judgments = root / "judgments.jsonl";
    if (fs::exists(judgments)) {
      c.judgments =
          load_judgments(ws.input_path("corpus/judgments.jsonl", judgments.string()), c.queries, c.documents);
    }
  }
  if (need_queries && (c.queries.empty() || c.judgments.empty())) {
    throw ValidationError("corpus needs queries.jsonl and judgments.jsonl: " + dir);
  }
  const auto split = root / "split.json";
  if (fs::exists(split)) c.split = load_split(ws.input_path("corpus/split.json", split.string()), c.documents);
  return c;
}

// Structured doc ids in the requested split ("all", "train", "dev", "test").
std::set<std::string> split_ids(const Corpus& c, const std::string& which) {
  std::set<std::string> ids;
  if (which == "all") {
    for (const auto& d : c.documents) {
      if (d.modality == Modality::structured) ids.insert(d.id);
    }
    return ids;
  }
  if (!c.split) throw ValidationError("split '" + which + "' requested but the corpus has no split.json");
  const auto& list = which == "train" ? c.split->train
                     : which == "dev" ? c.split->dev
                     : which == "test" ? c.split->test
                                       : throw ValidationError("unknown split '" + which + "'");
  ids.insert(list.begin(), list.end());
  return ids;
}

// Queries whose exact-judged docs all lie in `ids`.
std::vector<const Query*> queries_in(const Corpus& c, const std::set<std::string>& ids) {
  std::map<std::string, bool> inside;
  for (const auto& j : c.judgments) {
    if (j.grade != Grade::exact) continue;
    auto [it, fresh] = inside.emplace(j.query_id, true);
    it->second = it->second && ids.contains(j.doc_id);
  }
  std::vector<const Query*> out;
  for (const auto& q : c.queries) {
    auto it = inside.find(q.id);
    if (it != inside.end() && it->second) out.push_back(&q);
  }
  return out;
}

struct Model {
  ModelParams params;
  Vocabulary vocab;
};

Model load_model(Workspace& ws, const std::string& dir) {
  const fs::path root(dir);
  Model m;
  m.params = deserialize_checkpoint(ws.read("model/model.ckpt", (root / "model.ckpt").string()));
  m.vocab = Vocabulary::from_text(ws.read("model/vocab.txt", (root / "vocab.txt").string()));
  if (m.vocab.size() != m.params.config.vocab_size) {
    throw ValidationError("vocabulary size " + std::to_string(m.vocab.size()) + " does not match checkpoint " +
                          std::to_string(m.params.config.vocab_size));
  }
  return m;
}

void save_model(Workspace& ws, const Model& m) {
  ws.write("model.ckpt", serialize_checkpoint(m.params));
  ws.write("vocab.txt", m.vocab.to_text());
}

std::vector<Document> structured_docs(const Corpus& c, const std::set<std::string>& ids) {
  std::vector<Document> out;
  for (const auto& d : c.documents) {
    if (d.modality == Modality::structured && ids.contains(d.id)) out.push_back(d);
  }
  return out;
}

std::string jsonl_of(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += l + "\n";
  return out;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") != std::string::npos) out.push_back(line);
  }
  return out;
}

TrainConfig train_config(const RunConfig& cfg) {
  TrainConfig tc;
  tc.batch_size = cfg.count("batch_size");
  tc.lr = cfg.real("lr");
  tc.warmup = cfg.real("warmup");
  tc.steps = cfg.count("steps");
  tc.seed = cfg.seed();
  tc.clip_norm = cfg.real("clip_norm");
  tc.objectives.threads = cfg.threads();
  if (tc.steps == 0) throw ValidationError("steps must be positive");
  if (tc.batch_size < 1) throw ValidationError("batch_size must be positive");
  return tc;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_data(const RunConfig& cfg, Workspace& ws, std::ostream& out) {
  SyntheticOptions opts;
  opts.seed = cfg.seed();
  opts.n_pairs = cfg.count("n_pairs");
  opts.vocab_size = cfg.count("concepts");
  opts.heldout = cfg.count("heldout");
  const auto corpus = generate_synthetic(opts);
  ws.open_output(cfg.path("out"));
  ws.write("documents.jsonl", documents_to_jsonl(corpus.documents));
  ws.write("pairs.jsonl", pairs_to_jsonl(corpus.pairs));
  ws.write("queries.jsonl", queries_to_jsonl(corpus.queries));
  ws.write("judgments.jsonl", judgments_to_jsonl(corpus.judgments));
  ws.write("qrels.txt", judgments_to_qrels(corpus.judgments));
  ws.write("split.json", split_to_json(corpus.split));
  out << "generated " << corpus.pairs.size() << " pairs, " << corpus.queries.size() << " queries\n";
}

void cmd_extract(const RunConfig& cfg, Workspace& ws, std::ostream& out) {
  const auto format = cfg.str("format");
  DocumentCollection docs;
  std::vector<TrainingPair> pairs;
  if (format == "codesearchnet") {
    docs = load_codesearchnet(ws.input_path("input", cfg.path("input")));
    pairs = build_pairs(docs, 0).pairs;
  } else if (format == "jsonl") {
    if (cfg.has("corpus")) {
      docs = load_corpus(ws, cfg.path("corpus"), false, false).documents;
    } else {
      docs = load_documents(ws.input_path("input", cfg.path("input")));
    }
  } else {
    throw ValidationError("unknown format '" + format + "' (expected jsonl or codesearchnet)");
  }
  std::vector<EntitySet> sets;
  std::vector<std::string> lines;
  for (const auto& d : docs) {
    if (d.modality != Modality::structured) continue;
    sets.push_back(extract_entities(d));
    lines.push_back(entity_set_to_json(sets.back()));
  }
  const auto stats = entity_stats(docs, sets);
  ordered_json s;
  s["documents"] = sets.size();
  s["stopword_list_version"] = stopword_list_version();
  s["entity_proportion"] = stats.per_kind;
  std::size_t zero = 0;
  for (const auto& set : sets) zero += set.spans.empty() ? 1 : 0;
  s["zero_entity_documents"] = zero;

  ws.open_output(cfg.path("out"));
  if (format == "codesearchnet") {
    ws.write("documents.jsonl", documents_to_jsonl(docs));
    ws.write("pairs.jsonl", pairs_to_jsonl(pairs));
  }
  ws.write("entities.jsonl", jsonl_of(lines));
  ws.write("stats.json", s.dump(2) + "\n");
  out << "extracted entities from " << sets.size() << " structured documents\n";
}

void cmd_mask(const RunConfig& cfg, Workspace& ws, std::ostream& out) {
  const auto corpus = load_corpus(ws, cfg.path("corpus"), false, false);
  const auto strategy = cfg.str("strategy");
  std::vector<std::string> lines;
  std::size_t zero = 0;
  if (strategy == "entity") {
    const auto text = ws.read("entities", (fs::path(cfg.path("entities")) / "entities.jsonl").string());
    for (const auto& line : lines_of(text)) {
      const auto set = entity_set_from_json(line);
      const auto ex = mask_entities(corpus.documents.at(set.doc_id), set);
      zero += ex.target.empty() ? 1 : 0;
      lines.push_back(masked_example_to_json(ex));
    }
  } else if (strategy == "span") {
    Rng rng(cfg.seed());
    for (const auto& d : corpus.documents) {
      if (d.modality != Modality::structured) continue;
      const auto ex = span_mask_tokens(d.id, tokenize(d.body, body_mode(d), false), cfg.real("span_rate"), rng);
      zero += ex.target.empty() ? 1 : 0;
      lines.push_back(masked_example_to_json(ex));
    }
  } else {
    throw ValidationError("unknown masking strategy '" + strategy + "' (expected entity or span)");
  }
  ws.open_output(cfg.path("out"));
  ws.write("masked.jsonl", jsonl_of(lines));
  out << "masked " << lines.size() << " documents (" << zero << " without entities)\n";
}

std::vector<TrainingPair> train_pairs(const Corpus& c) {
  if (!c.split) return c.pairs;
  const std::set<std::string> train(c.split->train.begin(), c.split->train.end());
  std::vector<TrainingPair> out;
  for (const auto& p : c.pairs) {
    if (train.contains(p.doc_id)) out.push_back(p);
  }
  return out;
}

void cmd_pretrain(const RunConfig& cfg, Workspace& ws, std::ostream& out) {
  const auto corpus = load_corpus(ws, cfg.path("corpus"), true, false);
  auto tc = train_config(cfg);
  tc.objectives.sda = cfg.flag("sda");
  tc.objectives.mep = cfg.flag("mep");
  tc.objectives.sda_uses_masked_input = cfg.flag("sda_uses_masked_input");
  tc.span_rate = cfg.real("span_rate");
  const auto masking = cfg.str("masking");
  if (masking == "entity") {
    tc.masking = MaskingStrategy::entity;
  } else if (masking == "span") {
    tc.masking = MaskingStrategy::span;
  } else {
    throw ValidationError("unknown masking '" + masking + "' (expected entity or span)");
  }
  if (!tc.objectives.sda && !tc.objectives.mep) throw ValidationError("enable at least one of sda, mep");

  Model m;
  m.vocab = build_vocabulary(corpus.documents, &corpus.queries, 1);
  EncoderConfig ec;
  ec.vocab_size = m.vocab.size();
  ec.d_model = cfg.count("d_model");
  ec.n_layers = cfg.count("n_layers");
  ec.n_heads = cfg.count("n_heads");
  ec.ffn_dim = cfg.count("ffn_dim");
  ec.max_len = cfg.count("max_len");
  ec.seed = tc.seed;
  ec.validate();
  m.params = ModelParams::initialize(ec);

  const auto pairs = train_pairs(corpus);
  if (pairs.empty()) throw ValidationError("no training pairs");
  PretrainData data;
  if (cfg.has("masked") && tc.masking == MaskingStrategy::entity) {
    std::map<std::string, MaskedExample> masked;
    const auto text = ws.read("masked", (fs::path(cfg.path("masked")) / "masked.jsonl").string());
    for (const auto& line : lines_of(text)) {
      auto ex = masked_example_from_json(line);
      masked.emplace(ex.doc_id, std::move(ex));
    }
    data = prepare_pretrain_data(corpus.documents, pairs, m.vocab, ec.max_len, masked);
  } else {
    data = prepare_pretrain_data(corpus.documents, pairs, m.vocab, ec.max_len, tc.masking, tc.span_rate, tc.seed);
  }
  if (tc.objectives.mep && data.zero_entity_docs == data.examples.size()) {
    throw ValidationError("no training document has entities to predict");
  }

  std::string log;
  run_pretraining(m.params, std::move(data), m.vocab, tc, [&](const TrainLogEntry& e) {
    log += log_entry_to_json(e) + "\n";
    if (e.step % 50 == 0 || e.step == tc.steps) {
      out << "step " << e.step << " l_sda " << e.loss.l_sda << " l_mep " << e.loss.l_mep << "\n";
    }
  });
  ws.open_output(cfg.path("out"));
  save_model(ws, m);
  ws.write("train_log.jsonl", log);
}

std::map<std::string, std::vector<std::string>> exact_docs(const Corpus& c) {
  std::map<std::string, std::vector<std::string>> out;
  for (const auto& j : c.judgments) {
    if (j.grade == Grade::exact) out[j.query_id].push_back(j.doc_id);
  }
  return out;
}

void cmd_finetune(const RunConfig& cfg, Workspace& ws, std::ostream& out) {
  const auto corpus = load_corpus(ws, cfg.path("corpus"), false, true);
  Model m = load_model(ws, cfg.path("model"));
  auto tc = train_config(cfg);
  tc.mode = TrainMode::finetune;
  tc.hard_negatives_per_query = cfg.count("hard_negatives_per_query");
  const auto pool = cfg.str("negative_pool");
  bool use_hard = true;
  if (pool == "inbatch") {
    use_hard = false;
  } else if (pool == "inbatch+hard") {
    tc.objectives.negatives = NegativePool::inbatch_and_hard;
  } else if (pool == "hard") {
    tc.objectives.negatives = NegativePool::hard_only;
  } else {
    throw ValidationError("unknown negative_pool '" + pool + "' (expected inbatch, inbatch+hard or hard)");
  }

  std::map<std::string, std::vector<std::string>> negatives;
  if (use_hard) {
    const auto text = ws.read("negatives", (fs::path(cfg.path("negatives")) / "negatives.jsonl").string());
    std::size_t line_no = 0;
    for (const auto& line : lines_of(text)) {
      ++line_no;
      try {
        const auto j = nlohmann::json::parse(line);
        negatives[j.at("query_id").get<std::string>()] = j.at("negatives").get<std::vector<std::string>>();
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(line_no, e.what());
      }
    }
  }

  const auto train_ids = split_ids(corpus, corpus.split ? "train" : "all");
  const auto positives = exact_docs(corpus);
  const std::size_t max_len = m.params.config.max_len;
  std::vector<FinetuneItem> items;
  for (const Query* q : queries_in(corpus, train_ids)) {
    for (const auto& doc_id : positives.at(q->id)) {
      FinetuneItem item;
      item.query = encode_text(q->text, TokenizeMode::natural, m.vocab, max_len);
      item.positive = encode_document(corpus.documents.at(doc_id), m.vocab, max_len);
      if (use_hard) {
        auto it = negatives.find(q->id);
        if (it != negatives.end()) {
          for (const auto& n : it->second) {
            item.hard_negatives.push_back(encode_document(corpus.documents.at(n), m.vocab, max_len));
          }
        }
        if (tc.objectives.negatives == NegativePool::hard_only && item.hard_negatives.empty()) {
          throw ValidationError("query '" + q->id + "' has no mined negatives");
        }
      }
      items.push_back(std::move(item));
    }
  }
  if (items.empty()) throw ValidationError("no finetuning queries in the training split");

  std::string log;
  run_finetuning(m.params, items, tc, [&](const TrainLogEntry& e) {
    log += log_entry_to_json(e) + "\n";
    if (e.step % 50 == 0 || e.step == tc.steps) out << "step " << e.step << " l_dr " << e.loss.l_dr << "\n";
  });
  ws.open_output(cfg.path("out"));
  save_model(ws, m);
  ws.write("train_log.jsonl", log);
}

void cmd_mine(const RunConfig& cfg, Workspace& ws, std::ostream& out) {
  const auto corpus = load_corpus(ws, cfg.path("corpus"), false, true);
  const Model m = load_model(ws, cfg.path("model"));
  const auto seed = cfg.seed();
  // Candidates come from the mined split only, so held-out documents never become training negatives.
  const auto ids = split_ids(corpus, cfg.str("split"));
  const auto index = build_index(m.params, m.vocab, structured_docs(corpus, ids), cfg.threads());
  std::vector<std::string> lines;
  for (const Query* q : queries_in(corpus, ids)) {
    std::set<std::string> pos;
    for (const auto& j : corpus.judgments) {
      if (j.query_id == q->id && j.grade == Grade::exact) pos.insert(j.doc_id);
    }
    const auto emb =
        encode_representation(m.params, encode_text(q->text, TokenizeMode::natural, m.vocab, m.params.config.max_len));
    // Per-query seed so that one query's sample does not depend on the others.
    const auto negs = mine_hard_negatives(index, emb, pos, cfg.count("pool"), cfg.count("n"), fnv1a64(q->id, seed));
    ordered_json j;
    j["query_id"] = q->id;
    j["negatives"] = negs;
    lines.push_back(j.dump());
  }
  ws.open_output(cfg.path("out"));
  ws.write("negatives.jsonl", jsonl_of(lines));
  out << "mined negatives for " << lines.size() << " queries\n";
}

void cmd_index(const RunConfig& cfg, Workspace& ws, std::ostream& out) {
  const auto corpus = load_corpus(ws, cfg.path("corpus"), false, false);
  const Model m = load_model(ws, cfg.path("model"));
  const auto index =
      build_index(m.params, m.vocab, structured_docs(corpus, split_ids(corpus, cfg.str("split"))), cfg.threads());
  ws.open_output(cfg.path("out"));
  ws.write("index.bin", serialize_index(index));
  if (cfg.flag("export")) ws.write("embeddings.tsv", format_embeddings(index));
  out << "indexed " << index.size() << " documents\n";
}

void cmd_search(const RunConfig& cfg, Workspace& ws, std::ostream& out) {
  const auto index =
      deserialize_index(ws.read("index", (fs::path(cfg.path("index")) / "index.bin").string()));
  const Model m = load_model(ws, cfg.path("model"));
  const auto source = cfg.str("source");
  const bool need_queries = source == "queries";
  const auto corpus = load_corpus(ws, cfg.path("corpus"), !need_queries, need_queries);
  const auto ids = split_ids(corpus, cfg.str("split"));
  const std::size_t max_len = m.params.config.max_len;
  const auto fingerprint = checkpoint_fingerprint(m.params);
  const auto k = cfg.count("k");
  const auto tag = cfg.str("tag");

  std::vector<std::pair<std::string, TokenIds>> inputs;
  if (source == "queries") {
    for (const Query* q : queries_in(corpus, ids)) {
      inputs.emplace_back(q->id, encode_text(q->text, TokenizeMode::natural, m.vocab, max_len));
    }
  } else if (source == "passages") {
    for (const auto& p : corpus.pairs) {
      if (ids.contains(p.doc_id)) inputs.emplace_back(p.passage_id, encode_document(corpus.documents.at(p.passage_id), m.vocab, max_len));
    }
  } else {
    throw ValidationError("unknown source '" + source + "' (expected queries or passages)");
  }
  std::string run;
  for (const auto& [id, tokens] : inputs) {
    run += format_trec_run(id, search(index, encode_representation(m.params, tokens), k, fingerprint, cfg.flag("force")), tag);
  }
  ws.open_output(cfg.path("out"));
  ws.write("run.trec", run);
  out << "searched " << inputs.size() << " queries\n";
}

void cmd_eval(const RunConfig& cfg, Workspace& ws, std::ostream& out) {
  const auto run = parse_trec_run(ws.read("run", cfg.path("run")));
  const auto which = cfg.str("judgments");
  std::vector<Judgment> judgments;
  if (which == "queries") {
    judgments = load_corpus(ws, cfg.path("corpus"), false, true).judgments;
  } else if (which == "pairs") {
    for (const auto& p : load_corpus(ws, cfg.path("corpus"), true, false).pairs) {
      judgments.push_back({p.passage_id, p.doc_id, Grade::exact});
    }
  } else {
    throw ValidationError("unknown judgments source '" + which + "' (expected queries or pairs)");
  }
  const auto report =
      evaluate_run(run, make_judgment_table(judgments), parse_gain_scheme(cfg.str("scheme")), cfg.count("cutoff"),
                   parse_mrr_relevance(cfg.str("mrr_relevant")));
  ws.open_output(cfg.path("out"));
  ws.write("metrics.json", metric_report_to_json(report));
  out << "mrr " << report.mrr << " ndcg " << report.ndcg << "\n";
}

void cmd_diagnose(const RunConfig& cfg, Workspace& ws, std::ostream& out) {
  const auto corpus = load_corpus(ws, cfg.path("corpus"), true, false);
  const Model m = load_model(ws, cfg.path("model"));
  const auto ids = split_ids(corpus, cfg.str("split"));
  const std::size_t max_len = m.params.config.max_len;
  std::vector<std::pair<Embedding, Embedding>> pairs;
  std::vector<Embedding> all;
  Index exported;
  exported.dim = m.params.config.d_model;
  exported.fingerprint = checkpoint_fingerprint(m.params);
  auto add_row = [&](const Document& d, const Embedding& e) {
    exported.ids.push_back(d.id);
    exported.modalities.push_back(d.modality);
    for (double x : e) exported.rows.push_back(static_cast<float>(x));
  };
  for (const auto& p : corpus.pairs) {
    if (!ids.contains(p.doc_id)) continue;
    const auto& passage = corpus.documents.at(p.passage_id);
    const auto& doc = corpus.documents.at(p.doc_id);
    auto a = encode_representation(m.params, encode_document(passage, m.vocab, max_len));
    auto b = encode_representation(m.params, encode_document(doc, m.vocab, max_len));
    add_row(passage, a);
    add_row(doc, b);
    all.push_back(a);
    all.push_back(b);
    pairs.emplace_back(std::move(a), std::move(b));
  }
  const auto g = geometry(pairs, all);
  ordered_json j;
  j["pairs"] = pairs.size();
  j["alignment"] = g.alignment;
  j["uniformity"] = g.uniformity;
  ws.open_output(cfg.path("out"));
  ws.write("geometry.json", j.dump(2) + "\n");
  ws.write("embeddings.tsv", format_embeddings(exported));
  out << "alignment " << g.alignment << " uniformity " << g.uniformity << "\n";
}

// Returns false when the tolerance is exceeded.
bool cmd_grad_check(const RunConfig& cfg, Workspace& ws, std::ostream& out) {
  const auto seed = cfg.seed();
  const auto batch_size = cfg.count("batch_size");
  if (batch_size < 2) throw ValidationError("grad-check batch_size must be >= 2");
  SyntheticOptions so;
  so.seed = seed;
  so.n_pairs = batch_size * 2;
  so.vocab_size = 16;
  so.heldout = 0;
  const auto corpus = generate_synthetic(so);
  const auto vocab = build_vocabulary(corpus.documents, &corpus.queries, 1);
  EncoderConfig ec;
  ec.vocab_size = vocab.size();
  ec.d_model = cfg.count("d_model");
  ec.n_layers = cfg.count("n_layers");
  ec.n_heads = cfg.count("n_heads");
  ec.ffn_dim = cfg.count("ffn_dim");
  ec.max_len = cfg.count("max_len");
  ec.seed = seed;
  ec.validate();
  const auto params = ModelParams::initialize(ec);

  std::vector<TrainingPair> pairs(corpus.pairs.begin(), corpus.pairs.begin() + static_cast<std::ptrdiff_t>(batch_size));
  const auto data =
      prepare_pretrain_data(corpus.documents, pairs, vocab, ec.max_len, MaskingStrategy::entity, 0.15, seed);
  PretrainBatch pretrain;
  for (const auto& ex : data.examples) pretrain.push_back(ex.item);
  FinetuneBatch finetune;
  for (std::size_t i = 0; i < batch_size; ++i) {
    FinetuneItem item;
    item.query = encode_text(corpus.queries.items()[i].text, TokenizeMode::natural, vocab, ec.max_len);
    item.positive = encode_document(corpus.documents.at(corpus.pairs[i].doc_id), vocab, ec.max_len);
    item.hard_negatives.push_back(
        encode_document(corpus.documents.at(corpus.pairs[batch_size + i].doc_id), vocab, ec.max_len));
    finetune.push_back(std::move(item));
  }

  std::vector<Objective> objectives;
  const auto which = cfg.str("objective");
  if (which == "all") {
    objectives = {Objective::sda, Objective::mep, Objective::dr};
  } else if (which == "sda") {
    objectives = {Objective::sda};
  } else if (which == "mep") {
    objectives = {Objective::mep};
  } else if (which == "dr") {
    objectives = {Objective::dr};
  } else {
    throw ValidationError("unknown objective '" + which + "' (expected all, sda, mep or dr)");
  }
  const double tolerance = cfg.real("tolerance");
  bool passed = true;
  ordered_json report;
  report["parameters"] = params.parameter_count();
  for (auto o : objectives) {
    const auto r = grad_check(params, pretrain, finetune, o, cfg.real("epsilon"), cfg.count("sample"), seed);
    ordered_json entries = ordered_json::array();
    for (const auto& e : r.entries) {
      entries.push_back({{"tensor", e.tensor},
                         {"index", e.index},
                         {"analytic", e.analytic},
                         {"numeric", e.numeric},
                         {"relative_error", e.relative_error}});
    }
    const bool ok = r.max_relative_error < tolerance;
    passed = passed && ok;
    report[to_string(o)] = {{"max_relative_error", r.max_relative_error}, {"passed", ok}, {"entries", entries}};
    out << to_string(o) << " max relative error " << r.max_relative_error << (ok ? " ok" : " FAILED") << "\n";
  }
  report["passed"] = passed;
  ws.open_output(cfg.path("out"));
  ws.write("gradcheck.json", report.dump(2) + "\n");
  return passed;
}

void report_error(std::ostream& err, const std::string& kind, const std::string& message) {
  err << ordered_json{{"error", kind}, {"message", message}}.dump() << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Structure-aware dense retrieval toolkit", "structret"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  bool strict = false;
  app.add_option("--config", config_path, "JSON config file (top-level keys plus per-command sections)");
  app.add_option("--set", overrides, "Override a setting: key=value")->take_all();
  app.add_option("--seed", seed, "Seed for every random choice in the command");
  app.add_option("--threads", threads, "Worker threads for per-item work")->check(CLI::PositiveNumber);
  app.add_flag("--strict-determinism", strict, "Force single-threaded numeric paths");
  app.fallthrough();

  std::map<std::string, std::map<std::string, std::string>> flag_values;
  for (const auto& spec : command_specs()) {
    auto* sub = app.add_subcommand(spec.name, spec.help);
    for (const auto& [key, def] : spec.defaults.items()) {
      sub->add_option("--" + key, flag_values[spec.name][key], key + " (default " + def.dump() + ")");
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report_error(err, "validation", e.what());
    return kExitValidation;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  const CommandSpec& spec = spec_for(command);
  RunConfig cfg;
  cfg.spec = &spec;
  std::optional<Workspace> ws;
  try {
    cfg.values = spec.defaults;
    cfg.values["threads"] = 1;
    cfg.values["strict_determinism"] = false;
    if (!config_path.empty()) {
      const auto file = load_config_file(config_path, spec);
      for (auto it = file.begin(); it != file.end(); ++it) set_key(spec, cfg.values, it.key(), it.value());
    }
    auto* sub = app.get_subcommand(command);
    for (const auto& [key, value] : flag_values[command]) {
      if (sub->count("--" + key) > 0) set_key(spec, cfg.values, key, coerce(spec, key, value));
    }
    for (const auto& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos || eq == 0) throw ValidationError("--set expects key=value, got '" + o + "'");
      const auto key = o.substr(0, eq);
      const auto text = o.substr(eq + 1);
      ordered_json value;
      if (key == "seed" || key == "threads") {
        value = coerce(CommandSpec{"", "", false, {{key, 0}}, {}}, key, text);
      } else if (key == "strict_determinism") {
        value = coerce(CommandSpec{"", "", false, {{key, false}}, {}}, key, text);
      } else {
        if (!spec.defaults.contains(key)) throw ValidationError("unknown key '" + key + "' for command " + command);
        value = coerce(spec, key, text);
      }
      set_key(spec, cfg.values, key, value);
    }
    if (seed) cfg.values["seed"] = *seed;
    if (threads) cfg.values["threads"] = *threads;
    if (strict) cfg.values["strict_determinism"] = true;
    if (spec.stochastic) (void)cfg.seed();
    if (!cfg.has("out")) throw ValidationError(command + ": missing required path 'out'");

    ws.emplace(cfg);
    bool ok = true;
    if (command == "gen-data") cmd_gen_data(cfg, *ws, out);
    else if (command == "extract") cmd_extract(cfg, *ws, out);
    else if (command == "mask") cmd_mask(cfg, *ws, out);
    else if (command == "pretrain") cmd_pretrain(cfg, *ws, out);
    else if (command == "finetune") cmd_finetune(cfg, *ws, out);
    else if (command == "mine") cmd_mine(cfg, *ws, out);
    else if (command == "index") cmd_index(cfg, *ws, out);
    else if (command == "search") cmd_search(cfg, *ws, out);
    else if (command == "eval") cmd_eval(cfg, *ws, out);
    else if (command == "diagnose") cmd_diagnose(cfg, *ws, out);
    else if (command == "grad-check") ok = cmd_grad_check(cfg, *ws, out);
    ws->commit();
    if (!ok) {
      report_error(err, "numeric", "gradient check exceeded tolerance");
      return kExitRuntime;
    }
    return kExitOk;
  } catch (const ValidationError& e) {
    if (ws) ws->rollback();
    report_error(err, "validation", e.what());
    return kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    if (ws) ws->rollback();
    report_error(err, "validation", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    if (ws) ws->rollback();
    report_error(err, "runtime", e.what());
    return kExitRuntime;
  }
}

}  // namespace structret
