#include "structret/masker.hpp"

#include <algorithm>
#include <map>
#include <unordered_map>

#include <json.hpp>

namespace structret {

std::string SentinelVocab::token(std::size_t index) const {
  if (index >= size()) throw ValidationError("sentinel index out of range: " + std::to_string(index));
  return sentinel_token(index);
}

std::vector<std::string> SentinelVocab::tokens() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < size(); ++i) out.push_back(sentinel_token(i));
  return out;
}

TokenizeMode body_mode(const Document& doc) { return mode_for_code(doc.kind == DocKind::code); }

namespace {

std::string describe(const EntitySpan& s) {
  return "span [" + std::to_string(s.start) + ", " + std::to_string(s.end) + ") '" + s.surface + "'";
}

}  // namespace

MaskedExample mask_entities(const Document& doc, const EntitySet& entities, const SentinelVocab& vocab,
                            std::size_t max_entities) {
  if (max_entities > vocab.size()) throw ValidationError("max_entities exceeds sentinel vocabulary");
  if (entities.doc_id != doc.id) {
    throw ValidationError("entity set for '" + entities.doc_id + "' applied to document '" + doc.id + "'");
  }

  std::vector<EntitySpan> spans = entities.spans;
  std::sort(spans.begin(), spans.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
  for (std::size_t i = 0; i < spans.size(); ++i) {
    const auto& s = spans[i];
    if (s.start >= s.end || s.end > doc.body.size() || doc.body.compare(s.start, s.end - s.start, s.surface) != 0) {
      throw ValidationError("entity " + describe(s) + " does not match the body of " + doc.id);
    }
    if (i > 0 && spans[i - 1].end > s.start) throw ValidationError("overlapping entity " + describe(s));
  }

  std::vector<std::string> keys;
  std::unordered_map<std::string, std::size_t> sentinel_of;
  for (const auto& s : spans) {
    if (sentinel_of.count(s.key) != 0 || keys.size() >= max_entities) continue;
    sentinel_of.emplace(s.key, keys.size());
    keys.push_back(s.key);
  }

  const auto tokens = tokenize_with_offsets(doc.body, body_mode(doc), false);
  MaskedExample ex;
  ex.doc_id = doc.id;
  std::vector<std::vector<std::string>> entity_tokens(keys.size());
  std::vector<bool> filled(keys.size(), false);

  std::size_t t = 0;
  for (const auto& s : spans) {
    for (; t < tokens.size() && tokens[t].end <= s.start; ++t) ex.source.push_back(tokens[t].text);
    if (t < tokens.size() && tokens[t].start < s.start) {
      throw ValidationError("entity " + describe(s) + " cuts through token '" + tokens[t].text + "'");
    }
    std::vector<std::string> covered;
    for (; t < tokens.size() && tokens[t].start < s.end; ++t) {
      if (tokens[t].end > s.end) {
        throw ValidationError("entity " + describe(s) + " cuts through token '" + tokens[t].text + "'");
      }
      covered.push_back(tokens[t].text);
    }
    if (covered.empty()) throw ValidationError("entity " + describe(s) + " covers no token");
    auto it = sentinel_of.find(s.key);
    if (it == sentinel_of.end()) {
      ex.source.insert(ex.source.end(), covered.begin(), covered.end());
      continue;
    }
    const std::size_t idx = it->second;
    if (!filled[idx]) {
      entity_tokens[idx] = covered;
      filled[idx] = true;
    } else if (entity_tokens[idx] != covered) {
      throw ValidationError("entity " + describe(s) + " tokenizes differently from earlier occurrences of key '" +
                            s.key + "'");
    }
    ex.source.push_back(vocab.token(idx));
  }
  for (; t < tokens.size(); ++t) ex.source.push_back(tokens[t].text);

  for (std::size_t i = 0; i < keys.size(); ++i) {
    ex.target.push_back(vocab.token(i));
    ex.target.insert(ex.target.end(), entity_tokens[i].begin(), entity_tokens[i].end());
    ex.mapping.emplace_back(keys[i], i);
  }
  return ex;
}

std::vector<std::string> reconstruct(const MaskedExample& example) {
  std::map<std::size_t, std::vector<std::string>> segments;
  std::optional<std::size_t> current;
  for (const auto& tok : example.target) {
    if (auto idx = sentinel_index(tok)) {
      current = *idx;
      segments[*idx];
    } else if (current) {
      segments[*current].push_back(tok);
    } else {
      throw ValidationError("target begins with non-sentinel token '" + tok + "'");
    }
  }
  std::vector<std::string> out;
  for (const auto& tok : example.source) {
    auto idx = sentinel_index(tok);
    if (!idx) {
      out.push_back(tok);
      continue;
    }
    auto it = segments.find(*idx);
    if (it == segments.end()) throw ValidationError("sentinel " + tok + " is absent from the target");
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

std::string masked_example_to_json(const MaskedExample& example) {
  nlohmann::ordered_json mapping = nlohmann::ordered_json::object();
  for (const auto& [key, idx] : example.mapping) mapping[key] = idx;
  return nlohmann::ordered_json{{"doc_id", example.doc_id},
                                {"source", join_tokens(example.source)},
                                {"target", join_tokens(example.target)},
                                {"mapping", mapping}}
      .dump();
}

MaskedExample masked_example_from_json(std::string_view line) {
  const auto obj = nlohmann::ordered_json::parse(line);
  MaskedExample ex;
  ex.doc_id = obj.at("doc_id").get<std::string>();
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos < s.size()) {
      std::size_t sp = s.find(' ', pos);
      if (sp == std::string::npos) sp = s.size();
      if (sp > pos) out.push_back(s.substr(pos, sp - pos));
      pos = sp + 1;
    }
    return out;
  };
  ex.source = split(obj.at("source").get<std::string>());
  ex.target = split(obj.at("target").get<std::string>());
  for (const auto& [key, idx] : obj.at("mapping").items()) ex.mapping.emplace_back(key, idx.get<std::size_t>());
  std::sort(ex.mapping.begin(), ex.mapping.end(), [](const auto& a, const auto& b) { return a.second < b.second; });
  return ex;
}

}  // namespace structret
