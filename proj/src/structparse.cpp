#include "structret/structparse.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "structret/tokenizer.hpp"
#include "stopwords_data.hpp"

namespace structret {

namespace {

bool is_ascii_alpha(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }
bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }
bool is_ident_start(unsigned char c, const LanguageSpec& lang) {
  return is_ascii_alpha(c) || c == '_' || c >= 0x80 || lang.extra_ident_start.find(static_cast<char>(c)) != std::string::npos;
}
bool is_ident_continue(unsigned char c, const LanguageSpec& lang) {
  return is_ascii_alpha(c) || is_digit(c) || c == '_' || c >= 0x80 ||
         lang.extra_ident_continue.find(static_cast<char>(c)) != std::string::npos;
}
bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}
bool starts_with_at(std::string_view s, std::size_t pos, std::string_view prefix) {
  return s.compare(pos, prefix.size(), prefix) == 0;
}

class Lexer {
 public:
  Lexer(std::string_view body, const LanguageSpec& lang) : s_(body), lang_(lang) {}

  std::vector<LexToken> run() {
    while (pos_ < s_.size()) step();
    return std::move(out_);
  }

 private:
  void emit(LexKind kind, std::size_t start, std::size_t end) { out_.push_back({kind, start, end}); }

  [[noreturn]] void fail(const std::string& what, std::size_t at) const {
    throw ValidationError(what + " at offset " + std::to_string(at) + " (" + lang_.name + ")");
  }

  void step() {
    const auto c = static_cast<unsigned char>(s_[pos_]);
    if (is_space(c)) {
      ++pos_;
      return;
    }
    for (const auto& [open, close] : lang_.block_comments) {
      if (starts_with_at(s_, pos_, open)) {
        const std::size_t end = s_.find(close, pos_ + open.size());
        if (end == std::string_view::npos) fail("unterminated block comment", pos_);
        emit(LexKind::comment, pos_, end + close.size());
        pos_ = end + close.size();
        return;
      }
    }
    for (const auto& prefix : lang_.line_comments) {
      if (starts_with_at(s_, pos_, prefix)) {
        std::size_t end = s_.find('\n', pos_);
        if (end == std::string_view::npos) end = s_.size();
        emit(LexKind::comment, pos_, end);
        pos_ = end;
        return;
      }
    }
    if (lang_.quote_chars.find(static_cast<char>(c)) != std::string::npos) {
      lex_string(pos_, pos_);
      return;
    }
    if (is_digit(c) || (c == '.' && pos_ + 1 < s_.size() && is_digit(static_cast<unsigned char>(s_[pos_ + 1])))) {
      lex_number();
      return;
    }
    if (is_ident_start(c, lang_)) {
      lex_identifier();
      return;
    }
    if (lang_.operator_chars.find(static_cast<char>(c)) != std::string::npos) {
      emit(LexKind::op, pos_, pos_ + 1);
      ++pos_;
      return;
    }
    fail("unlexable byte 0x" + hex_byte(c), pos_);
  }

  static std::string hex_byte(unsigned char c) {
    static constexpr char digits[] = "0123456789abcdef";
    return {digits[c >> 4], digits[c & 0xf]};
  }

  // Lexes a quoted literal whose opening quote is at quote_pos; token starts at token_start.
  void lex_string(std::size_t token_start, std::size_t quote_pos) {
    const char q = s_[quote_pos];
    const bool raw = lang_.raw_quote_chars.find(q) != std::string::npos;
    if (lang_.triple_quotes && quote_pos + 2 < s_.size() && s_[quote_pos + 1] == q && s_[quote_pos + 2] == q) {
      const std::string delim(3, q);
      std::size_t i = quote_pos + 3;
      while (i < s_.size() && !starts_with_at(s_, i, delim)) i += (s_[i] == '\\') ? 2 : 1;
      if (i >= s_.size()) fail("unterminated string", token_start);
      emit(LexKind::string, token_start, i + 3);
      pos_ = i + 3;
      return;
    }
    std::size_t i = quote_pos + 1;
    while (i < s_.size() && s_[i] != q) i += (!raw && s_[i] == '\\') ? 2 : 1;
    if (i >= s_.size()) fail("unterminated string", token_start);
    emit(LexKind::string, token_start, i + 1);
    pos_ = i + 1;
  }

  void lex_number() {
    std::size_t i = pos_;
    while (i < s_.size()) {
      const auto c = static_cast<unsigned char>(s_[i]);
      if (is_ascii_alpha(c) || is_digit(c) || c == '_' || c == '.') {
        ++i;
      } else if ((c == '+' || c == '-') && i > pos_ && (s_[i - 1] == 'e' || s_[i - 1] == 'E') &&
                 !(s_[pos_] == '0' && pos_ + 1 < s_.size() && (s_[pos_ + 1] == 'x' || s_[pos_ + 1] == 'X'))) {
        ++i;
      } else {
        break;
      }
    }
    emit(LexKind::number, pos_, i);
    pos_ = i;
  }

  void lex_identifier() {
    std::size_t i = pos_ + 1;
    while (i < s_.size() && is_ident_continue(static_cast<unsigned char>(s_[i]), lang_)) ++i;
    if (i < s_.size() && lang_.ident_suffix.find(s_[i]) != std::string::npos &&
        !(i + 1 < s_.size() && s_[i + 1] == '=')) {
      ++i;
    }
    const std::string_view text = s_.substr(pos_, i - pos_);
    if (i < s_.size() && lang_.quote_chars.find(s_[i]) != std::string::npos) {
      std::string lower(text);
      std::transform(lower.begin(), lower.end(), lower.begin(), [](char ch) {
        return (ch >= 'A' && ch <= 'Z') ? static_cast<char>(ch - 'A' + 'a') : ch;
      });
      if (lang_.string_prefixes.count(lower) != 0) {
        lex_string(pos_, i);
        return;
      }
    }
    emit(lang_.keywords.count(std::string(text)) != 0 ? LexKind::keyword : LexKind::identifier, pos_, i);
    pos_ = i;
  }

  std::string_view s_;
  const LanguageSpec& lang_;
  std::size_t pos_ = 0;
  std::vector<LexToken> out_;
};

void finalize_keys(EntitySet& set) {
  std::sort(set.spans.begin(), set.spans.end(),
            [](const EntitySpan& a, const EntitySpan& b) { return a.start < b.start; });
  set.keys.clear();
  std::unordered_map<std::string, bool> seen;
  for (const auto& span : set.spans) {
    if (seen.emplace(span.key, true).second) set.keys.push_back(span.key);
  }
}

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c; });
  return s;
}

bool all_alpha(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return is_ascii_alpha(static_cast<unsigned char>(c)); });
}

}  // namespace

std::vector<LexToken> lex(std::string_view body, const LanguageSpec& lang) { return Lexer(body, lang).run(); }

EntitySet extract_code_entities(const Document& doc) {
  if (doc.kind != DocKind::code) throw ValidationError("document " + doc.id + " is not code");
  if (!doc.lang_tag) throw ValidationError("code document " + doc.id + " has no lang_tag");
  const LanguageSpec& lang = language_spec(*doc.lang_tag);
  EntitySet set;
  set.doc_id = doc.id;
  for (const auto& tok : lex(doc.body, lang)) {
    if (tok.kind != LexKind::identifier) continue;
    std::string surface = doc.body.substr(tok.start, tok.end - tok.start);
    set.spans.push_back({tok.start, tok.end, surface, surface});
  }
  finalize_keys(set);
  return set;
}

EntitySet extract_product_entities(const Document& doc) {
  if (!doc.title || doc.title->find_first_not_of(" \t\r\n") == std::string::npos) {
    throw ValidationError("product document " + doc.id + " has no title");
  }
  const auto& stop = product_stopwords();
  auto content = [&](const std::string& tok) {
    return tok.size() >= 3 && all_alpha(tok) && stop.count(tok) == 0;
  };
  std::set<std::string> title_terms;
  for (const auto& t : tokenize(*doc.title, TokenizeMode::natural, false)) {
    if (content(t)) title_terms.insert(t);
  }
  EntitySet set;
  set.doc_id = doc.id;
  for (const auto& tok : tokenize_with_offsets(doc.body, TokenizeMode::natural, false)) {
    if (content(tok.text) && title_terms.count(tok.text) != 0) {
      set.spans.push_back({tok.start, tok.end, doc.body.substr(tok.start, tok.end - tok.start), tok.text});
    }
  }
  finalize_keys(set);
  return set;
}

EntitySet extract_entities(const Document& doc) {
  if (doc.modality == Modality::unstructured) return EntitySet{doc.id, {}, {}};
  switch (doc.kind) {
    case DocKind::code: return extract_code_entities(doc);
    case DocKind::product: return extract_product_entities(doc);
    default: return EntitySet{doc.id, {}, {}};
  }
}

const std::set<std::string>& product_stopwords() {
  static const std::set<std::string> words = [] {
    std::set<std::string> out;
    std::istringstream in{std::string(kStopwordData)};
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      out.insert(lowercase(line));
    }
    return out;
  }();
  return words;
}

std::string stopword_list_version() {
  std::istringstream in{std::string(kStopwordData)};
  std::string first;
  std::getline(in, first);
  const std::string tag = "# version ";
  return first.rfind(tag, 0) == 0 ? first.substr(tag.size()) : "unversioned";
}

EntityStats entity_stats(const DocumentCollection& docs, const std::vector<EntitySet>& entity_sets) {
  EntityStats stats;
  std::map<std::string, std::pair<double, std::size_t>> sums;
  for (const auto& set : entity_sets) {
    const Document& doc = docs.at(set.doc_id);
    const auto tokens = tokenize_with_offsets(doc.body, mode_for_code(doc.kind == DocKind::code), false);
    EntityProportion p{doc.id, doc.kind, tokens.size(), 0, 0.0};
    std::size_t s = 0;
    for (const auto& tok : tokens) {
      while (s < set.spans.size() && set.spans[s].end <= tok.start) ++s;
      if (s < set.spans.size() && set.spans[s].start <= tok.start && tok.end <= set.spans[s].end) ++p.covered;
    }
    p.proportion = p.tokens == 0 ? 0.0 : static_cast<double>(p.covered) / static_cast<double>(p.tokens);
    auto& acc = sums[to_string(doc.kind)];
    acc.first += p.proportion;
    acc.second += 1;
    stats.per_document.push_back(p);
  }
  for (const auto& [kind, acc] : sums) stats.per_kind[kind] = acc.first / static_cast<double>(acc.second);
  return stats;
}

std::string entity_set_to_json(const EntitySet& set) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : set.spans) {
    spans.push_back({{"start", s.start}, {"end", s.end}, {"surface", s.surface}, {"key", s.key}});
  }
  return nlohmann::json{{"doc_id", set.doc_id}, {"spans", spans}}.dump();
}

EntitySet entity_set_from_json(std::string_view line) {
  const auto obj = nlohmann::json::parse(line);
  EntitySet set;
  set.doc_id = obj.at("doc_id").get<std::string>();
  for (const auto& s : obj.at("spans")) {
    set.spans.push_back({s.at("start").get<std::size_t>(), s.at("end").get<std::size_t>(),
                         s.at("surface").get<std::string>(), s.at("key").get<std::string>()});
  }
  finalize_keys(set);
  return set;
}

}  // namespace structret
