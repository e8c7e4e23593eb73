#pragma once

#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "structret/corpus.hpp"

namespace structret {

enum class LexKind { identifier, keyword, op, number, string, comment };

struct LexToken {
  LexKind kind;
  std::size_t start;
  std::size_t end;
};

// Per-language lexical table consumed by the shared lexer.
struct LanguageSpec {
  std::string name;
  std::set<std::string> keywords;
  std::vector<std::string> line_comments;
  std::vector<std::pair<std::string, std::string>> block_comments;
  std::string quote_chars = "\"'";
  // Quote characters whose strings take no backslash escapes (Go raw strings).
  std::string raw_quote_chars;
  bool triple_quotes = false;
  // Identifier prefixes that are letters of a string literal: r"..", b'..'.
  std::set<std::string> string_prefixes;
  // Extra bytes allowed to start an identifier ('$' in PHP/JS, '@' in Ruby).
  std::string extra_ident_start;
  std::string extra_ident_continue;
  // Bytes allowed to end an identifier ('?' and '!' in Ruby).
  std::string ident_suffix;
  std::string operator_chars;
};

// Throws ValidationError naming the tag when the language is unknown.
const LanguageSpec& language_spec(const std::string& lang_tag);
std::vector<std::string> supported_languages();

// Lexes a whole body. Unlexable bytes raise ValidationError with the offset.
std::vector<LexToken> lex(std::string_view body, const LanguageSpec& lang);

struct EntitySpan {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string surface;
  std::string key;
  bool operator==(const EntitySpan&) const = default;
};

struct EntitySet {
  std::string doc_id;
  std::vector<EntitySpan> spans;  // sorted by start, non-overlapping
  std::vector<std::string> keys;  // distinct, first-occurrence order
  bool operator==(const EntitySet&) const = default;
};

// Identifier tokens outside the keyword table; one key per identifier text.
EntitySet extract_code_entities(const Document& doc);
// Lowercased alphabetic tokens (length >= 3, not stopwords) shared by title and body.
EntitySet extract_product_entities(const Document& doc);
// Dispatches on kind; unstructured docs yield an empty set.
EntitySet extract_entities(const Document& doc);

const std::set<std::string>& product_stopwords();
std::string stopword_list_version();

struct EntityProportion {
  std::string doc_id;
  DocKind kind;
  std::size_t tokens = 0;
  std::size_t covered = 0;
  double proportion = 0.0;
};

struct EntityStats {
  std::vector<EntityProportion> per_document;
  std::map<std::string, double> per_kind;  // macro average
};

// Fraction of each body's tokens that fall inside an entity span.
EntityStats entity_stats(const DocumentCollection& docs, const std::vector<EntitySet>& entity_sets);

std::string entity_set_to_json(const EntitySet& set);
EntitySet entity_set_from_json(std::string_view line);

}  // namespace structret
