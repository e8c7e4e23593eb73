#pragma once

#include <string>
#include <utility>
#include <vector>

#include "structret/corpus.hpp"
#include "structret/structparse.hpp"
#include "structret/tokenizer.hpp"

namespace structret {

// The 100 reserved placeholder tokens <e_0> ... <e_99>.
class SentinelVocab {
 public:
  std::size_t size() const { return kSentinelCount; }
  std::string token(std::size_t index) const;
  std::vector<std::string> tokens() const;
};

struct MaskedExample {
  std::string doc_id;
  std::vector<std::string> source;
  // <e_0> ent_0 tokens <e_1> ent_1 tokens ...
  std::vector<std::string> target;
  // key -> sentinel index, in sentinel order.
  std::vector<std::pair<std::string, std::size_t>> mapping;

  bool operator==(const MaskedExample&) const = default;
};

TokenizeMode body_mode(const Document& doc);

// Masks every occurrence of the first `max_entities` keys (by first span
// offset). Throws ValidationError for spans that disagree with the body or
// cut through a token.
MaskedExample mask_entities(const Document& doc, const EntitySet& entities,
                            const SentinelVocab& vocab = SentinelVocab{},
                            std::size_t max_entities = kSentinelCount);

// Substitutes each source sentinel with its target segment.
std::vector<std::string> reconstruct(const MaskedExample& example);

std::string masked_example_to_json(const MaskedExample& example);
MaskedExample masked_example_from_json(std::string_view line);

std::string join_tokens(const std::vector<std::string>& tokens);

}  // namespace structret
