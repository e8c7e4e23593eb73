#include "structret/tokenizer.hpp"

#include <algorithm>
#include <map>

#include "structret/common.hpp"

namespace structret {

namespace {

bool is_word_byte(unsigned char c) {
  return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' ||
         c >= 0x80;
}

bool is_space_byte(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v' || c < 0x20 ||
         c == 0x7f;
}

char lower_ascii(char c) { return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c; }

// Length of a sentinel token starting at text[pos], or 0.
std::size_t match_sentinel(std::string_view text, std::size_t pos) {
  if (text.compare(pos, 3, "<e_") != 0) return 0;
  std::size_t i = pos + 3;
  const std::size_t digits_start = i;
  while (i < text.size() && text[i] >= '0' && text[i] <= '9' && i - digits_start < 3) ++i;
  if (i == digits_start || i >= text.size() || text[i] != '>') return 0;
  return sentinel_index(text.substr(pos, i + 1 - pos)) ? i + 1 - pos : 0;
}

}  // namespace

std::string sentinel_token(std::size_t index) { return "<e_" + std::to_string(index) + ">"; }

std::optional<std::size_t> sentinel_index(std::string_view token) {
  if (token.size() < 5 || token.substr(0, 3) != "<e_" || token.back() != '>') return std::nullopt;
  const auto digits = token.substr(3, token.size() - 4);
  if (digits.empty() || digits.size() > 2 || (digits.size() > 1 && digits[0] == '0')) return std::nullopt;
  std::size_t v = 0;
  for (char c : digits) {
    if (c < '0' || c > '9') return std::nullopt;
    v = v * 10 + static_cast<std::size_t>(c - '0');
  }
  return v < kSentinelCount ? std::optional<std::size_t>(v) : std::nullopt;
}

std::vector<Token> tokenize_with_offsets(std::string_view text, TokenizeMode mode,
                                         bool pass_sentinels) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto c = static_cast<unsigned char>(text[i]);
    if (is_space_byte(c)) {
      ++i;
      continue;
    }
    if (pass_sentinels && c == '<') {
      if (std::size_t n = match_sentinel(text, i)) {
        out.push_back({std::string(text.substr(i, n)), i, i + n});
        i += n;
        continue;
      }
    }
    std::size_t j = i + 1;
    if (is_word_byte(c)) {
      while (j < text.size() && is_word_byte(static_cast<unsigned char>(text[j]))) ++j;
    }
    Token tok{std::string(text.substr(i, j - i)), i, j};
    if (mode == TokenizeMode::natural) {
      std::transform(tok.text.begin(), tok.text.end(), tok.text.begin(), lower_ascii);
    }
    out.push_back(std::move(tok));
    i = j;
  }
  return out;
}

std::vector<std::string> tokenize(std::string_view text, TokenizeMode mode, bool pass_sentinels) {
  std::vector<std::string> out;
  for (auto& t : tokenize_with_offsets(text, mode, pass_sentinels)) out.push_back(std::move(t.text));
  return out;
}

TokenizeMode mode_for_code(bool is_code) { return is_code ? TokenizeMode::code : TokenizeMode::natural; }

Vocabulary::Vocabulary() {
  add("<pad>");
  add("<unk>");
  add("<s>");
  add("</s>");
  for (std::size_t i = 0; i < kSentinelCount; ++i) add(sentinel_token(i));
}

void Vocabulary::add(const std::string& token) {
  if (ids_.count(token) != 0) throw ValidationError("duplicate vocabulary token: " + token);
  ids_.emplace(token, static_cast<std::int32_t>(tokens_.size()));
  tokens_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& token_streams,
                             std::size_t min_count) {
  Vocabulary vocab;
  std::map<std::string, std::size_t> counts;
  for (const auto& stream : token_streams) {
    for (const auto& t : stream) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, n] : counts) {
    if (n >= min_count && vocab.ids_.count(tok) == 0) ranked.emplace_back(tok, n);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  for (const auto& [tok, n] : ranked) vocab.add(tok);
  return vocab;
}

Vocabulary Vocabulary::from_text(std::string_view text) {
  Vocabulary vocab;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const std::string line(text.substr(pos, nl - pos));
    if (line.empty()) throw ValidationError("vocabulary file contains an empty line");
    vocab.add(line);
    pos = nl + 1;
  }
  return vocab;
}

std::string Vocabulary::to_text() const {
  std::string out;
  for (std::size_t i = kReservedCount; i < tokens_.size(); ++i) out += tokens_[i] + "\n";
  return out;
}

std::int32_t Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValidationError("token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocabulary::encode(const std::vector<std::string>& tokens,
                                             std::size_t max_len) const {
  std::vector<std::int32_t> ids;
  const std::size_t keep = std::min(tokens.size(), max_len > 0 ? max_len - 1 : 0);
  ids.reserve(keep + 1);
  for (std::size_t i = 0; i < keep; ++i) ids.push_back(id(tokens[i]));
  ids.push_back(kEnd);
  return ids;
}

}  // namespace structret
