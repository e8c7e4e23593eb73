#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace structret {

enum class TokenizeMode { code, natural };

struct Token {
  std::string text;
  std::size_t start = 0;  // byte offsets into the source text
  std::size_t end = 0;
};

inline constexpr std::size_t kSentinelCount = 100;

std::string sentinel_token(std::size_t index);
// Index of a sentinel token such as "<e_12>", or nullopt.
std::optional<std::size_t> sentinel_index(std::string_view token);

// Splits on whitespace and punctuation. Word characters are ASCII
// alphanumerics, '_' and any byte >= 0x80; every other printable byte is a
// single-character token. Natural mode lowercases ASCII letters. When
// `pass_sentinels` is set, "<e_N>" (0 <= N < 100) is kept as one token.
std::vector<Token> tokenize_with_offsets(std::string_view text, TokenizeMode mode,
                                         bool pass_sentinels = true);
std::vector<std::string> tokenize(std::string_view text, TokenizeMode mode,
                                  bool pass_sentinels = true);

class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;
  static constexpr std::int32_t kStart = 2;
  static constexpr std::int32_t kEnd = 3;
  static constexpr std::int32_t kFirstSentinel = 4;
  static constexpr std::int32_t kReservedCount = kFirstSentinel + static_cast<std::int32_t>(kSentinelCount);

  // Reserved block only.
  Vocabulary();

  // Learned tokens ordered by descending count, ties by byte order.
  static Vocabulary build(const std::vector<std::vector<std::string>>& token_streams,
                          std::size_t min_count = 1);
  // One learned token per line; line i maps to id kReservedCount + i.
  static Vocabulary from_text(std::string_view text);
  std::string to_text() const;

  std::int32_t id(const std::string& token) const;
  const std::string& token(std::int32_t id) const;
  std::size_t size() const { return tokens_.size(); }
  static std::int32_t sentinel_id(std::size_t index) {
    return kFirstSentinel + static_cast<std::int32_t>(index);
  }

  // Maps tokens to ids, truncating so that the trailing end token fits in max_len.
  std::vector<std::int32_t> encode(const std::vector<std::string>& tokens, std::size_t max_len) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

TokenizeMode mode_for_code(bool is_code);

}  // namespace structret
