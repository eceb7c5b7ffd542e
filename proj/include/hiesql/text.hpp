#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

#include "hiesql/util.hpp"

namespace hiesql {

struct Token {
  std::string text;  // normalized (lowercase)
  std::size_t begin = 0;
  std::size_t end = 0;  // byte offsets into the source string
};

using TokenSeq = std::vector<Token>;

namespace detail {

inline bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }
inline bool is_upper(unsigned char c) { return c >= 'A' && c <= 'Z'; }
inline bool is_lower(unsigned char c) { return c >= 'a' && c <= 'z'; }

}  // namespace detail

// Lowercased word tokens. Splits on whitespace, punctuation and underscores,
// and on camel-case boundaries ("TeacherID" -> teacher, id). A '.' between two
// digits is kept so decimals stay whole. Non-ASCII bytes are word characters.
inline TokenSeq normalize_tokens(std::string_view text) {
  TokenSeq out;
  const std::size_t n = text.size();
  std::size_t i = 0;
  auto byte = [&](std::size_t k) { return static_cast<unsigned char>(text[k]); };
  while (i < n) {
    if (!detail::is_word_byte(byte(i))) {
      ++i;
      continue;
    }
    std::size_t start = i;
    std::size_t j = i + 1;
    while (j < n) {
      const unsigned char prev = byte(j - 1);
      const unsigned char c = byte(j);
      if (c == '.' && std::isdigit(prev) && j + 1 < n && std::isdigit(byte(j + 1))) {
        ++j;
        continue;
      }
      if (!detail::is_word_byte(c)) break;
      // camel-case boundaries: aB, ABc
      if (detail::is_lower(prev) && detail::is_upper(c)) break;
      if (detail::is_upper(prev) && detail::is_upper(c) && j + 1 < n && detail::is_lower(byte(j + 1))) break;
      ++j;
    }
    out.push_back(Token{to_lower_ascii(text.substr(start, j - start)), start, j});
    i = j;
  }
  return out;
}

inline std::vector<std::string> token_words(std::string_view text) {
  std::vector<std::string> words;
  for (auto& t : normalize_tokens(text)) words.push_back(std::move(t.text));
  return words;
}

// Normal form of a cell value or SQL literal: the normalized tokens joined by
// single spaces, so values compare equal to utterance n-grams.
inline std::string normalize_value(std::string_view text) { return join(token_words(text), " "); }

}  // namespace hiesql
