#pragma once

#include <cctype>
#include <string>
#include <unordered_set>
#include <vector>

namespace qve {

struct Token {
  std::string text;   // lowercased
  size_t begin = 0;   // byte offset into the source string
  size_t end = 0;     // exclusive
};

// Lowercased alphanumeric tokens with byte offsets. Punctuation separates
// tokens and is dropped; apostrophes stay inside words.
inline std::vector<Token> tokenize(const std::string& text) {
  std::vector<Token> toks;
  size_t i = 0;
  auto is_word = [](unsigned char c) {
    return std::isalnum(c) || c == '\'';
  };
  while (i < text.size()) {
    if (!is_word(static_cast<unsigned char>(text[i]))) {
      ++i;
      continue;
    }
    size_t j = i;
    std::string t;
    while (j < text.size() && is_word(static_cast<unsigned char>(text[j]))) {
      t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(text[j]))));
      ++j;
    }
    toks.push_back({std::move(t), i, j});
    i = j;
  }
  return toks;
}

inline const std::unordered_set<std::string>& function_words() {
  static const std::unordered_set<std::string> words = {
      "the", "a",    "an",   "of",   "is",  "was",  "are", "were", "be",
      "to",  "in",   "on",   "at",   "and", "or",   "it",  "its",  "this",
      "that", "what", "who",  "which", "how", "me",  "tell", "can", "you",
      "i",   "do",   "does", "name", "say", "know", "wonder", "one", "has",
      "have", "could", "give", "please"};
  return words;
}

inline bool is_function_word(const std::string& t) {
  return function_words().count(t) > 0;
}

// Sentence byte ranges split on '.', '!' and '?'.
inline std::vector<std::pair<size_t, size_t>> sentence_ranges(const std::string& text) {
  std::vector<std::pair<size_t, size_t>> out;
  size_t start = 0;
  for (size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '.' || text[i] == '!' || text[i] == '?') {
      if (i > start) out.emplace_back(start, i + 1);
      start = i + 1;
    }
  }
  if (start < text.size()) out.emplace_back(start, text.size());
  return out;
}

}  // namespace qve
