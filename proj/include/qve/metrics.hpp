#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "qve/corpus.hpp"
#include "qve/util.hpp"

namespace qve {

struct SplitMismatch : Error {
  using Error::Error;
};

// SQuAD-official answer normalization: lowercase, delete punctuation,
// drop whole-token articles, collapse whitespace.
inline std::string normalize_answer(const std::string& s) {
  static const std::string punct = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";
  std::string cleaned;
  cleaned.reserve(s.size());
  for (char c : s) {
    if (punct.find(c) != std::string::npos) continue;
    cleaned.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  std::string out;
  std::string tok;
  auto flush = [&] {
    if (tok.empty()) return;
    if (tok != "a" && tok != "an" && tok != "the") {
      if (!out.empty()) out.push_back(' ');
      out += tok;
    }
    tok.clear();
  };
  for (char c : cleaned) {
    if (std::isspace(static_cast<unsigned char>(c)))
      flush();
    else
      tok.push_back(c);
  }
  flush();
  return out;
}

inline std::vector<std::string> normalized_tokens(const std::string& s) {
  std::vector<std::string> toks;
  std::string norm = normalize_answer(s);
  std::string tok;
  for (char c : norm) {
    if (c == ' ') {
      if (!tok.empty()) toks.push_back(tok);
      tok.clear();
    } else {
      tok.push_back(c);
    }
  }
  if (!tok.empty()) toks.push_back(tok);
  return toks;
}

inline int exact_match(const std::string& pred, const std::string& gold) {
  return normalize_answer(pred) == normalize_answer(gold) ? 1 : 0;
}

/// Token-bag F1 of the normalized strings, in [0,1].
inline double f1_score(const std::string& pred, const std::string& gold) {
  auto p = normalized_tokens(pred);
  auto g = normalized_tokens(gold);
  if (p.empty() || g.empty()) return (p.empty() && g.empty()) ? 1.0 : 0.0;
  std::map<std::string, int> bag;
  for (const auto& t : g) bag[t]++;
  int common = 0;
  for (const auto& t : p) {
    auto it = bag.find(t);
    if (it != bag.end() && it->second > 0) {
      it->second--;
      ++common;
    }
  }
  if (common == 0) return 0.0;
  double precision = static_cast<double>(common) / static_cast<double>(p.size());
  double recall = static_cast<double>(common) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

struct PerExampleScore {
  std::string example_id;
  int em_flag = 0;
  double f1 = 0.0;
};

struct EvalResult {
  double em = 0.0;  // percentage in [0,100]
  double f1 = 0.0;  // percentage in [0,100]
  std::vector<PerExampleScore> per_example;
  // filled by training loops when the loss_drop reward mode is active
  std::optional<double> qa_loss;
};

/// Scores predictions against a gold split; missing predictions score 0.
/// Multiple gold strings (canonical answer plus alt_answers) score by max.
inline EvalResult evaluate(const std::unordered_map<std::string, std::string>& predictions,
                           const CorpusSplit& gold) {
  EvalResult res;
  res.per_example.reserve(gold.size());
  double em_sum = 0.0, f1_sum = 0.0;
  for (const auto& ex : gold.examples) {
    PerExampleScore sc;
    sc.example_id = ex.example_id;
    auto it = predictions.find(ex.example_id);
    if (it != predictions.end()) {
      const std::string& pred = it->second;
      sc.em_flag = exact_match(pred, ex.answer.text);
      sc.f1 = f1_score(pred, ex.answer.text);
      for (const auto& alt : ex.alt_answers) {
        sc.em_flag = std::max(sc.em_flag, exact_match(pred, alt));
        sc.f1 = std::max(sc.f1, f1_score(pred, alt));
      }
    }
    em_sum += sc.em_flag;
    f1_sum += sc.f1;
    res.per_example.push_back(std::move(sc));
  }
  size_t n = gold.size();
  res.em = n ? 100.0 * em_sum / static_cast<double>(n) : 0.0;
  res.f1 = n ? 100.0 * f1_sum / static_cast<double>(n) : 0.0;
  return res;
}

enum class RewardMode { em_gain, f1_gain, loss_drop };

inline const char* to_string(RewardMode m) {
  switch (m) {
    case RewardMode::em_gain: return "em_gain";
    case RewardMode::f1_gain: return "f1_gain";
    case RewardMode::loss_drop: return "loss_drop";
  }
  return "?";
}

namespace detail {
inline void check_same_split(const EvalResult& a, const EvalResult& b) {
  if (a.per_example.size() != b.per_example.size())
    throw SplitMismatch("results computed on different splits");
  for (size_t i = 0; i < a.per_example.size(); ++i)
    if (a.per_example[i].example_id != b.per_example[i].example_id)
      throw SplitMismatch("results computed on different splits: id " +
                          a.per_example[i].example_id + " vs " +
                          b.per_example[i].example_id);
}
}  // namespace detail

/// QA gain used as the policy reward, in percentage points.
inline double reward_fn(const EvalResult& before, const EvalResult& after,
                        RewardMode mode = RewardMode::em_gain) {
  detail::check_same_split(before, after);
  switch (mode) {
    case RewardMode::em_gain: return after.em - before.em;
    case RewardMode::f1_gain: return after.f1 - before.f1;
    case RewardMode::loss_drop:
      if (!before.qa_loss || !after.qa_loss)
        throw Error("loss_drop reward requires qa_loss on both results");
      return *before.qa_loss - *after.qa_loss;
  }
  throw Error("unknown reward mode");
}

}  // namespace qve
