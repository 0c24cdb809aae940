#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "qve/learners.hpp"
#include "qve/metrics.hpp"
#include "qve/util.hpp"
#include "qve/value_estimator.hpp"

namespace qve {

struct EmptyScores : Error {
  using Error::Error;
};
struct MissingLogLik : Error {
  using Error::Error;
};

enum class FilterMethod { none, roundtrip, lm, qve_binary, qve_rank, qve_rl };

inline const char* to_string(FilterMethod m) {
  switch (m) {
    case FilterMethod::none: return "none";
    case FilterMethod::roundtrip: return "roundtrip";
    case FilterMethod::lm: return "lm";
    case FilterMethod::qve_binary: return "qve_binary";
    case FilterMethod::qve_rank: return "qve_rank";
    case FilterMethod::qve_rl: return "qve_rl";
  }
  return "?";
}

inline FilterMethod filter_method_from_string(const std::string& s) {
  if (s == "none") return FilterMethod::none;
  if (s == "roundtrip") return FilterMethod::roundtrip;
  if (s == "lm") return FilterMethod::lm;
  if (s == "qve_binary" || s == "qve-binary") return FilterMethod::qve_binary;
  if (s == "qve_rank" || s == "qve-rank") return FilterMethod::qve_rank;
  if (s == "qve_rl" || s == "qve-rl") return FilterMethod::qve_rl;
  throw Error("unknown filter method: " + s);
}

struct FilterReport {
  FilterMethod method = FilterMethod::none;
  size_t input_count = 0;
  size_t kept_count = 0;
  std::vector<std::string> kept_ids;  // in corpus order

  nlohmann::ordered_json to_json() const {
    return {{"method", to_string(method)},
            {"input_count", input_count},
            {"kept_count", kept_count},
            {"kept_ids", kept_ids}};
  }

  static FilterReport from_json(const nlohmann::json& j) {
    FilterReport r;
    r.method = filter_method_from_string(j.at("method").get<std::string>());
    r.input_count = j.at("input_count").get<size_t>();
    r.kept_count = j.at("kept_count").get<size_t>();
    r.kept_ids = j.at("kept_ids").get<std::vector<std::string>>();
    return r;
  }
};

/// Keeps an example iff the reader's extracted answer is correct under
/// normalized exact match.
inline FilterReport roundtrip_filter(const QAReader& reader, const CorpusSplit& synthetic) {
  FilterReport rep;
  rep.method = FilterMethod::roundtrip;
  rep.input_count = synthetic.size();
  for (const auto& ex : synthetic.examples) {
    Prediction p = reader.predict(synthetic.context_of(ex), ex.question);
    if (exact_match(p.text, ex.answer.text) == 1) rep.kept_ids.push_back(ex.example_id);
  }
  rep.kept_count = rep.kept_ids.size();
  return rep;
}

/// Keeps the floor(count * k / 100) highest-scoring ids. Ties break toward
/// earlier corpus order; kept_ids come back in corpus order.
inline FilterReport select_top_k(const std::vector<std::pair<std::string, double>>& scores,
                                 double k_percent,
                                 FilterMethod method = FilterMethod::none) {
  if (scores.empty()) throw EmptyScores("no scores to select from");
  if (!(k_percent > 0.0 && k_percent <= 100.0)) throw Error("k_percent must be in (0,100]");
  for (const auto& [id, s] : scores)
    if (!std::isfinite(s)) throw Error("non-finite score for " + id);

  size_t n = scores.size();
  size_t keep = static_cast<size_t>(
      std::floor(static_cast<double>(n) * k_percent / 100.0));
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (scores[a].second != scores[b].second) return scores[a].second > scores[b].second;
    return a < b;  // corpus order, earlier wins
  });
  order.resize(keep);
  std::sort(order.begin(), order.end());

  FilterReport rep;
  rep.method = method;
  rep.input_count = n;
  rep.kept_count = keep;
  rep.kept_ids.reserve(keep);
  for (size_t i : order) rep.kept_ids.push_back(scores[i].first);
  return rep;
}

/// Top-K% by generation log-likelihood.
inline FilterReport lm_filter(const CorpusSplit& synthetic, double k_percent) {
  std::vector<std::pair<std::string, double>> scores;
  scores.reserve(synthetic.size());
  for (const auto& ex : synthetic.examples) {
    if (!ex.gen_loglik)
      throw MissingLogLik("example lacks gen_loglik: " + ex.example_id);
    scores.emplace_back(ex.example_id, *ex.gen_loglik);
  }
  return select_top_k(scores, k_percent, FilterMethod::lm);
}

/// Top-K% by estimator score.
inline FilterReport qve_filter(const Estimator& est, const CorpusSplit& synthetic,
                               const QAReader& reader, double k_percent,
                               FilterMethod method = FilterMethod::qve_rl) {
  std::vector<std::pair<std::string, double>> scores;
  scores.reserve(synthetic.size());
  for (const auto& s : score_corpus(est, synthetic, reader))
    scores.emplace_back(s.example_id, s.prob);
  return select_top_k(scores, k_percent, method);
}

/// Materializes a report: the kept examples, in corpus order.
inline CorpusSplit apply_filter_report(const CorpusSplit& split, const FilterReport& rep) {
  std::unordered_set<std::string> keep(rep.kept_ids.begin(), rep.kept_ids.end());
  CorpusSplit out;
  out.name = split.name;
  out.contexts = split.contexts;
  out.examples.reserve(rep.kept_count);
  for (const auto& ex : split.examples)
    if (keep.count(ex.example_id)) out.examples.push_back(ex);
  out.rebuild_index();
  return out;
}

}  // namespace qve
