#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "qve/util.hpp"

namespace qve {

// Errors surfaced by corpus loading and slicing.
struct MalformedRecord : Error {
  using Error::Error;
};
struct UnsupportedFormat : Error {
  using Error::Error;
};
struct NTooLarge : Error {
  using Error::Error;
};

/// One passage. `text` offsets are byte offsets; spans index into it directly.
struct Context {
  std::string id;
  std::string text;
};

struct AnswerSpan {
  std::string text;
  size_t char_start = 0;
  size_t char_end = 0;  // exclusive
};

enum class Origin { annotated, synthetic };

struct QAExample {
  std::string context_ref;
  std::string question;
  AnswerSpan answer;
  Origin origin = Origin::annotated;
  std::optional<double> gen_loglik;  // present iff synthetic
  std::string example_id;
  // extra acceptable gold strings (multi-answer eval, max over golds)
  std::vector<std::string> alt_answers;
};

enum class SplitName {
  source_train,
  target_annotated,
  target_contexts,
  target_synthetic,
  eval_split,
};

inline const char* to_string(SplitName n) {
  switch (n) {
    case SplitName::source_train: return "source_train";
    case SplitName::target_annotated: return "target_annotated";
    case SplitName::target_contexts: return "target_contexts";
    case SplitName::target_synthetic: return "target_synthetic";
    case SplitName::eval_split: return "eval";
  }
  return "?";
}

/// Immutable after construction; example order is load order and is the
/// canonical tie-breaking order everywhere downstream.
struct CorpusSplit {
  SplitName name = SplitName::target_annotated;
  std::vector<Context> contexts;
  std::vector<QAExample> examples;

  size_t size() const { return examples.size(); }

  const Context& context_of(const QAExample& ex) const {
    return contexts[context_index(ex.context_ref)];
  }

  size_t context_index(const std::string& id) const {
    auto it = ctx_index_.find(id);
    if (it == ctx_index_.end()) throw Error("unknown context id: " + id);
    return it->second;
  }

  bool has_context(const std::string& id) const { return ctx_index_.count(id) > 0; }

  const QAExample& example_by_id(const std::string& id) const {
    auto it = ex_index_.find(id);
    if (it == ex_index_.end()) throw Error("unknown example id: " + id);
    return examples[it->second];
  }

  size_t example_index(const std::string& id) const {
    auto it = ex_index_.find(id);
    if (it == ex_index_.end()) throw Error("unknown example id: " + id);
    return it->second;
  }

  void rebuild_index() {
    ctx_index_.clear();
    ex_index_.clear();
    for (size_t i = 0; i < contexts.size(); ++i) {
      if (!ctx_index_.emplace(contexts[i].id, i).second)
        throw MalformedRecord("duplicate context id: " + contexts[i].id);
    }
    for (size_t i = 0; i < examples.size(); ++i) {
      if (!ex_index_.emplace(examples[i].example_id, i).second)
        throw MalformedRecord("duplicate example id: " + examples[i].example_id);
    }
  }

  // content fingerprint of the example id set (order-independent)
  uint64_t id_fingerprint() const {
    std::vector<std::string> ids;
    ids.reserve(examples.size());
    for (const auto& ex : examples) ids.push_back(ex.example_id);
    std::sort(ids.begin(), ids.end());
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& id : ids) h = fnv1a64(id, h);
    return h;
  }

 private:
  std::unordered_map<std::string, size_t> ctx_index_;
  std::unordered_map<std::string, size_t> ex_index_;
};

enum class CorpusFormat { squad_json, mrqa_jsonl };

// Checks every record: non-empty fields, span-slice alignment, gen_loglik
// presence rules. Throws MalformedRecord naming the offending record.
inline void validate_split(const CorpusSplit& split) {
  for (const auto& ctx : split.contexts) {
    if (ctx.text.empty()) throw MalformedRecord("empty context text: " + ctx.id);
  }
  for (const auto& ex : split.examples) {
    if (ex.question.empty()) throw MalformedRecord("empty question: " + ex.example_id);
    const Context& ctx = split.context_of(ex);
    const AnswerSpan& a = ex.answer;
    if (!(a.char_start < a.char_end && a.char_end <= ctx.text.size()))
      throw MalformedRecord("span out of range: " + ex.example_id);
    if (ctx.text.substr(a.char_start, a.char_end - a.char_start) != a.text)
      throw MalformedRecord("answer text does not match context slice: " + ex.example_id);
    bool synth = ex.origin == Origin::synthetic;
    if (synth != ex.gen_loglik.has_value())
      throw MalformedRecord("gen_loglik must be present iff synthetic: " + ex.example_id);
    if (ex.gen_loglik && *ex.gen_loglik > 0.0)
      throw MalformedRecord("gen_loglik must be <= 0: " + ex.example_id);
  }
}

namespace detail {

inline void load_squad_json(const std::string& body, CorpusSplit& out) {
  nlohmann::json doc = nlohmann::json::parse(body);
  if (!doc.contains("data") || !doc["data"].is_array())
    throw UnsupportedFormat("squad_json: missing top-level 'data' array");
  size_t para_ordinal = 0;
  for (const auto& article : doc["data"]) {
    std::string title = article.value("title", "");
    size_t para_in_article = 0;
    for (const auto& para : article["paragraphs"]) {
      Context ctx;
      if (para.contains("context_id"))
        ctx.id = para["context_id"].get<std::string>();
      else if (!title.empty())
        ctx.id = title + "#" + std::to_string(para_in_article);
      else
        ctx.id = "para_" + std::to_string(para_ordinal);
      ctx.text = para.at("context").get<std::string>();
      out.contexts.push_back(ctx);
      ++para_in_article;
      ++para_ordinal;

      for (const auto& qa : para.at("qas")) {
        QAExample ex;
        ex.context_ref = ctx.id;
        ex.example_id = qa.at("id").is_string() ? qa["id"].get<std::string>()
                                                : qa["id"].dump();
        ex.question = qa.at("question").get<std::string>();
        const auto& answers = qa.at("answers");
        if (answers.empty()) throw MalformedRecord("no answers: " + ex.example_id);
        const auto& first = answers[0];
        ex.answer.text = first.at("text").get<std::string>();
        ex.answer.char_start = first.at("answer_start").get<size_t>();
        ex.answer.char_end = ex.answer.char_start + ex.answer.text.size();
        for (size_t i = 1; i < answers.size(); ++i) {
          std::string alt = answers[i].at("text").get<std::string>();
          if (alt != ex.answer.text &&
              std::find(ex.alt_answers.begin(), ex.alt_answers.end(), alt) ==
                  ex.alt_answers.end())
            ex.alt_answers.push_back(alt);
        }
        if (qa.contains("alt_answers"))
          for (const auto& alt : qa["alt_answers"])
            ex.alt_answers.push_back(alt.get<std::string>());
        if (qa.value("origin", "annotated") == std::string("synthetic"))
          ex.origin = Origin::synthetic;
        if (qa.contains("gen_loglik")) ex.gen_loglik = qa["gen_loglik"].get<double>();
        out.examples.push_back(std::move(ex));
      }
    }
  }
}

inline void load_mrqa_jsonl(const std::string& body, CorpusSplit& out) {
  std::istringstream in(body);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec = nlohmann::json::parse(line);
    if (rec.contains("header")) continue;  // MRQA files open with a header line
    Context ctx;
    if (rec.contains("id"))
      ctx.id = rec["id"].is_string() ? rec["id"].get<std::string>() : rec["id"].dump();
    else
      ctx.id = "ctx_" + std::to_string(lineno);
    ctx.text = rec.at("context").get<std::string>();
    out.contexts.push_back(ctx);

    for (const auto& qa : rec.at("qas")) {
      QAExample ex;
      ex.context_ref = ctx.id;
      if (qa.contains("qid"))
        ex.example_id = qa["qid"].get<std::string>();
      else
        ex.example_id = qa.at("id").get<std::string>();
      ex.question = qa.at("question").get<std::string>();
      const auto& det = qa.at("detected_answers");
      if (det.empty()) throw MalformedRecord("no detected_answers: " + ex.example_id);
      const auto& first = det[0];
      ex.answer.text = first.at("text").get<std::string>();
      const auto& span = first.at("char_spans").at(0);
      ex.answer.char_start = span.at(0).get<size_t>();
      ex.answer.char_end = span.at(1).get<size_t>() + 1;  // MRQA spans are inclusive
      if (qa.contains("answers"))
        for (const auto& alt : qa["answers"]) {
          std::string s = alt.get<std::string>();
          if (s != ex.answer.text &&
              std::find(ex.alt_answers.begin(), ex.alt_answers.end(), s) ==
                  ex.alt_answers.end())
            ex.alt_answers.push_back(s);
        }
      if (qa.value("origin", "annotated") == std::string("synthetic"))
        ex.origin = Origin::synthetic;
      if (qa.contains("gen_loglik")) ex.gen_loglik = qa["gen_loglik"].get<double>();
      out.examples.push_back(std::move(ex));
    }
  }
}

}  // namespace detail

inline CorpusSplit load_corpus(const std::string& path, CorpusFormat format,
                               SplitName name = SplitName::target_annotated) {
  if (path.size() > 3 && path.substr(path.size() - 3) == ".gz")
    throw UnsupportedFormat("gzipped input not supported, decompress first: " + path);
  std::string body = read_file(path);
  CorpusSplit out;
  out.name = name;
  switch (format) {
    case CorpusFormat::squad_json: detail::load_squad_json(body, out); break;
    case CorpusFormat::mrqa_jsonl: detail::load_mrqa_jsonl(body, out); break;
    default: throw UnsupportedFormat("unknown corpus format");
  }
  out.rebuild_index();
  validate_split(out);
  return out;
}

/// Canonical on-disk form: SQuAD-style JSON with explicit context ids and,
/// for synthetic examples, `origin` and `gen_loglik` per qa.
inline std::string serialize_squad_json(const CorpusSplit& split) {
  nlohmann::ordered_json doc;
  doc["version"] = "qve-1";
  auto& data = doc["data"];
  data = nlohmann::ordered_json::array();
  auto& article = data.emplace_back();
  article["title"] = to_string(split.name);
  auto& paragraphs = article["paragraphs"];
  paragraphs = nlohmann::ordered_json::array();

  std::unordered_map<std::string, size_t> para_of_ctx;
  for (const auto& ctx : split.contexts) {
    auto& para = paragraphs.emplace_back();
    para["context_id"] = ctx.id;
    para["context"] = ctx.text;
    para["qas"] = nlohmann::ordered_json::array();
    para_of_ctx[ctx.id] = paragraphs.size() - 1;
  }
  for (const auto& ex : split.examples) {
    auto& qas = paragraphs[para_of_ctx.at(ex.context_ref)]["qas"];
    auto& qa = qas.emplace_back();
    qa["id"] = ex.example_id;
    qa["question"] = ex.question;
    qa["answers"] = nlohmann::ordered_json::array(
        {{{"text", ex.answer.text}, {"answer_start", ex.answer.char_start}}});
    if (!ex.alt_answers.empty()) qa["alt_answers"] = ex.alt_answers;
    if (ex.origin == Origin::synthetic) {
      qa["origin"] = "synthetic";
      qa["gen_loglik"] = *ex.gen_loglik;
    }
  }
  return doc.dump(1);
}

inline void save_corpus(const CorpusSplit& split, const std::string& path) {
  write_file(path, serialize_squad_json(split));
}

/// Seeded uniform subsample of n examples, original order preserved.
inline CorpusSplit subsample_annotations(const CorpusSplit& split, size_t n, uint64_t seed) {
  if (n > split.size())
    throw NTooLarge("requested " + std::to_string(n) + " of " +
                    std::to_string(split.size()) + " examples");
  Rng rng(seed);
  std::vector<size_t> picked = rng.sample_indices(split.size(), n);
  std::sort(picked.begin(), picked.end());
  CorpusSplit out;
  out.name = split.name;
  out.contexts = split.contexts;
  out.examples.reserve(n);
  for (size_t i : picked) out.examples.push_back(split.examples[i]);
  out.rebuild_index();
  return out;
}

/// Context-level partition: every qa of a context lands on the same side.
/// First part receives round(frac * #contexts) contexts.
inline std::pair<CorpusSplit, CorpusSplit> split_source_for_classifier(
    const CorpusSplit& source, double frac, uint64_t seed) {
  if (!(frac > 0.0 && frac < 1.0)) throw Error("frac must be in (0,1)");
  Rng rng(seed);
  std::vector<size_t> order(source.contexts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  size_t n_first = static_cast<size_t>(
      std::llround(frac * static_cast<double>(source.contexts.size())));
  n_first = std::min(n_first, source.contexts.size());
  std::unordered_set<size_t> first_set(order.begin(), order.begin() + n_first);

  CorpusSplit a, b;
  a.name = source.name;
  b.name = source.name;
  std::unordered_set<std::string> a_ctx_ids;
  for (size_t i = 0; i < source.contexts.size(); ++i) {
    if (first_set.count(i)) {
      a.contexts.push_back(source.contexts[i]);
      a_ctx_ids.insert(source.contexts[i].id);
    } else {
      b.contexts.push_back(source.contexts[i]);
    }
  }
  for (const auto& ex : source.examples) {
    if (a_ctx_ids.count(ex.context_ref))
      a.examples.push_back(ex);
    else
      b.examples.push_back(ex);
  }
  a.rebuild_index();
  b.rebuild_index();
  return {std::move(a), std::move(b)};
}

/// (context index, answer) pairs in corpus order, one per example; the raw
/// material handed to a question generator.
inline std::vector<std::pair<size_t, AnswerSpan>> context_answer_pairs(
    const CorpusSplit& split) {
  std::vector<std::pair<size_t, AnswerSpan>> out;
  out.reserve(split.examples.size());
  for (const auto& ex : split.examples)
    out.emplace_back(split.context_index(ex.context_ref), ex.answer);
  return out;
}

}  // namespace qve
