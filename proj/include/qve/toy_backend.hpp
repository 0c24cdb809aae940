#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "qve/learners.hpp"
#include "qve/text.hpp"
#include "qve/util.hpp"

namespace qve {

// ---------------------------------------------------------------------------
// ToyReader: linear span scorer over hashed bag-of-ngram features with
// softmax start/end heads. Deliberately low-capacity; everything runs on one
// CPU core in seconds. Fully deterministic given (dim, salt).
// ---------------------------------------------------------------------------

class ToyReader : public QAReader {
 public:
  ToyReader(size_t vocab_hash_dim, uint64_t seed)
      : dim_(vocab_hash_dim), salt_(seed), w_start_(dim_, 0.0), w_end_(dim_, 0.0) {
    if (vocab_hash_dim < 64) throw Error("vocab_hash_dim must be >= 64");
  }

  void train_step(std::span<const BatchItem> batch, std::span<const int> weights,
                  double lr) override {
    if (batch.size() != weights.size()) throw LengthMismatch("batch/weights size");
    bool any = false;
    for (int w : weights) any |= (w != 0);
    if (!any || batch.empty()) return;  // masked-out step leaves params untouched

    std::unordered_map<uint32_t, double> g_start, g_end;
    for (size_t l = 0; l < batch.size(); ++l) {
      if (!weights[l]) continue;
      accumulate_gradient(*batch[l].ctx, *batch[l].ex, g_start, g_end);
    }
    double scale = lr / static_cast<double>(batch.size());
    for (const auto& [f, g] : g_start) w_start_[f] -= scale * g;
    for (const auto& [f, g] : g_end) w_end_[f] -= scale * g;
  }

  Prediction predict(const Context& ctx, const std::string& question) const override {
    PositionScores ps = score_positions(ctx, question);
    if (ps.start_prob.empty()) return {"", 0.0, 0.0};
    size_t s = argmax(ps.start_prob);
    // best end within a short window after the chosen start
    size_t best_e = s;
    double best = -1.0;
    for (size_t e = s; e < ps.end_prob.size() && e < s + kMaxSpanTokens; ++e) {
      if (ps.end_prob[e] > best) {
        best = ps.end_prob[e];
        best_e = e;
      }
    }
    const auto& toks = ps.tokens;
    Prediction out;
    out.text = ctx.text.substr(toks[s].begin, toks[best_e].end - toks[s].begin);
    out.p_s = ps.start_prob[s];
    out.p_e = ps.end_prob[best_e];
    return out;
  }

  std::pair<double, double> span_probs(const Context& ctx, const std::string& question,
                                       const AnswerSpan& span) const override {
    PositionScores ps = score_positions(ctx, question);
    auto [s, e] = token_span(ps.tokens, span);
    if (s == kNoPos) return {1e-9, 1e-9};
    return {ps.start_prob[s], ps.end_prob[e]};
  }

  double loss(std::span<const BatchItem> batch) const override {
    if (batch.empty()) return 0.0;
    double total = 0.0;
    for (const auto& item : batch) total += example_loss(*item.ctx, *item.ex);
    return total / static_cast<double>(batch.size());
  }

  LearnerCheckpoint snapshot(const std::string& tag = "") const override {
    LearnerCheckpoint c;
    c.tag = tag;
    c.blob.reserve(16 + 2 * 8 + dim_ * 2 * sizeof(double));
    c.blob += "toyreader1";
    append_u64(c.blob, dim_);
    append_u64(c.blob, salt_);
    append_doubles(c.blob, w_start_);
    append_doubles(c.blob, w_end_);
    return c;
  }

  void restore(const LearnerCheckpoint& ckpt) override {
    const std::string& b = ckpt.blob;
    if (b.size() < 10 || b.compare(0, 10, "toyreader1") != 0)
      throw Error("not a toy reader checkpoint");
    size_t off = 10;
    size_t dim = read_u64(b, off);
    uint64_t salt = read_u64(b, off);
    if (b.size() != off + 2 * dim * sizeof(double))
      throw Error("toy reader checkpoint truncated");
    dim_ = dim;
    salt_ = salt;
    w_start_.resize(dim_);
    w_end_.resize(dim_);
    std::memcpy(w_start_.data(), b.data() + off, dim_ * sizeof(double));
    off += dim_ * sizeof(double);
    std::memcpy(w_end_.data(), b.data() + off, dim_ * sizeof(double));
  }

  size_t dim() const { return dim_; }

 private:
  static constexpr size_t kMaxSpanTokens = 4;
  static constexpr size_t kNoPos = static_cast<size_t>(-1);

  struct PositionScores {
    std::vector<Token> tokens;
    std::vector<double> start_prob;
    std::vector<double> end_prob;
    std::vector<std::vector<uint32_t>> feats;  // per position, shared by both heads
  };

  uint32_t bucket(uint64_t h) const { return static_cast<uint32_t>(h % dim_); }

  uint64_t mix(std::string_view tag, uint64_t a = 0, uint64_t b = 0) const {
    uint64_t h = fnv1a64(tag, salt_ ^ 0x51ed270b9f0aa3c7ULL);
    h ^= a + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h ^= b + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
  }

  // Position features. A mix of relational cues (question-word windows, which
  // transfer across phrasings) and token-pair memory (capacity-limited).
  std::vector<std::vector<uint32_t>> position_features(
      const std::vector<Token>& toks, const std::vector<uint64_t>& tok_hash,
      const std::unordered_set<std::string>& qset,
      const std::vector<uint64_t>& qcontent) const {
    size_t n = toks.size();
    std::vector<char> in_q(n, 0);
    for (size_t i = 0; i < n; ++i) in_q[i] = qset.count(toks[i].text) ? 1 : 0;
    std::vector<char> is_content(n, 0);
    for (size_t i = 0; i < n; ++i) is_content[i] = !is_function_word(toks[i].text);

    std::unordered_set<uint64_t> qcontent_set(qcontent.begin(), qcontent.end());
    auto content_match = [&](size_t i) {
      return in_q[i] && is_content[i] && qcontent_set.count(tok_hash[i]) > 0;
    };

    std::vector<std::vector<uint32_t>> feats(n);
    for (size_t i = 0; i < n; ++i) {
      auto& f = feats[i];
      f.reserve(10 + qcontent.size());
      f.push_back(bucket(mix("bias")));
      f.push_back(bucket(mix("tok", tok_hash[i])));
      f.push_back(bucket(mix("prev", i > 0 ? tok_hash[i - 1] : 1)));
      f.push_back(bucket(mix("next", i + 1 < n ? tok_hash[i + 1] : 2)));
      f.push_back(bucket(mix("in_q", in_q[i])));
      f.push_back(bucket(mix("prev_in_q", i > 0 ? in_q[i - 1] : 0)));
      int before = 0;
      for (size_t k = (i >= 5 ? i - 5 : 0); k < i; ++k) before += content_match(k);
      int after = 0;
      for (size_t k = i + 1; k < n && k <= i + 5; ++k) after += content_match(k);
      f.push_back(bucket(mix("win_before", std::min(before, 3))));
      f.push_back(bucket(mix("win_after", std::min(after, 3))));
      f.push_back(bucket(mix("content", is_content[i])));
      for (uint64_t qh : qcontent) f.push_back(bucket(mix("pair", qh, tok_hash[i])));
    }
    return feats;
  }

  PositionScores score_positions(const Context& ctx, const std::string& question) const {
    PositionScores ps;
    ps.tokens = tokenize(ctx.text);
    size_t n = ps.tokens.size();
    if (n == 0) return ps;

    std::vector<uint64_t> tok_hash(n);
    for (size_t i = 0; i < n; ++i) tok_hash[i] = fnv1a64(ps.tokens[i].text);

    auto qtoks = tokenize(question);
    std::unordered_set<std::string> qset;
    std::vector<uint64_t> qcontent;
    for (const auto& t : qtoks) {
      qset.insert(t.text);
      if (!is_function_word(t.text) && qcontent.size() < 6)
        qcontent.push_back(fnv1a64(t.text));
    }

    ps.feats = position_features(ps.tokens, tok_hash, qset, qcontent);
    std::vector<double> s_score(n, 0.0), e_score(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
      for (uint32_t f : ps.feats[i]) {
        s_score[i] += w_start_[f];
        e_score[i] += w_end_[f];
      }
    }
    ps.start_prob = softmax(s_score);
    ps.end_prob = softmax(e_score);
    return ps;
  }

  static std::vector<double> softmax(const std::vector<double>& scores) {
    double mx = *std::max_element(scores.begin(), scores.end());
    std::vector<double> p(scores.size());
    double z = 0.0;
    for (size_t i = 0; i < scores.size(); ++i) {
      p[i] = std::exp(scores[i] - mx);
      z += p[i];
    }
    for (auto& v : p) v /= z;
    return p;
  }

  static size_t argmax(const std::vector<double>& v) {
    size_t best = 0;
    for (size_t i = 1; i < v.size(); ++i)
      if (v[i] > v[best]) best = i;
    return best;
  }

  // first/last token overlapping the char span; kNoPos when unmappable
  static std::pair<size_t, size_t> token_span(const std::vector<Token>& toks,
                                              const AnswerSpan& span) {
    size_t s = kNoPos, e = kNoPos;
    for (size_t i = 0; i < toks.size(); ++i) {
      if (toks[i].end > span.char_start && toks[i].begin < span.char_end) {
        if (s == kNoPos) s = i;
        e = i;
      }
    }
    return {s, e};
  }

  double example_loss(const Context& ctx, const QAExample& ex) const {
    PositionScores ps = score_positions(ctx, ex.question);
    auto [s, e] = token_span(ps.tokens, ex.answer);
    if (s == kNoPos) return 0.0;  // unmappable span contributes nothing
    return -std::log(std::max(ps.start_prob[s], 1e-300)) -
           std::log(std::max(ps.end_prob[e], 1e-300));
  }

  void accumulate_gradient(const Context& ctx, const QAExample& ex,
                           std::unordered_map<uint32_t, double>& g_start,
                           std::unordered_map<uint32_t, double>& g_end) const {
    PositionScores ps = score_positions(ctx, ex.question);
    auto [gs, ge] = token_span(ps.tokens, ex.answer);
    if (gs == kNoPos) return;
    for (size_t i = 0; i < ps.tokens.size(); ++i) {
      double ds = ps.start_prob[i] - (i == gs ? 1.0 : 0.0);
      double de = ps.end_prob[i] - (i == ge ? 1.0 : 0.0);
      for (uint32_t f : ps.feats[i]) {
        g_start[f] += ds;
        g_end[f] += de;
      }
    }
  }

  static void append_u64(std::string& s, uint64_t v) {
    char buf[8];
    std::memcpy(buf, &v, 8);
    s.append(buf, 8);
  }
  static uint64_t read_u64(const std::string& s, size_t& off) {
    if (off + 8 > s.size()) throw Error("checkpoint truncated");
    uint64_t v;
    std::memcpy(&v, s.data() + off, 8);
    off += 8;
    return v;
  }
  static void append_doubles(std::string& s, const std::vector<double>& v) {
    size_t bytes = v.size() * sizeof(double);
    size_t old = s.size();
    s.resize(old + bytes);
    std::memcpy(s.data() + old, v.data(), bytes);
  }

  size_t dim_;
  uint64_t salt_;
  std::vector<double> w_start_, w_end_;
};

// ---------------------------------------------------------------------------
// ToyGenerator: template sampler with exactly computable log-likelihoods.
// The cue is the token window just before the answer span, which makes the
// generated question answerable by window-matching. Optional noise modes
// reproduce the failure taxonomy of real generators: semantically-mismatched
// pairings and trivial verbatim copies.
// ---------------------------------------------------------------------------

enum class Quality { clean, mismatched, trivial };

inline const char* to_string(Quality q) {
  switch (q) {
    case Quality::clean: return "clean";
    case Quality::mismatched: return "mismatched";
    case Quality::trivial: return "trivial";
  }
  return "?";
}

class ToyGenerator : public QGGenerator {
 public:
  ToyGenerator(uint64_t seed, double p_mismatch = 0.0, double p_trivial = 0.0)
      : rng_(seed), p_mismatch_(p_mismatch), p_trivial_(p_trivial) {
    if (p_mismatch < 0 || p_trivial < 0 || p_mismatch + p_trivial >= 1.0)
      throw Error("noise rates must be >= 0 with sum < 1");
    template_prob_ = {0.45, 0.25, 0.2, 0.1};
  }

  GeneratedQuestion generate(const Context& ctx, const AnswerSpan& answer) override {
    double u = rng_.uniform01();
    if (u < p_trivial_) return generate_trivial(ctx, answer);
    if (u < p_trivial_ + p_mismatch_) return generate_mismatched(ctx, answer);
    last_quality_ = Quality::clean;
    return templated_question(cue_for(ctx, answer.char_start, answer.char_end),
                              template_prob_);
  }

  // Re-estimates the template mixture from questions that match a known
  // template shape, with add-one smoothing. Deterministic; `epochs` only
  // repeats the (idempotent) fit.
  void finetune(const CorpusSplit& corpus, int epochs) override {
    if (epochs <= 0) throw Error("epochs must be positive");
    std::vector<double> counts(template_prob_.size(), 1.0);
    for (const auto& ex : corpus.examples) {
      int t = match_template(ex.question);
      if (t >= 0) counts[static_cast<size_t>(t)] += 1.0;
    }
    double z = 0.0;
    for (double c : counts) z += c;
    for (size_t i = 0; i < counts.size(); ++i) template_prob_[i] = counts[i] / z;
  }

  Quality last_quality() const { return last_quality_; }

  const std::vector<double>& template_probs() const { return template_prob_; }

  static constexpr double kCopyTokenProb = 0.92;

 private:
  static constexpr size_t kCueWindow = 5;

  static bool is_copula(const std::string& t) {
    return t == "is" || t == "was" || t == "are" || t == "were" || t == "be";
  }

  // Up to kCueWindow tokens immediately before the span, trailing copulas
  // dropped; falls back to the window after the span.
  std::string cue_for(const Context& ctx, size_t char_start, size_t char_end) const {
    auto toks = tokenize(ctx.text);
    size_t as = toks.size(), ae = 0;
    for (size_t i = 0; i < toks.size(); ++i) {
      if (toks[i].end > char_start && toks[i].begin < char_end) {
        as = std::min(as, i);
        ae = std::max(ae, i);
      }
    }
    std::vector<std::string> cue;
    if (as < toks.size()) {
      size_t lo = as >= kCueWindow ? as - kCueWindow : 0;
      for (size_t i = lo; i < as; ++i) cue.push_back(toks[i].text);
      while (!cue.empty() && is_copula(cue.back())) cue.pop_back();
      if (cue.empty()) {
        for (size_t i = ae + 1; i < toks.size() && i <= ae + kCueWindow; ++i)
          cue.push_back(toks[i].text);
        while (!cue.empty() && is_copula(cue.front())) cue.erase(cue.begin());
      }
    }
    if (cue.empty()) cue = {"this", "text"};
    std::string joined;
    for (const auto& t : cue) {
      if (!joined.empty()) joined.push_back(' ');
      joined += t;
    }
    return joined;
  }

  // Samples a template from `sample_probs` but reports the likelihood under
  // the generator's own mixture: a wrong pairing is still a fluent, confident
  // emission from the model's point of view.
  GeneratedQuestion templated_question(const std::string& cue,
                                       const std::vector<double>& sample_probs) {
    double u = rng_.uniform01();
    size_t t = 0;
    double acc = 0.0;
    for (; t + 1 < sample_probs.size(); ++t) {
      acc += sample_probs[t];
      if (u < acc) break;
    }
    GeneratedQuestion q;
    switch (t) {
      case 0: q.question = "what is " + cue + " ?"; break;
      case 1: q.question = cue + " is what ?"; break;
      case 2: q.question = "tell me " + cue + " ."; break;
      default: q.question = "which one is " + cue + " ?"; break;
    }
    q.gen_loglik = std::log(template_prob_[t]);
    return q;
  }

  GeneratedQuestion generate_mismatched(const Context& ctx, const AnswerSpan& answer) {
    // cue taken from a different sentence, answer span left as given; the
    // emission leans on the canonical phrasing, where the generator is most
    // confident
    static const std::vector<double> mismatch_mix = {0.9, 0.04, 0.04, 0.02};
    auto sents = sentence_ranges(ctx.text);
    std::vector<size_t> others;
    for (size_t i = 0; i < sents.size(); ++i)
      if (!(answer.char_start >= sents[i].first && answer.char_start < sents[i].second))
        others.push_back(i);
    if (others.empty()) {
      last_quality_ = Quality::clean;
      return templated_question(cue_for(ctx, answer.char_start, answer.char_end),
                                template_prob_);
    }
    auto [lo, hi] = sents[others[rng_.uniform_int(others.size())]];
    auto toks = tokenize(ctx.text.substr(lo, hi - lo));
    if (toks.empty()) {
      last_quality_ = Quality::clean;
      return templated_question(cue_for(ctx, answer.char_start, answer.char_end),
                                template_prob_);
    }
    // anchor on the sentence's final token (the value slot in fact-style text)
    size_t anchor_begin = lo + toks.back().begin;
    size_t anchor_end = lo + toks.back().end;
    last_quality_ = Quality::mismatched;
    return templated_question(cue_for(ctx, anchor_begin, anchor_end), mismatch_mix);
  }

  GeneratedQuestion generate_trivial(const Context& ctx, const AnswerSpan& answer) {
    auto sents = sentence_ranges(ctx.text);
    std::pair<size_t, size_t> sent{0, ctx.text.size()};
    for (const auto& r : sents)
      if (answer.char_start >= r.first && answer.char_start < r.second) sent = r;
    std::string q = ctx.text.substr(sent.first, sent.second - sent.first);
    // trim surrounding whitespace, keep the copy otherwise verbatim
    size_t b = q.find_first_not_of(" \t\n");
    size_t e = q.find_last_not_of(" \t\n");
    q = (b == std::string::npos) ? ctx.text : q.substr(b, e - b + 1);
    GeneratedQuestion out;
    out.question = q;
    size_t n_toks = tokenize(q).size();
    out.gen_loglik = static_cast<double>(std::max<size_t>(n_toks, 1)) *
                     std::log(kCopyTokenProb);
    last_quality_ = Quality::trivial;
    return out;
  }

  int match_template(const std::string& question) const {
    auto toks = tokenize(question);
    if (toks.size() < 2) return -1;
    auto starts_with = [&](std::initializer_list<const char*> words) {
      size_t i = 0;
      for (const char* w : words) {
        if (i >= toks.size() || toks[i].text != w) return false;
        ++i;
      }
      return true;
    };
    if (starts_with({"what", "is"})) return 0;
    if (toks.size() >= 2 && toks[toks.size() - 2].text == "is" &&
        toks.back().text == "what")
      return 1;
    if (starts_with({"tell", "me"})) return 2;
    if (starts_with({"which", "one", "is"})) return 3;
    return -1;
  }

  Rng rng_;
  double p_mismatch_;
  double p_trivial_;
  std::vector<double> template_prob_;
  Quality last_quality_ = Quality::clean;
};

/// Deterministic desk-scale backend pair.
inline std::pair<std::unique_ptr<QAReader>, std::unique_ptr<QGGenerator>> toy_backend_build(
    size_t vocab_hash_dim, uint64_t seed) {
  if (vocab_hash_dim < 64) throw Error("vocab_hash_dim must be >= 64");
  return {std::make_unique<ToyReader>(vocab_hash_dim, seed),
          std::make_unique<ToyGenerator>(derive_seed(seed, "toy_qg"))};
}

}  // namespace qve
