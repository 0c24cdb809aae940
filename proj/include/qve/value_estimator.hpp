#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "qve/learners.hpp"
#include "qve/metrics.hpp"
#include "qve/text.hpp"
#include "qve/util.hpp"

namespace qve {

struct DimensionMismatch : Error {
  using Error::Error;
};
struct EmptySplit : Error {
  using Error::Error;
};
struct EmptyPairs : Error {
  using Error::Error;
};

inline constexpr double kProbEps = 1e-6;

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// ---------------------------------------------------------------------------
// Input encoding: [CLS] question [ANS] answer [SEP] context. Truncation only
// ever drops context tokens from the tail.
// ---------------------------------------------------------------------------

struct QveInputEncoding {
  std::vector<std::string> tokens;
  size_t question_len = 0;
  size_t answer_len = 0;
  size_t context_len = 0;
};

inline QveInputEncoding build_input_encoding(const std::string& question,
                                             const std::string& answer,
                                             const std::string& context,
                                             size_t max_len = 384) {
  QveInputEncoding enc;
  auto q = tokenize(question);
  auto a = tokenize(answer);
  auto c = tokenize(context);
  enc.question_len = q.size();
  enc.answer_len = a.size();
  enc.tokens.reserve(q.size() + a.size() + c.size() + 3);
  enc.tokens.push_back("[CLS]");
  for (auto& t : q) enc.tokens.push_back(t.text);
  enc.tokens.push_back("[ANS]");
  for (auto& t : a) enc.tokens.push_back(t.text);
  enc.tokens.push_back("[SEP]");
  size_t used = enc.tokens.size();
  size_t room = max_len > used ? max_len - used : 0;
  enc.context_len = std::min(c.size(), room);
  for (size_t i = 0; i < enc.context_len; ++i) enc.tokens.push_back(c[i].text);
  return enc;
}

class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual Eigen::VectorXd encode(const QveInputEncoding& enc) const = 0;
  virtual size_t dim() const = 0;
};

// Hashed bag-of-ngram pooled representation; the desk-scale stand-in for a
// pretrained sequence encoder. L2-normalized so downstream layers see
// bounded inputs.
class HashedEncoder : public Encoder {
 public:
  HashedEncoder(size_t dim, uint64_t seed) : dim_(dim), salt_(seed) {
    if (dim < 8) throw Error("encoder dim must be >= 8");
  }

  Eigen::VectorXd encode(const QveInputEncoding& enc) const override {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim_));
    const auto& t = enc.tokens;
    size_t q_begin = 1, q_end = q_begin + enc.question_len;
    size_t a_begin = q_end + 1, a_end = a_begin + enc.answer_len;
    size_t c_begin = a_end + 1, c_end = c_begin + enc.context_len;

    auto add = [&](uint64_t h) { v[static_cast<Eigen::Index>(h % dim_)] += 1.0; };

    for (size_t i = q_begin; i < q_end; ++i) add(mix("qu", t[i]));
    for (size_t i = q_begin; i + 1 < q_end; ++i) add(mix("qb", t[i], t[i + 1]));
    if (enc.question_len > 0) add(mix("q0", t[q_begin]));
    if (enc.question_len > 1) add(mix("q01", t[q_begin], t[q_begin + 1]));
    add(mix("qlast", enc.question_len ? t[q_end - 1] : "-"));
    add(mix("qlen", std::to_string(std::min<size_t>(enc.question_len, 15))));

    for (size_t i = a_begin; i < a_end; ++i) add(mix("au", t[i]));
    for (size_t i = c_begin; i < c_end; ++i) add(mix("cu", t[i]));

    // cross cues: answer tokens repeated in the question flag verbatim copies
    size_t a_in_q = 0;
    for (size_t i = a_begin; i < a_end; ++i)
      for (size_t j = q_begin; j < q_end; ++j)
        if (t[i] == t[j]) {
          ++a_in_q;
          break;
        }
    add(mix("aq", std::to_string(std::min<size_t>(a_in_q, 3))));
    size_t q_in_c = 0;
    for (size_t j = q_begin; j < q_end; ++j) {
      if (is_function_word(t[j])) continue;
      for (size_t i = c_begin; i < c_end; ++i)
        if (t[i] == t[j]) {
          ++q_in_c;
          break;
        }
    }
    add(mix("qc", std::to_string(std::min<size_t>(q_in_c, 5))));

    double n = v.norm();
    if (n > 0) v /= n;
    return v;
  }

  size_t dim() const override { return dim_; }

 private:
  uint64_t mix(std::string_view tag, std::string_view a = "", std::string_view b = "") const {
    uint64_t h = fnv1a64(tag, salt_ ^ 0xa0761d6478bd642fULL);
    h = fnv1a64(a, h);
    h = fnv1a64("\x1f", h);
    h = fnv1a64(b, h);
    return h;
  }

  size_t dim_;
  uint64_t salt_;
};

// ---------------------------------------------------------------------------
// ValueHead: three tanh layers over (h, p_s, p_e) ending in a scalar score.
// ---------------------------------------------------------------------------

struct HeadDims {
  size_t h = 768;
  size_t h1 = 768;
  size_t h2 = 64;
  size_t h3 = 768;
};

struct QuestionValue {
  double raw = 0.0;
  double prob = 0.5;  // logistic(raw) clamped to [eps, 1-eps]
};

struct ValueHead {
  HeadDims dims;
  Eigen::MatrixXd W1, W2, W3;
  Eigen::VectorXd b1, b2, b3, W4;
  double b4 = 0.0;

  static ValueHead zeros(const HeadDims& d) {
    ValueHead h;
    h.dims = d;
    h.W1 = Eigen::MatrixXd::Zero(d.h1, d.h);
    h.b1 = Eigen::VectorXd::Zero(d.h1);
    h.W2 = Eigen::MatrixXd::Zero(d.h2, d.h1);
    h.b2 = Eigen::VectorXd::Zero(d.h2);
    h.W3 = Eigen::MatrixXd::Zero(d.h3, d.h2 + 2);
    h.b3 = Eigen::VectorXd::Zero(d.h3);
    h.W4 = Eigen::VectorXd::Zero(d.h3);
    h.b4 = 0.0;
    return h;
  }

  // Xavier-uniform weights, zero biases; raw starts near 0 so selection
  // probabilities start near 0.5.
  static ValueHead random_init(const HeadDims& d, Rng& rng) {
    ValueHead h = zeros(d);
    auto fill = [&](Eigen::MatrixXd& m, size_t fan_in, size_t fan_out) {
      double lim = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.uniform(-lim, lim);
    };
    fill(h.W1, d.h, d.h1);
    fill(h.W2, d.h1, d.h2);
    fill(h.W3, d.h2 + 2, d.h3);
    Eigen::MatrixXd w4 = Eigen::MatrixXd::Zero(d.h3, 1);
    fill(w4, d.h3, 1);
    h.W4 = w4.col(0);
    return h;
  }

  std::string serialize() const {
    std::string s = "qvehead1";
    auto put_u64 = [&](uint64_t v) {
      char buf[8];
      std::memcpy(buf, &v, 8);
      s.append(buf, 8);
    };
    auto put_mat = [&](const Eigen::MatrixXd& m) {
      size_t bytes = static_cast<size_t>(m.size()) * sizeof(double);
      size_t old = s.size();
      s.resize(old + bytes);
      std::memcpy(s.data() + old, m.data(), bytes);
    };
    put_u64(dims.h);
    put_u64(dims.h1);
    put_u64(dims.h2);
    put_u64(dims.h3);
    put_mat(W1);
    put_mat(b1);
    put_mat(W2);
    put_mat(b2);
    put_mat(W3);
    put_mat(b3);
    put_mat(W4);
    put_mat(Eigen::MatrixXd::Constant(1, 1, b4));
    return s;
  }

  static ValueHead deserialize(const std::string& s) {
    if (s.size() < 8 || s.compare(0, 8, "qvehead1") != 0)
      throw Error("not a value head blob");
    size_t off = 8;
    auto get_u64 = [&]() {
      if (off + 8 > s.size()) throw Error("value head blob truncated");
      uint64_t v;
      std::memcpy(&v, s.data() + off, 8);
      off += 8;
      return v;
    };
    HeadDims d;
    d.h = get_u64();
    d.h1 = get_u64();
    d.h2 = get_u64();
    d.h3 = get_u64();
    ValueHead h = zeros(d);
    auto get_mat = [&](Eigen::MatrixXd& m) {
      size_t bytes = static_cast<size_t>(m.size()) * sizeof(double);
      if (off + bytes > s.size()) throw Error("value head blob truncated");
      std::memcpy(m.data(), s.data() + off, bytes);
      off += bytes;
    };
    auto get_vec = [&](Eigen::VectorXd& v) {
      size_t bytes = static_cast<size_t>(v.size()) * sizeof(double);
      if (off + bytes > s.size()) throw Error("value head blob truncated");
      std::memcpy(v.data(), s.data() + off, bytes);
      off += bytes;
    };
    get_mat(h.W1);
    get_vec(h.b1);
    get_mat(h.W2);
    get_vec(h.b2);
    get_mat(h.W3);
    get_vec(h.b3);
    get_vec(h.W4);
    Eigen::MatrixXd last(1, 1);
    get_mat(last);
    h.b4 = last(0, 0);
    return h;
  }
};

struct HeadForwardCache {
  Eigen::VectorXd h;
  double p_s = 0.0, p_e = 0.0;
  Eigen::VectorXd z1, z2, z3;
  double raw = 0.0;
  double sigmoid = 0.5;  // unclamped logistic(raw), used for gradients
};

/// h' = tanh(W2 tanh(W1 h + b1) + b2); h'' = tanh(W3 (h' ++ p_s ++ p_e) + b3);
/// raw = W4 . h'' + b4; prob = clamp(logistic(raw)).
inline QuestionValue qve_forward(const ValueHead& head, const Eigen::VectorXd& h,
                                 double p_s, double p_e,
                                 HeadForwardCache* cache = nullptr) {
  if (static_cast<size_t>(h.size()) != head.dims.h)
    throw DimensionMismatch("h has dim " + std::to_string(h.size()) + ", expected " +
                            std::to_string(head.dims.h));
  if (!(p_s >= 0.0 && p_s <= 1.0 && p_e >= 0.0 && p_e <= 1.0))
    throw Error("p_s/p_e must lie in [0,1]");
  Eigen::VectorXd z1 = (head.W1 * h + head.b1).array().tanh();
  Eigen::VectorXd z2 = (head.W2 * z1 + head.b2).array().tanh();
  Eigen::VectorXd u(z2.size() + 2);
  u << z2, p_s, p_e;
  Eigen::VectorXd z3 = (head.W3 * u + head.b3).array().tanh();
  double raw = head.W4.dot(z3) + head.b4;
  double sig = logistic(raw);
  QuestionValue out;
  out.raw = raw;
  out.prob = std::min(1.0 - kProbEps, std::max(kProbEps, sig));
  if (cache) {
    cache->h = h;
    cache->p_s = p_s;
    cache->p_e = p_e;
    cache->z1 = std::move(z1);
    cache->z2 = std::move(z2);
    cache->z3 = std::move(z3);
    cache->raw = raw;
    cache->sigmoid = sig;
  }
  return out;
}

struct HeadGrads {
  Eigen::MatrixXd W1, W2, W3;
  Eigen::VectorXd b1, b2, b3, W4;
  double b4 = 0.0;

  explicit HeadGrads(const HeadDims& d) {
    W1 = Eigen::MatrixXd::Zero(d.h1, d.h);
    b1 = Eigen::VectorXd::Zero(d.h1);
    W2 = Eigen::MatrixXd::Zero(d.h2, d.h1);
    b2 = Eigen::VectorXd::Zero(d.h2);
    W3 = Eigen::MatrixXd::Zero(d.h3, d.h2 + 2);
    b3 = Eigen::VectorXd::Zero(d.h3);
    W4 = Eigen::VectorXd::Zero(d.h3);
    b4 = 0.0;
  }

  void scale(double c) {
    W1 *= c;
    b1 *= c;
    W2 *= c;
    b2 *= c;
    W3 *= c;
    b3 *= c;
    W4 *= c;
    b4 *= c;
  }
};

/// Accumulates d(loss)/d(params) given d(loss)/d(raw) for one forward pass.
inline void head_backward(const ValueHead& head, const HeadForwardCache& c, double d_raw,
                          HeadGrads& g) {
  g.W4 += d_raw * c.z3;
  g.b4 += d_raw;
  Eigen::VectorXd dz3 = d_raw * head.W4;
  Eigen::VectorXd da3 = dz3.array() * (1.0 - c.z3.array().square());
  Eigen::VectorXd u(c.z2.size() + 2);
  u << c.z2, c.p_s, c.p_e;
  g.W3 += da3 * u.transpose();
  g.b3 += da3;
  Eigen::VectorXd du = head.W3.transpose() * da3;
  Eigen::VectorXd dz2 = du.head(c.z2.size());
  Eigen::VectorXd da2 = dz2.array() * (1.0 - c.z2.array().square());
  g.W2 += da2 * c.z1.transpose();
  g.b2 += da2;
  Eigen::VectorXd dz1 = head.W2.transpose() * da2;
  Eigen::VectorXd da1 = dz1.array() * (1.0 - c.z1.array().square());
  g.W1 += da1 * c.h.transpose();
  g.b1 += da1;
}

inline void sgd_step(ValueHead& head, const HeadGrads& g, double lr) {
  head.W1 -= lr * g.W1;
  head.b1 -= lr * g.b1;
  head.W2 -= lr * g.W2;
  head.b2 -= lr * g.b2;
  head.W3 -= lr * g.W3;
  head.b3 -= lr * g.b3;
  head.W4 -= lr * g.W4;
  head.b4 -= lr * g.b4;
}

// ---------------------------------------------------------------------------
// Estimator: encoder + head + the reader supplying p_s/p_e features.
// ---------------------------------------------------------------------------

enum class SpanProbSource { labeled, argmax };

struct ExampleFeatures {
  Eigen::VectorXd h;
  double p_s = 0.0, p_e = 0.0;
};

struct ScoredExample {
  std::string example_id;
  double raw = 0.0;
  double prob = 0.5;
};

class Estimator {
 public:
  Estimator(std::shared_ptr<Encoder> encoder, ValueHead head,
            SpanProbSource prob_source = SpanProbSource::labeled,
            size_t max_input_tokens = 384)
      : encoder_(std::move(encoder)),
        head_(std::move(head)),
        prob_source_(prob_source),
        max_input_tokens_(max_input_tokens) {
    if (encoder_->dim() != head_.dims.h)
      throw DimensionMismatch("encoder dim != head input dim");
  }

  ValueHead& head() { return head_; }
  const ValueHead& head() const { return head_; }
  const Encoder& encoder() const { return *encoder_; }

  ExampleFeatures features_for(const Context& ctx, const QAExample& ex,
                               const QAReader& reader) const {
    uint64_t key = fnv1a64(ex.example_id);
    key = fnv1a64(ex.question, key);
    key = fnv1a64(ex.answer.text, key);
    key = fnv1a64(ctx.id, key);
    auto it = feature_cache_.find(key);
    if (it != feature_cache_.end()) return it->second;

    ExampleFeatures f;
    f.h = encoder_->encode(
        build_input_encoding(ex.question, ex.answer.text, ctx.text, max_input_tokens_));
    if (prob_source_ == SpanProbSource::labeled) {
      auto [ps, pe] = reader.span_probs(ctx, ex.question, ex.answer);
      f.p_s = ps;
      f.p_e = pe;
    } else {
      Prediction p = reader.predict(ctx, ex.question);
      f.p_s = p.p_s;
      f.p_e = p.p_e;
    }
    feature_cache_.emplace(key, f);
    return f;
  }

  QuestionValue value_of(const Context& ctx, const QAExample& ex, const QAReader& reader,
                         HeadForwardCache* cache = nullptr) const {
    ExampleFeatures f = features_for(ctx, ex, reader);
    return qve_forward(head_, f.h, f.p_s, f.p_e, cache);
  }

  void clear_cache() const { feature_cache_.clear(); }

  std::string serialize() const { return head_.serialize(); }
  void restore_head(const std::string& blob) { head_ = ValueHead::deserialize(blob); }

 private:
  std::shared_ptr<Encoder> encoder_;
  ValueHead head_;
  SpanProbSource prob_source_;
  size_t max_input_tokens_;
  mutable std::unordered_map<uint64_t, ExampleFeatures> feature_cache_;
};

/// Scores every example of a split, in split order.
inline std::vector<ScoredExample> score_corpus(const Estimator& est,
                                               const CorpusSplit& split,
                                               const QAReader& reader) {
  std::vector<ScoredExample> out;
  out.reserve(split.size());
  for (const auto& ex : split.examples) {
    QuestionValue v = est.value_of(split.context_of(ex), ex, reader);
    out.push_back({ex.example_id, v.raw, v.prob});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Non-RL trainers.
// ---------------------------------------------------------------------------

/// Binary cross-entropy against labels {annotated: 1, synthetic: 0}.
/// One SGD step per minibatch; epochs sweep shuffled example order.
inline void train_binary_classifier(Estimator& est, const CorpusSplit& positives,
                                    const CorpusSplit& negatives, const QAReader& reader,
                                    int epochs, double lr, uint64_t seed,
                                    size_t batch_size = 8) {
  if (positives.size() == 0 || negatives.size() == 0)
    throw EmptySplit("binary classifier needs non-empty positives and negatives");
  struct Item {
    const CorpusSplit* split;
    size_t index;
    double label;
  };
  std::vector<Item> items;
  items.reserve(positives.size() + negatives.size());
  for (size_t i = 0; i < positives.size(); ++i) items.push_back({&positives, i, 1.0});
  for (size_t i = 0; i < negatives.size(); ++i) items.push_back({&negatives, i, 0.0});

  Rng rng(seed);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(items);
    for (size_t pos = 0; pos < items.size(); pos += batch_size) {
      size_t end = std::min(pos + batch_size, items.size());
      HeadGrads g(est.head().dims);
      for (size_t k = pos; k < end; ++k) {
        const Item& it = items[k];
        const QAExample& ex = it.split->examples[it.index];
        HeadForwardCache cache;
        est.value_of(it.split->context_of(ex), ex, reader, &cache);
        double d_raw = cache.sigmoid - it.label;  // d(BCE)/d(raw)
        head_backward(est.head(), cache, d_raw, g);
      }
      g.scale(1.0 / static_cast<double>(end - pos));
      sgd_step(est.head(), g, lr);
    }
  }
}

struct RankingPair {
  BatchItem synthetic;
  BatchItem annotated;
};

/// Context-matched pairs (same context id) when possible, otherwise a random
/// annotated partner.
inline std::vector<RankingPair> make_ranking_pairs(const CorpusSplit& synthetic,
                                                   const CorpusSplit& annotated,
                                                   uint64_t seed) {
  if (annotated.size() == 0) throw EmptyPairs("no annotated examples to pair with");
  std::unordered_map<std::string, std::vector<size_t>> ann_by_ctx;
  for (size_t i = 0; i < annotated.size(); ++i)
    ann_by_ctx[annotated.examples[i].context_ref].push_back(i);
  Rng rng(seed);
  std::vector<RankingPair> pairs;
  pairs.reserve(synthetic.size());
  for (const auto& sex : synthetic.examples) {
    size_t ann_idx;
    auto it = ann_by_ctx.find(sex.context_ref);
    if (it != ann_by_ctx.end())
      ann_idx = it->second[rng.uniform_int(it->second.size())];
    else
      ann_idx = rng.uniform_int(annotated.size());
    const QAExample& aex = annotated.examples[ann_idx];
    pairs.push_back({{&synthetic.context_of(sex), &sex},
                     {&annotated.context_of(aex), &aex}});
  }
  return pairs;
}

inline double ranking_pair_loss(double v_synthetic, double v_annotated, double margin) {
  return std::max(0.0, margin + v_synthetic - v_annotated);
}

/// Triplet hinge: sum of max(0, m + v_syn - v_ann) over pairs.
inline void train_ranking(Estimator& est, const std::vector<RankingPair>& pairs,
                          const QAReader& reader, double margin, int epochs, double lr,
                          uint64_t seed, size_t batch_size = 8) {
  if (pairs.empty()) throw EmptyPairs("ranking trainer needs at least one pair");
  if (!(margin > 0)) throw Error("margin must be positive");
  std::vector<size_t> order(pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t pos = 0; pos < order.size(); pos += batch_size) {
      size_t end = std::min(pos + batch_size, order.size());
      HeadGrads g(est.head().dims);
      for (size_t k = pos; k < end; ++k) {
        const RankingPair& pr = pairs[order[k]];
        HeadForwardCache cs, ca;
        QuestionValue vs = est.value_of(*pr.synthetic.ctx, *pr.synthetic.ex, reader, &cs);
        QuestionValue va = est.value_of(*pr.annotated.ctx, *pr.annotated.ex, reader, &ca);
        if (ranking_pair_loss(vs.prob, va.prob, margin) > 0.0) {
          head_backward(est.head(), cs, cs.sigmoid * (1.0 - cs.sigmoid), g);
          head_backward(est.head(), ca, -ca.sigmoid * (1.0 - ca.sigmoid), g);
        }
      }
      g.scale(1.0 / static_cast<double>(end - pos));
      sgd_step(est.head(), g, lr);
    }
  }
}

}  // namespace qve
