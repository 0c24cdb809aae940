#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qve/corpus.hpp"
#include "qve/util.hpp"

namespace qve {

struct LengthMismatch : Error {
  using Error::Error;
};

/// Opaque serialized parameter state. Content-addressed: two checkpoints
/// hold equal parameters iff their blobs are byte-identical.
struct LearnerCheckpoint {
  std::string blob;
  std::string tag;

  uint64_t content_address() const { return fnv1a64(blob); }
  bool same_params(const LearnerCheckpoint& other) const { return blob == other.blob; }
};

struct Prediction {
  std::string text;
  double p_s = 0.0;  // probability of the predicted start position
  double p_e = 0.0;  // probability of the predicted end position
};

struct BatchItem {
  const Context* ctx = nullptr;
  const QAExample* ex = nullptr;
};

inline std::vector<BatchItem> make_batch(const CorpusSplit& split,
                                         std::span<const size_t> indices) {
  std::vector<BatchItem> batch;
  batch.reserve(indices.size());
  for (size_t i : indices)
    batch.push_back({&split.context_of(split.examples[i]), &split.examples[i]});
  return batch;
}

inline std::vector<BatchItem> make_batch(const CorpusSplit& split) {
  std::vector<size_t> all(split.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_batch(split, all);
}

/// Extractive QA reader contract. Single-writer: train_step must not race
/// with predict on the same instance. snapshot/restore round-trips exactly.
class QAReader {
 public:
  virtual ~QAReader() = default;

  // One weight-masked gradient step: params -= (lr / batch.size()) * sum_l
  // w_l * grad(loss_l). An all-zero mask must leave parameters bit-identical.
  virtual void train_step(std::span<const BatchItem> batch, std::span<const int> weights,
                          double lr) = 0;

  virtual Prediction predict(const Context& ctx, const std::string& question) const = 0;

  // start/end probabilities the model assigns to a given labeled span
  virtual std::pair<double, double> span_probs(const Context& ctx,
                                               const std::string& question,
                                               const AnswerSpan& span) const = 0;

  virtual double loss(std::span<const BatchItem> batch) const = 0;

  virtual LearnerCheckpoint snapshot(const std::string& tag = "") const = 0;
  virtual void restore(const LearnerCheckpoint& ckpt) = 0;
};

struct GeneratedQuestion {
  std::string question;
  double gen_loglik = 0.0;  // sum of per-token log-probabilities, <= 0
};

class QGGenerator {
 public:
  virtual ~QGGenerator() = default;
  virtual GeneratedQuestion generate(const Context& ctx, const AnswerSpan& answer) = 0;
  virtual void finetune(const CorpusSplit& corpus, int epochs) = 0;
};

/// Validated weight-masked QA update (Algorithm step: mask inside the sum,
/// divide by the full batch size).
inline void qa_weighted_update(QAReader& reader, std::span<const BatchItem> batch,
                               std::span<const int> weights, double lr) {
  if (batch.size() != weights.size())
    throw LengthMismatch("batch size " + std::to_string(batch.size()) +
                         " != weights size " + std::to_string(weights.size()));
  reader.train_step(batch, weights, lr);
}

/// One synthetic example per (context, answer) pair, order preserved.
inline CorpusSplit generate_synthetic(QGGenerator& gen,
                                      const std::vector<std::pair<Context, AnswerSpan>>& pairs,
                                      const std::string& id_prefix = "syn") {
  CorpusSplit out;
  out.name = SplitName::target_synthetic;
  std::unordered_map<std::string, bool> seen_ctx;
  for (size_t k = 0; k < pairs.size(); ++k) {
    const auto& [ctx, answer] = pairs[k];
    GeneratedQuestion gq;
    try {
      gq = gen.generate(ctx, answer);
    } catch (const std::exception& e) {
      throw Error("generation failed for item " + std::to_string(k) + " (context " +
                  ctx.id + "): " + e.what());
    }
    if (!seen_ctx[ctx.id]) {
      seen_ctx[ctx.id] = true;
      out.contexts.push_back(ctx);
    }
    QAExample ex;
    ex.context_ref = ctx.id;
    ex.question = gq.question;
    ex.answer = answer;
    ex.origin = Origin::synthetic;
    ex.gen_loglik = gq.gen_loglik;
    ex.example_id = id_prefix + "_" + std::to_string(k);
    out.examples.push_back(std::move(ex));
  }
  out.rebuild_index();
  validate_split(out);
  return out;
}

inline void save_checkpoint(const LearnerCheckpoint& ckpt, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir + "/" + (ckpt.tag.empty() ? "checkpoint" : ckpt.tag), ckpt.blob);
}

inline LearnerCheckpoint load_checkpoint(const std::string& dir, const std::string& tag) {
  LearnerCheckpoint c;
  c.tag = tag;
  c.blob = read_file(dir + "/" + tag);
  return c;
}

}  // namespace qve
