#pragma once

#include <memory>
#include <string>

#include "qve/pipeline.hpp"

namespace qve {

/// Inputs shared by the standalone `filter` / `train-rl` entry points:
/// corpora plus the source + target-annotations reader that supplies
/// p_s/p_e features, roundtrip answers and RL inner finetuning.
struct PreparedInputs {
  CorpusSplit source;
  CorpusSplit annotations_pool;
  CorpusSplit annotations;
  CorpusSplit synthetic;
  std::unique_ptr<ToyReader> row2;
};

inline PreparedInputs prepare_inputs(const ExperimentConfig& cfg, uint64_t seed) {
  PreparedInputs p;
  if (!cfg.source_path.empty())
    p.source = load_corpus(cfg.source_path, cfg.source_format, SplitName::source_train);
  p.annotations_pool = load_corpus(cfg.target_train_path, cfg.target_train_format,
                                   SplitName::target_annotated);
  p.annotations = subsample_annotations(p.annotations_pool, cfg.n_annotations,
                                        derive_seed(seed, "subsample"));

  p.row2 = std::make_unique<ToyReader>(cfg.toy.vocab_hash_dim, derive_seed(seed, "reader"));
  if (p.source.size() > 0) {
    Rng rng(derive_seed(seed, "stage_source"));
    train_reader_epochs(*p.row2, p.source, cfg.qa_epochs, cfg.toy.stage_lr,
                        cfg.toy.stage_batch, rng);
  }
  {
    Rng rng(derive_seed(seed, "row2_ann"));
    train_reader_epochs(*p.row2, p.annotations, cfg.qa_epochs, cfg.toy.stage_lr,
                        cfg.toy.stage_batch, rng);
  }

  if (!cfg.synthetic_path.empty()) {
    p.synthetic = load_corpus(cfg.synthetic_path, cfg.synthetic_format,
                              SplitName::target_synthetic);
  } else {
    ToyGenerator qg(derive_seed(seed, "pipeline_qg"), cfg.toy.qg_p_mismatch,
                    cfg.toy.qg_p_trivial);
    if (p.source.size() > 0) qg.finetune(p.source, cfg.qg_epochs);
    qg.finetune(p.annotations, cfg.qg_epochs);
    std::vector<std::pair<Context, AnswerSpan>> pairs;
    for (const auto& ex : p.annotations_pool.examples)
      pairs.emplace_back(p.annotations_pool.context_of(ex), ex.answer);
    p.synthetic = generate_synthetic(qg, pairs);
  }
  return p;
}

}  // namespace qve
