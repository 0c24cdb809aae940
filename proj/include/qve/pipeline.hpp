#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "qve/corpus.hpp"
#include "qve/filters.hpp"
#include "qve/learners.hpp"
#include "qve/metrics.hpp"
#include "qve/reinforce.hpp"
#include "qve/sandbox.hpp"
#include "qve/toy_backend.hpp"
#include "qve/util.hpp"
#include "qve/value_estimator.hpp"

namespace qve {

struct ConfigError : Error {
  using Error::Error;
};
struct StageFailure : Error {
  StageFailure(const std::string& stage, const std::string& what)
      : Error("stage '" + stage + "' failed: " + what), stage_name(stage) {}
  std::string stage_name;
};
struct MixedEvalSplits : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

struct ToyBackendConfig {
  size_t vocab_hash_dim = 4096;
  size_t encoder_dim = 64;
  size_t max_input_tokens = 384;
  double stage_lr = 0.6;      // reader lr for staged finetuning
  size_t stage_batch = 8;
  double binary_lr = 0.3;
  int binary_epochs = 3;
  double rank_lr = 0.3;
  int rank_epochs = 3;
  double margin = 0.15;
  double qg_p_mismatch = 0.0;  // noise of the pipeline's own generator
  double qg_p_trivial = 0.0;
  SpanProbSource prob_source = SpanProbSource::labeled;
};

struct ExperimentConfig {
  std::string run_id = "run";
  std::string runs_root = "runs";

  std::string source_path;
  std::string target_train_path;
  std::string target_eval_path;
  std::string synthetic_path;  // optional: load instead of generating
  CorpusFormat source_format = CorpusFormat::squad_json;
  CorpusFormat target_train_format = CorpusFormat::squad_json;
  CorpusFormat target_eval_format = CorpusFormat::squad_json;
  CorpusFormat synthetic_format = CorpusFormat::squad_json;

  size_t n_annotations = 1000;
  double k_percent = 60.0;
  FilterMethod method = FilterMethod::none;
  std::vector<std::string> finetune_order = {"source", "target_synthetic",
                                             "target_annotated"};
  bool merge_synthetic_and_annotated = false;  // TriviaQA-style single file
  int qa_epochs = 2;
  int qg_epochs = 3;

  TrainConfig train;
  std::vector<uint64_t> seeds = {7};
  ToyBackendConfig toy;

  void validate() const {
    if (finetune_order.empty()) throw ConfigError("finetune_order must be non-empty");
    for (const auto& s : finetune_order) {
      if (s != "source" && s != "target_synthetic" && s != "target_annotated" &&
          s != "target_merged")
        throw ConfigError("unknown stage in finetune_order: " + s);
      if (merge_synthetic_and_annotated &&
          (s == "target_synthetic" || s == "target_annotated"))
        throw ConfigError(
            "merge_synthetic_and_annotated excludes separate synthetic/annotated "
            "stages; use target_merged");
      if (!merge_synthetic_and_annotated && s == "target_merged")
        throw ConfigError("target_merged requires merge_synthetic_and_annotated");
    }
    if (!(k_percent > 0.0 && k_percent <= 100.0))
      throw ConfigError("k_percent must be in (0,100]");
    if (seeds.empty()) throw ConfigError("at least one seed required");
    train.validate();
  }
};

namespace detail {

inline CorpusFormat format_from_string(const std::string& s) {
  if (s == "squad_json") return CorpusFormat::squad_json;
  if (s == "mrqa_jsonl") return CorpusFormat::mrqa_jsonl;
  throw ConfigError("unknown corpus format: " + s);
}

inline RewardMode reward_mode_from_string(const std::string& s) {
  if (s == "em_gain") return RewardMode::em_gain;
  if (s == "f1_gain") return RewardMode::f1_gain;
  if (s == "loss_drop") return RewardMode::loss_drop;
  throw ConfigError("unknown reward mode: " + s);
}

inline CheckpointRule checkpoint_rule_from_string(const std::string& s) {
  if (s == "highest_reward") return CheckpointRule::highest_reward;
  if (s == "lowest_qa_loss") return CheckpointRule::lowest_qa_loss;
  throw ConfigError("unknown checkpoint rule: " + s);
}

}  // namespace detail

inline nlohmann::ordered_json config_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["run_id"] = c.run_id;
  j["runs_root"] = c.runs_root;
  j["source_path"] = c.source_path;
  j["target_train_path"] = c.target_train_path;
  j["target_eval_path"] = c.target_eval_path;
  j["synthetic_path"] = c.synthetic_path;
  j["n_annotations"] = c.n_annotations;
  j["k_percent"] = c.k_percent;
  j["method"] = to_string(c.method);
  j["finetune_order"] = c.finetune_order;
  j["merge_synthetic_and_annotated"] = c.merge_synthetic_and_annotated;
  j["qa_epochs"] = c.qa_epochs;
  j["qg_epochs"] = c.qg_epochs;
  j["seeds"] = c.seeds;
  j["train"] = {{"outer_iterations", c.train.outer_iterations},
                {"outer_batch", c.train.outer_batch},
                {"inner_iterations", c.train.inner_iterations},
                {"inner_batch", c.train.inner_batch},
                {"qve_lr", c.train.qve_lr},
                {"qa_lr", c.train.qa_lr},
                {"reward_mode", to_string(c.train.reward_mode)},
                {"checkpoint_rule", to_string(c.train.checkpoint_rule)},
                {"use_reward_baseline", c.train.use_reward_baseline},
                {"seed", c.train.seed}};
  j["toy"] = {{"vocab_hash_dim", c.toy.vocab_hash_dim},
              {"encoder_dim", c.toy.encoder_dim},
              {"max_input_tokens", c.toy.max_input_tokens},
              {"stage_lr", c.toy.stage_lr},
              {"stage_batch", c.toy.stage_batch},
              {"binary_lr", c.toy.binary_lr},
              {"binary_epochs", c.toy.binary_epochs},
              {"rank_lr", c.toy.rank_lr},
              {"rank_epochs", c.toy.rank_epochs},
              {"margin", c.toy.margin},
              {"qg_p_mismatch", c.toy.qg_p_mismatch},
              {"qg_p_trivial", c.toy.qg_p_trivial},
              {"prob_source",
               c.toy.prob_source == SpanProbSource::labeled ? "labeled" : "argmax"}};
  return j;
}

/// Loads a config from YAML (or JSON; chosen by file extension). Absent keys
/// keep their defaults.
inline ExperimentConfig load_experiment_config(const std::string& path) {
  ExperimentConfig c;
  auto apply_json = [&](const nlohmann::json& j) {
    if (j.contains("run_id")) c.run_id = j["run_id"].get<std::string>();
    if (j.contains("runs_root")) c.runs_root = j["runs_root"].get<std::string>();
    if (j.contains("source_path")) c.source_path = j["source_path"].get<std::string>();
    if (j.contains("target_train_path"))
      c.target_train_path = j["target_train_path"].get<std::string>();
    if (j.contains("target_eval_path"))
      c.target_eval_path = j["target_eval_path"].get<std::string>();
    if (j.contains("synthetic_path"))
      c.synthetic_path = j["synthetic_path"].get<std::string>();
    if (j.contains("source_format"))
      c.source_format = detail::format_from_string(j["source_format"]);
    if (j.contains("target_train_format"))
      c.target_train_format = detail::format_from_string(j["target_train_format"]);
    if (j.contains("target_eval_format"))
      c.target_eval_format = detail::format_from_string(j["target_eval_format"]);
    if (j.contains("synthetic_format"))
      c.synthetic_format = detail::format_from_string(j["synthetic_format"]);
    if (j.contains("n_annotations")) c.n_annotations = j["n_annotations"].get<size_t>();
    if (j.contains("k_percent")) c.k_percent = j["k_percent"].get<double>();
    if (j.contains("method"))
      c.method = filter_method_from_string(j["method"].get<std::string>());
    if (j.contains("finetune_order"))
      c.finetune_order = j["finetune_order"].get<std::vector<std::string>>();
    if (j.contains("merge_synthetic_and_annotated"))
      c.merge_synthetic_and_annotated = j["merge_synthetic_and_annotated"].get<bool>();
    if (j.contains("qa_epochs")) c.qa_epochs = j["qa_epochs"].get<int>();
    if (j.contains("qg_epochs")) c.qg_epochs = j["qg_epochs"].get<int>();
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<uint64_t>>();
    if (j.contains("train")) {
      const auto& t = j["train"];
      if (t.contains("outer_iterations"))
        c.train.outer_iterations = t["outer_iterations"].get<size_t>();
      if (t.contains("outer_batch")) c.train.outer_batch = t["outer_batch"].get<size_t>();
      if (t.contains("inner_iterations"))
        c.train.inner_iterations = t["inner_iterations"].get<size_t>();
      if (t.contains("inner_batch")) c.train.inner_batch = t["inner_batch"].get<size_t>();
      if (t.contains("qve_lr")) c.train.qve_lr = t["qve_lr"].get<double>();
      if (t.contains("qa_lr")) c.train.qa_lr = t["qa_lr"].get<double>();
      if (t.contains("reward_mode"))
        c.train.reward_mode = detail::reward_mode_from_string(t["reward_mode"]);
      if (t.contains("checkpoint_rule"))
        c.train.checkpoint_rule =
            detail::checkpoint_rule_from_string(t["checkpoint_rule"]);
      if (t.contains("use_reward_baseline"))
        c.train.use_reward_baseline = t["use_reward_baseline"].get<bool>();
      if (t.contains("seed")) c.train.seed = t["seed"].get<uint64_t>();
    }
    if (j.contains("toy")) {
      const auto& t = j["toy"];
      if (t.contains("vocab_hash_dim"))
        c.toy.vocab_hash_dim = t["vocab_hash_dim"].get<size_t>();
      if (t.contains("encoder_dim")) c.toy.encoder_dim = t["encoder_dim"].get<size_t>();
      if (t.contains("max_input_tokens"))
        c.toy.max_input_tokens = t["max_input_tokens"].get<size_t>();
      if (t.contains("stage_lr")) c.toy.stage_lr = t["stage_lr"].get<double>();
      if (t.contains("stage_batch")) c.toy.stage_batch = t["stage_batch"].get<size_t>();
      if (t.contains("binary_lr")) c.toy.binary_lr = t["binary_lr"].get<double>();
      if (t.contains("binary_epochs")) c.toy.binary_epochs = t["binary_epochs"].get<int>();
      if (t.contains("rank_lr")) c.toy.rank_lr = t["rank_lr"].get<double>();
      if (t.contains("rank_epochs")) c.toy.rank_epochs = t["rank_epochs"].get<int>();
      if (t.contains("margin")) c.toy.margin = t["margin"].get<double>();
      if (t.contains("qg_p_mismatch"))
        c.toy.qg_p_mismatch = t["qg_p_mismatch"].get<double>();
      if (t.contains("qg_p_trivial")) c.toy.qg_p_trivial = t["qg_p_trivial"].get<double>();
      if (t.contains("prob_source"))
        c.toy.prob_source = t["prob_source"].get<std::string>() == "argmax"
                                ? SpanProbSource::argmax
                                : SpanProbSource::labeled;
    }
  };

  auto ends_with = [](const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (ends_with(path, ".json")) {
    apply_json(nlohmann::json::parse(read_file(path)));
  } else {
    // YAML, converted node-by-node into the same JSON shape
    YAML::Node root = YAML::LoadFile(path);
    std::function<nlohmann::json(const YAML::Node&)> conv =
        [&](const YAML::Node& n) -> nlohmann::json {
      if (n.IsMap()) {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& kv : n) j[kv.first.as<std::string>()] = conv(kv.second);
        return j;
      }
      if (n.IsSequence()) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& item : n) j.push_back(conv(item));
        return j;
      }
      // scalar: try integer, then double, then bool, then string
      const std::string s = n.as<std::string>();
      try {
        size_t pos = 0;
        long long v = std::stoll(s, &pos);
        if (pos == s.size()) return v;
      } catch (...) {
      }
      try {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos == s.size()) return v;
      } catch (...) {
      }
      if (s == "true") return true;
      if (s == "false") return false;
      return s;
    };
    apply_json(conv(root));
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Run records.
// ---------------------------------------------------------------------------

struct StageRecord {
  std::string name;
  EvalResult eval;          // measured on the eval split after the stage
  double seconds = 0.0;
  std::vector<std::string> paths_read;  // training/selection inputs only

  nlohmann::ordered_json to_json() const {
    return {{"name", name},
            {"em", eval.em},
            {"f1", eval.f1},
            {"seconds", seconds},
            {"paths_read", paths_read}};
  }
};

struct RunRecord {
  std::string run_id;
  uint64_t seed = 0;
  nlohmann::ordered_json config_snapshot;
  FilterReport filter_report;
  std::vector<StageRecord> stages;
  EvalResult final_eval;
  uint64_t eval_fingerprint = 0;
  double total_seconds = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["run_id"] = run_id;
    j["seed"] = seed;
    j["config"] = config_snapshot;
    j["filter_report"] = filter_report.to_json();
    j["stages"] = nlohmann::ordered_json::array();
    for (const auto& s : stages) j["stages"].push_back(s.to_json());
    j["final"] = {{"em", final_eval.em}, {"f1", final_eval.f1}};
    j["eval_fingerprint"] = hex64(eval_fingerprint);
    j["total_seconds"] = total_seconds;
    return j;
  }

  static RunRecord from_json(const nlohmann::json& j) {
    RunRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.seed = j.value("seed", uint64_t{0});
    r.config_snapshot = j.value("config", nlohmann::ordered_json::object());
    if (j.contains("filter_report"))
      r.filter_report = FilterReport::from_json(j["filter_report"]);
    for (const auto& s : j.value("stages", nlohmann::json::array())) {
      StageRecord sr;
      sr.name = s.at("name").get<std::string>();
      sr.eval.em = s.at("em").get<double>();
      sr.eval.f1 = s.at("f1").get<double>();
      sr.seconds = s.value("seconds", 0.0);
      sr.paths_read = s.value("paths_read", std::vector<std::string>{});
      r.stages.push_back(std::move(sr));
    }
    r.final_eval.em = j.at("final").at("em").get<double>();
    r.final_eval.f1 = j.at("final").at("f1").get<double>();
    if (j.contains("eval_fingerprint")) {
      std::string hexs = j["eval_fingerprint"].get<std::string>();
      r.eval_fingerprint = std::stoull(hexs, nullptr, 16);
    }
    r.total_seconds = j.value("total_seconds", 0.0);
    return r;
  }
};

// ---------------------------------------------------------------------------
// Experiment runner (toy backend). Transformer-scale backends attach through
// the same QAReader/QGGenerator interfaces.
// ---------------------------------------------------------------------------

namespace detail {

struct StageTimer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

inline CorpusSplit merge_splits(const CorpusSplit& a, const CorpusSplit& b,
                                SplitName name) {
  CorpusSplit out;
  out.name = name;
  std::unordered_map<std::string, std::string> seen;  // id -> text
  for (const auto& src : {&a, &b}) {
    for (const auto& ctx : src->contexts) {
      auto it = seen.find(ctx.id);
      if (it == seen.end()) {
        seen.emplace(ctx.id, ctx.text);
        out.contexts.push_back(ctx);
      } else if (it->second != ctx.text) {
        throw Error("merge: context id collision with different text: " + ctx.id);
      }
    }
  }
  out.examples = a.examples;
  out.examples.insert(out.examples.end(), b.examples.begin(), b.examples.end());
  out.rebuild_index();
  return out;
}

}  // namespace detail

/// Shuffled-minibatch epochs with an all-ones mask.
inline void train_reader_epochs(QAReader& reader, const CorpusSplit& corpus, int epochs,
                                double lr, size_t batch_size, Rng& rng) {
  if (corpus.size() == 0) return;
  std::vector<size_t> order(corpus.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int e = 0; e < epochs; ++e) {
    rng.shuffle(order);
    for (size_t pos = 0; pos < order.size(); pos += batch_size) {
      size_t end = std::min(pos + batch_size, order.size());
      std::vector<size_t> idx(order.begin() + pos, order.begin() + end);
      std::vector<BatchItem> batch = make_batch(corpus, idx);
      std::vector<int> ones(batch.size(), 1);
      qa_weighted_update(reader, batch, ones, lr);
    }
  }
}

/// Trains the estimator configured by `cfg.method` and returns it; also used
/// by `qve filter` and the sandbox comparisons. `row2` is the source +
/// target-annotations reader supplying p_s/p_e features and RL finetuning.
inline std::unique_ptr<Estimator> train_estimator_for_method(
    const ExperimentConfig& cfg, FilterMethod method, const CorpusSplit& synthetic,
    const CorpusSplit& annotations, const CorpusSplit* source_opt, QAReader& row2,
    uint64_t seed, const std::string& run_dir = "") {
  HeadDims dims;
  dims.h = cfg.toy.encoder_dim;
  dims.h1 = cfg.toy.encoder_dim;
  dims.h2 = std::max<size_t>(8, cfg.toy.encoder_dim / 4);
  dims.h3 = cfg.toy.encoder_dim;
  auto encoder = std::make_shared<HashedEncoder>(cfg.toy.encoder_dim,
                                                 derive_seed(seed, "encoder"));
  Rng init_rng(derive_seed(seed, "head_init"));
  auto est = std::make_unique<Estimator>(encoder, ValueHead::random_init(dims, init_rng),
                                         cfg.toy.prob_source, cfg.toy.max_input_tokens);

  if (method == FilterMethod::qve_binary) {
    // source phase: questions generated on held-out source contexts as
    // negatives, source annotations on those contexts as positives
    if (source_opt && source_opt->size() > 0) {
      auto [qg_part, clf_part] =
          split_source_for_classifier(*source_opt, 0.7, derive_seed(seed, "clf_split"));
      ToyGenerator qg(derive_seed(seed, "clf_qg"));
      qg.finetune(qg_part, cfg.qg_epochs);
      CorpusSplit negatives =
          generate_synthetic(qg, [&] {
            std::vector<std::pair<Context, AnswerSpan>> pairs;
            for (const auto& ex : clf_part.examples)
              pairs.emplace_back(clf_part.context_of(ex), ex.answer);
            return pairs;
          }(), "clfneg");
      train_binary_classifier(*est, clf_part, negatives, row2, cfg.toy.binary_epochs,
                              cfg.toy.binary_lr, derive_seed(seed, "clf_src"));
    }
    // target phase: annotations vs synthetic on the same contexts
    CorpusSplit target_neg;
    target_neg.name = SplitName::target_synthetic;
    target_neg.contexts = synthetic.contexts;
    for (const auto& ex : synthetic.examples)
      if (annotations.has_context(ex.context_ref)) target_neg.examples.push_back(ex);
    if (target_neg.examples.empty()) target_neg.examples = synthetic.examples;
    target_neg.rebuild_index();
    train_binary_classifier(*est, annotations, target_neg, row2, cfg.toy.binary_epochs,
                            cfg.toy.binary_lr, derive_seed(seed, "clf_tgt"));
  } else if (method == FilterMethod::qve_rank) {
    auto pairs = make_ranking_pairs(synthetic, annotations, derive_seed(seed, "rankpair"));
    train_ranking(*est, pairs, row2, cfg.toy.margin, cfg.toy.rank_epochs,
                  cfg.toy.rank_lr, derive_seed(seed, "rank"));
  } else if (method == FilterMethod::qve_rl) {
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(seed, "rl");
    train_qve_rl(*est, row2, synthetic, annotations, tc, run_dir);
  }
  return est;
}

/// Executes the staged experiment for one seed and persists every
/// intermediate artifact under <runs_root>/<run_id>_s<seed>/.
inline RunRecord run_experiment(const ExperimentConfig& cfg, uint64_t seed) {
  cfg.validate();
  detail::StageTimer total_timer;

  std::string run_dir = cfg.runs_root + "/" + cfg.run_id + "_s" + std::to_string(seed);
  std::filesystem::create_directories(run_dir + "/corpora");
  std::filesystem::create_directories(run_dir + "/checkpoints");
  std::filesystem::create_directories(run_dir + "/report");
  std::filesystem::create_directories(run_dir + "/qve");

  RunRecord record;
  record.run_id = cfg.run_id + "_s" + std::to_string(seed);
  record.seed = seed;
  record.config_snapshot = config_to_json(cfg);
  record.config_snapshot["active_seed"] = seed;
  write_file(run_dir + "/config.json", record.config_snapshot.dump(1));

  // inputs for training stages; the eval split is only touched by evaluation
  CorpusSplit source, annotations_pool, annotations;
  if (!cfg.source_path.empty())
    source = load_corpus(cfg.source_path, cfg.source_format, SplitName::source_train);
  annotations_pool = load_corpus(cfg.target_train_path, cfg.target_train_format,
                                 SplitName::target_annotated);
  annotations = subsample_annotations(annotations_pool, cfg.n_annotations,
                                      derive_seed(seed, "subsample"));

  CorpusSplit eval_split = load_corpus(cfg.target_eval_path, cfg.target_eval_format,
                                       SplitName::eval_split);
  record.eval_fingerprint = eval_split.id_fingerprint();

  ToyReader reader(cfg.toy.vocab_hash_dim, derive_seed(seed, "reader"));

  auto run_stage = [&](const std::string& name, const std::vector<std::string>& inputs,
                       auto&& body) {
    detail::StageTimer t;
    StageRecord sr;
    sr.name = name;
    sr.paths_read = inputs;
    try {
      body();
    } catch (const std::exception& e) {
      throw StageFailure(name, e.what());
    }
    sr.eval = evaluate_reader(reader, eval_split);
    sr.seconds = t.seconds();
    record.stages.push_back(std::move(sr));
  };

  // prepared lazily by the synthetic stage
  CorpusSplit synthetic_raw, synthetic_filtered;
  std::unique_ptr<ToyReader> row2;

  for (const auto& stage : cfg.finetune_order) {
    if (stage == "source") {
      run_stage("source", {cfg.source_path}, [&] {
        if (source.size() == 0) throw Error("source stage requires source_path");
        Rng rng(derive_seed(seed, "stage_source"));
        train_reader_epochs(reader, source, cfg.qa_epochs, cfg.toy.stage_lr,
                            cfg.toy.stage_batch, rng);
        save_checkpoint(reader.snapshot("theta_source"), run_dir + "/checkpoints");
      });
    } else if (stage == "target_annotated") {
      run_stage("target_annotated", {cfg.target_train_path}, [&] {
        Rng rng(derive_seed(seed, "stage_ann"));
        train_reader_epochs(reader, annotations, cfg.qa_epochs, cfg.toy.stage_lr,
                            cfg.toy.stage_batch, rng);
      });
    } else if (stage == "target_synthetic" || stage == "target_merged") {
      std::vector<std::string> inputs = {cfg.target_train_path};
      if (!cfg.synthetic_path.empty()) inputs.push_back(cfg.synthetic_path);
      run_stage(stage, inputs, [&] {
        // (a) obtain the synthetic corpus
        if (!cfg.synthetic_path.empty()) {
          synthetic_raw = load_corpus(cfg.synthetic_path, cfg.synthetic_format,
                                      SplitName::target_synthetic);
        } else {
          ToyGenerator qg(derive_seed(seed, "pipeline_qg"), cfg.toy.qg_p_mismatch,
                          cfg.toy.qg_p_trivial);
          if (source.size() > 0) qg.finetune(source, cfg.qg_epochs);
          qg.finetune(annotations, cfg.qg_epochs);
          std::vector<std::pair<Context, AnswerSpan>> pairs;
          for (const auto& ex : annotations_pool.examples)
            pairs.emplace_back(annotations_pool.context_of(ex), ex.answer);
          synthetic_raw = generate_synthetic(qg, pairs);
          save_corpus(synthetic_raw, run_dir + "/corpora/synthetic_raw.json");
        }

        // (b) the row-(2)-style reader: source plus target annotations
        row2 = std::make_unique<ToyReader>(cfg.toy.vocab_hash_dim,
                                           derive_seed(seed, "reader"));
        row2->restore(reader.snapshot());
        {
          Rng rng(derive_seed(seed, "row2_ann"));
          train_reader_epochs(*row2, annotations, cfg.qa_epochs, cfg.toy.stage_lr,
                              cfg.toy.stage_batch, rng);
        }
        save_checkpoint(row2->snapshot("theta_row2"), run_dir + "/checkpoints");

        // (c) filter
        FilterReport rep;
        switch (cfg.method) {
          case FilterMethod::none:
            rep.method = FilterMethod::none;
            rep.input_count = synthetic_raw.size();
            for (const auto& ex : synthetic_raw.examples)
              rep.kept_ids.push_back(ex.example_id);
            rep.kept_count = rep.kept_ids.size();
            break;
          case FilterMethod::roundtrip:
            rep = roundtrip_filter(*row2, synthetic_raw);
            break;
          case FilterMethod::lm:
            rep = lm_filter(synthetic_raw, cfg.k_percent);
            break;
          default: {
            auto est = train_estimator_for_method(cfg, cfg.method, synthetic_raw,
                                                  annotations,
                                                  source.size() ? &source : nullptr,
                                                  *row2, seed, run_dir);
            rep = qve_filter(*est, synthetic_raw, *row2, cfg.k_percent, cfg.method);
            write_file(run_dir + "/qve/head.bin", est->serialize());
            break;
          }
        }
        record.filter_report = rep;
        synthetic_filtered = apply_filter_report(synthetic_raw, rep);
        write_file(run_dir + "/corpora/filter_report.json", rep.to_json().dump(1));
        save_corpus(synthetic_filtered, run_dir + "/corpora/synthetic_filtered.json");

        // (d) finetune the QA reader
        Rng rng(derive_seed(seed, "stage_syn"));
        if (stage == "target_merged") {
          CorpusSplit merged = detail::merge_splits(synthetic_filtered, annotations,
                                                    SplitName::target_synthetic);
          train_reader_epochs(reader, merged, cfg.qa_epochs, cfg.toy.stage_lr,
                              cfg.toy.stage_batch, rng);
        } else {
          train_reader_epochs(reader, synthetic_filtered, cfg.qa_epochs,
                              cfg.toy.stage_lr, cfg.toy.stage_batch, rng);
        }
      });
    }
  }

  save_checkpoint(reader.snapshot("theta_final"), run_dir + "/checkpoints");
  record.final_eval = record.stages.empty() ? evaluate_reader(reader, eval_split)
                                            : record.stages.back().eval;
  record.total_seconds = total_timer.seconds();
  write_file(run_dir + "/report/record.json", record.to_json().dump(1));
  return record;
}

inline RunRecord run_experiment(const ExperimentConfig& cfg) {
  return run_experiment(cfg, cfg.seeds.at(0));
}

// ---------------------------------------------------------------------------
// Reporting and sweeps.
// ---------------------------------------------------------------------------

struct ReportTable {
  std::string csv;
  std::string text;
};

/// Tabulates final EM/F1 per run. All records must share an eval split.
inline ReportTable report(const std::vector<RunRecord>& records) {
  if (records.empty()) throw Error("no records to report");
  for (const auto& r : records)
    if (r.eval_fingerprint != records.front().eval_fingerprint)
      throw MixedEvalSplits("records evaluated on different splits");

  ReportTable out;
  out.csv = "run_id,seed,method,n_annotations,k_percent,kept,input,em,f1\n";
  std::ostringstream text;
  text << std::left << std::setw(28) << "run_id" << std::setw(12) << "method"
       << std::setw(8) << "n" << std::setw(8) << "K%" << std::setw(14) << "kept/input"
       << std::setw(8) << "EM" << std::setw(8) << "F1" << "\n";
  for (const auto& r : records) {
    std::string method = r.config_snapshot.value("method", "?");
    std::string n = r.config_snapshot.contains("n_annotations")
                        ? r.config_snapshot["n_annotations"].dump()
                        : "?";
    std::string k = r.config_snapshot.contains("k_percent")
                        ? r.config_snapshot["k_percent"].dump()
                        : "?";
    char em[32], f1[32];
    std::snprintf(em, sizeof em, "%.1f", r.final_eval.em);
    std::snprintf(f1, sizeof f1, "%.1f", r.final_eval.f1);
    out.csv += r.run_id + "," + std::to_string(r.seed) + "," + method + "," + n + "," +
               k + "," + std::to_string(r.filter_report.kept_count) + "," +
               std::to_string(r.filter_report.input_count) + "," + em + "," + f1 + "\n";
    text << std::left << std::setw(28) << r.run_id << std::setw(12) << method
         << std::setw(8) << n << std::setw(8) << k << std::setw(14)
         << (std::to_string(r.filter_report.kept_count) + "/" +
             std::to_string(r.filter_report.input_count))
         << std::setw(8) << em << std::setw(8) << f1 << "\n";
  }
  out.text = text.str();
  return out;
}

enum class SweepAxis { n_annotations, k_percent };

struct SweepResult {
  std::vector<RunRecord> records;
  std::vector<std::string> failures;  // "<point>: <error>"
  ReportTable table;
};

/// One run per value per seed, shared seeds across values. Failed points are
/// recorded and the sweep continues.
inline SweepResult sweep(const ExperimentConfig& base, SweepAxis axis,
                         const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  SweepResult out;
  for (double v : values) {
    ExperimentConfig cfg = base;
    std::string tag;
    if (axis == SweepAxis::n_annotations) {
      cfg.n_annotations = static_cast<size_t>(v);
      tag = "n" + std::to_string(cfg.n_annotations);
    } else {
      cfg.k_percent = v;
      tag = "k" + std::to_string(static_cast<long long>(v));
    }
    cfg.run_id = base.run_id + "_" + tag;
    for (uint64_t seed : cfg.seeds) {
      try {
        out.records.push_back(run_experiment(cfg, seed));
      } catch (const std::exception& e) {
        out.failures.push_back(cfg.run_id + "_s" + std::to_string(seed) + ": " + e.what());
      }
    }
  }
  if (!out.records.empty()) out.table = report(out.records);
  return out;
}

}  // namespace qve
