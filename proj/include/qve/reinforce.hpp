#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qve/learners.hpp"
#include "qve/metrics.hpp"
#include "qve/util.hpp"
#include "qve/value_estimator.hpp"

namespace qve {

struct CheckpointMismatch : Error {
  using Error::Error;
};

enum class CheckpointRule { highest_reward, lowest_qa_loss };

inline const char* to_string(CheckpointRule r) {
  return r == CheckpointRule::highest_reward ? "highest_reward" : "lowest_qa_loss";
}

struct TrainConfig {
  size_t outer_iterations = 2000;  // I_o
  size_t outer_batch = 80;         // B_o
  size_t inner_iterations = 20;    // I_n
  size_t inner_batch = 4;          // B_n
  double qve_lr = 3e-5;            // alpha_o
  double qa_lr = 3e-5;             // alpha_n
  RewardMode reward_mode = RewardMode::em_gain;
  uint64_t seed = 0;
  CheckpointRule checkpoint_rule = CheckpointRule::highest_reward;
  // moving-average reward baseline; off by default (the algorithm uses the
  // raw gain)
  bool use_reward_baseline = false;
  double baseline_momentum = 0.9;

  void validate() const {
    if (outer_batch == 0 || inner_iterations == 0 || inner_batch == 0)
      throw Error("batch sizes and inner iterations must be positive");
    if (inner_batch > outer_batch) throw Error("inner batch must not exceed outer batch");
  }
};

/// One outer iteration's record: ids, estimated values, Bernoulli selection,
/// reward, and the policy log-likelihood of the drawn selection.
struct SelectionRound {
  size_t iteration = 0;
  std::vector<std::string> batch_ids;
  std::vector<double> values;
  std::vector<int> selection;
  double reward = 0.0;
  double log_prob = 0.0;
  double qa_loss = 0.0;

  nlohmann::ordered_json to_json() const {
    return {{"iteration", iteration}, {"batch_ids", batch_ids}, {"values", values},
            {"selection", selection}, {"reward", reward},       {"log_prob", log_prob},
            {"qa_loss", qa_loss}};
  }

  static SelectionRound from_json(const nlohmann::json& j) {
    SelectionRound r;
    r.iteration = j.at("iteration").get<size_t>();
    r.batch_ids = j.at("batch_ids").get<std::vector<std::string>>();
    r.values = j.at("values").get<std::vector<double>>();
    r.selection = j.at("selection").get<std::vector<int>>();
    r.reward = j.at("reward").get<double>();
    r.log_prob = j.at("log_prob").get<double>();
    r.qa_loss = j.value("qa_loss", 0.0);
    return r;
  }
};

/// s_l ~ Bernoulli(v_l), independently per position.
inline std::vector<int> sample_selection(const std::vector<double>& values, Rng& rng) {
  std::vector<int> s(values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] > 0.0 && values[i] < 1.0))
      throw Error("selection probabilities must lie strictly inside (0,1)");
    s[i] = rng.bernoulli(values[i]) ? 1 : 0;
  }
  return s;
}

/// log pi(S|D) = sum_l [s_l log v_l + (1-s_l) log(1-v_l)]
inline double policy_log_prob(const std::vector<double>& values,
                              const std::vector<int>& selection) {
  if (values.size() != selection.size())
    throw LengthMismatch("values/selection length mismatch");
  double lp = 0.0;
  for (size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] > 0.0 && values[i] < 1.0))
      throw Error("selection probabilities must lie strictly inside (0,1)");
    lp += selection[i] ? std::log(values[i]) : std::log(1.0 - values[i]);
  }
  return lp;
}

/// Single-sample score-function estimate, expressed as d(loss)/d(raw score)
/// per position: d/draw of -r log pi = -r (s_l - v_l). Chaining these through
/// the scorer's parameters yields the policy gradient.
inline std::vector<double> qve_raw_gradient(const std::vector<double>& values,
                                            const std::vector<int>& selection,
                                            double reward) {
  if (values.size() != selection.size())
    throw LengthMismatch("values/selection length mismatch");
  std::vector<double> g(values.size());
  for (size_t i = 0; i < values.size(); ++i)
    g[i] = -reward * (static_cast<double>(selection[i]) - values[i]);
  return g;
}

/// Runs a reader over a split and scores the predictions.
inline EvalResult evaluate_reader(const QAReader& reader, const CorpusSplit& split) {
  std::unordered_map<std::string, std::string> preds;
  preds.reserve(split.size());
  for (const auto& ex : split.examples)
    preds[ex.example_id] = reader.predict(split.context_of(ex), ex.question).text;
  return evaluate(preds, split);
}

/// One full outer iteration of the REINFORCED training loop:
/// sample batch -> score -> Bernoulli select -> inner QA finetuning on the
/// masked batch -> gain reward -> one policy-gradient step -> exact reset.
inline SelectionRound run_outer_iteration(Estimator& est, QAReader& reader,
                                          const LearnerCheckpoint& theta0,
                                          const CorpusSplit& synthetic,
                                          const CorpusSplit& annotations,
                                          const TrainConfig& cfg, Rng& rng,
                                          size_t iteration = 0,
                                          const EvalResult* before_cached = nullptr,
                                          double reward_baseline = 0.0) {
  cfg.validate();
  if (!reader.snapshot().same_params(theta0))
    throw CheckpointMismatch("reader does not match theta_0 at iteration entry");

  EvalResult before_local;
  const EvalResult* before = before_cached;
  if (!before) {
    before_local = evaluate_reader(reader, annotations);
    if (cfg.reward_mode == RewardMode::loss_drop)
      before_local.qa_loss = reader.loss(make_batch(annotations));
    before = &before_local;
  }

  SelectionRound round;
  round.iteration = iteration;

  // (1) sample a batch of synthetic pairs, without replacement
  size_t bo = std::min(cfg.outer_batch, synthetic.size());
  std::vector<size_t> batch_idx = rng.sample_indices(synthetic.size(), bo);
  std::vector<BatchItem> batch = make_batch(synthetic, batch_idx);
  for (size_t i : batch_idx) round.batch_ids.push_back(synthetic.examples[i].example_id);

  // (2) estimate question values
  std::vector<HeadForwardCache> caches(bo);
  round.values.resize(bo);
  for (size_t l = 0; l < bo; ++l) {
    ExampleFeatures f = est.features_for(*batch[l].ctx, *batch[l].ex, reader);
    round.values[l] = qve_forward(est.head(), f.h, f.p_s, f.p_e, &caches[l]).prob;
  }

  // (3) sample the selection vector
  round.selection = sample_selection(round.values, rng);
  round.log_prob = policy_log_prob(round.values, round.selection);

  // (4) inner QA finetuning on the selected samples
  for (size_t it = 0; it < cfg.inner_iterations; ++it) {
    std::vector<BatchItem> inner;
    std::vector<int> weights;
    inner.reserve(cfg.inner_batch);
    for (size_t k = 0; k < cfg.inner_batch; ++k) {
      size_t l = rng.uniform_int(bo);
      inner.push_back(batch[l]);
      weights.push_back(round.selection[l]);
    }
    qa_weighted_update(reader, inner, weights, cfg.qa_lr);
  }

  // (5) QA gain on the target annotations as the reward
  EvalResult after = evaluate_reader(reader, annotations);
  if (cfg.reward_mode == RewardMode::loss_drop)
    after.qa_loss = reader.loss(make_batch(annotations));
  round.reward = reward_fn(*before, after, cfg.reward_mode);

  // QA training loss over the selected samples (checkpoint-selection signal)
  {
    std::vector<BatchItem> selected;
    for (size_t l = 0; l < bo; ++l)
      if (round.selection[l]) selected.push_back(batch[l]);
    round.qa_loss = reader.loss(selected.empty() ? std::span<const BatchItem>(batch)
                                                 : std::span<const BatchItem>(selected));
  }

  // (6) one policy-gradient step on the estimator
  double advantage = round.reward - (cfg.use_reward_baseline ? reward_baseline : 0.0);
  std::vector<double> draw = qve_raw_gradient(round.values, round.selection, advantage);
  HeadGrads grads(est.head().dims);
  for (size_t l = 0; l < bo; ++l) head_backward(est.head(), caches[l], draw[l], grads);
  sgd_step(est.head(), grads, cfg.qve_lr);

  // exact reset to the pretrained checkpoint
  reader.restore(theta0);
  return round;
}

struct RlTrainResult {
  std::vector<SelectionRound> rounds;
  size_t best_iteration = 0;
  double best_metric = 0.0;
  double before_em = 0.0;
  std::string best_head_blob;
};

namespace detail {

struct RlState {
  size_t next_iteration = 0;
  std::string rng_state;
  std::string head_hex;
  size_t best_iteration = 0;
  double best_metric = 0.0;
  std::string best_head_hex;
  double reward_baseline = 0.0;
  bool has_best = false;
};

inline std::string to_hex(const std::string& bytes) {
  static const char* d = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(d[c >> 4]);
    out.push_back(d[c & 0xf]);
  }
  return out;
}

inline std::string from_hex(const std::string& hex) {
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw Error("bad hex digit");
  };
  if (hex.size() % 2) throw Error("odd hex length");
  std::string out;
  out.reserve(hex.size() / 2);
  for (size_t i = 0; i < hex.size(); i += 2)
    out.push_back(static_cast<char>((nib(hex[i]) << 4) | nib(hex[i + 1])));
  return out;
}

inline void save_rl_state(const RlState& st, const std::string& path) {
  nlohmann::ordered_json j{{"next_iteration", st.next_iteration},
                           {"rng_state", st.rng_state},
                           {"head_hex", st.head_hex},
                           {"best_iteration", st.best_iteration},
                           {"best_metric", st.best_metric},
                           {"best_head_hex", st.best_head_hex},
                           {"reward_baseline", st.reward_baseline},
                           {"has_best", st.has_best}};
  write_file(path, j.dump());
}

inline RlState load_rl_state(const std::string& path) {
  nlohmann::json j = nlohmann::json::parse(read_file(path));
  RlState st;
  st.next_iteration = j.at("next_iteration").get<size_t>();
  st.rng_state = j.at("rng_state").get<std::string>();
  st.head_hex = j.at("head_hex").get<std::string>();
  st.best_iteration = j.at("best_iteration").get<size_t>();
  st.best_metric = j.at("best_metric").get<double>();
  st.best_head_hex = j.at("best_head_hex").get<std::string>();
  st.reward_baseline = j.value("reward_baseline", 0.0);
  st.has_best = j.at("has_best").get<bool>();
  return st;
}

}  // namespace detail

/// Full Algorithm-1 training loop. When `run_dir` is given, rounds stream to
/// `<run_dir>/log/rl_rounds.jsonl` and training is resumable from the last
/// completed round. The estimator ends at the checkpoint picked by
/// cfg.checkpoint_rule (ties resolved toward the later iteration).
inline RlTrainResult train_qve_rl(Estimator& est, QAReader& reader,
                                  const CorpusSplit& synthetic,
                                  const CorpusSplit& annotations, const TrainConfig& cfg,
                                  const std::string& run_dir = "") {
  cfg.validate();
  if (synthetic.size() == 0) throw EmptySplit("synthetic split is empty");
  if (annotations.size() == 0) throw EmptySplit("annotation split is empty");

  LearnerCheckpoint theta0 = reader.snapshot("theta_0");
  EvalResult before = evaluate_reader(reader, annotations);
  if (cfg.reward_mode == RewardMode::loss_drop)
    before.qa_loss = reader.loss(make_batch(annotations));

  std::string log_path, state_path;
  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir + "/log");
    std::filesystem::create_directories(run_dir + "/qve");
    std::filesystem::create_directories(run_dir + "/checkpoints");
    save_checkpoint(theta0, run_dir + "/checkpoints");
    log_path = run_dir + "/log/rl_rounds.jsonl";
    state_path = run_dir + "/qve/rl_state.json";
  }

  RlTrainResult result;
  result.before_em = before.em;

  Rng rng(derive_seed(cfg.seed, "rl_outer"));
  size_t start_iter = 0;
  double reward_baseline = 0.0;
  bool has_best = false;
  size_t best_iter = 0;
  double best_metric = 0.0;
  std::string best_blob;

  if (!state_path.empty() && std::filesystem::exists(state_path)) {
    auto st = detail::load_rl_state(state_path);
    start_iter = st.next_iteration;
    rng.set_state(st.rng_state);
    est.restore_head(detail::from_hex(st.head_hex));
    reward_baseline = st.reward_baseline;
    has_best = st.has_best;
    best_iter = st.best_iteration;
    best_metric = st.best_metric;
    best_blob = detail::from_hex(st.best_head_hex);
    // reload the completed rounds for the returned log
    std::ifstream in(log_path);
    std::string line;
    while (std::getline(in, line) && result.rounds.size() < start_iter)
      if (!line.empty()) result.rounds.push_back(SelectionRound::from_json(
          nlohmann::json::parse(line)));
  }

  std::ofstream log_out;
  if (!log_path.empty())
    log_out.open(log_path, start_iter ? std::ios::app : std::ios::trunc);

  for (size_t it = start_iter; it < cfg.outer_iterations; ++it) {
    SelectionRound round = run_outer_iteration(est, reader, theta0, synthetic,
                                               annotations, cfg, rng, it, &before,
                                               reward_baseline);
    if (cfg.use_reward_baseline)
      reward_baseline = cfg.baseline_momentum * reward_baseline +
                        (1.0 - cfg.baseline_momentum) * round.reward;

    double metric = cfg.checkpoint_rule == CheckpointRule::highest_reward
                        ? round.reward
                        : round.qa_loss;
    bool better = !has_best || (cfg.checkpoint_rule == CheckpointRule::highest_reward
                                    ? metric >= best_metric
                                    : metric <= best_metric);
    if (better) {
      has_best = true;
      best_iter = it;
      best_metric = metric;
      best_blob = est.serialize();
    }

    if (log_out.is_open()) {
      log_out << round.to_json().dump() << "\n";
      log_out.flush();
    }
    result.rounds.push_back(std::move(round));

    if (!state_path.empty()) {
      detail::RlState st;
      st.next_iteration = it + 1;
      st.rng_state = rng.state();
      st.head_hex = detail::to_hex(est.serialize());
      st.best_iteration = best_iter;
      st.best_metric = best_metric;
      st.best_head_hex = detail::to_hex(best_blob);
      st.reward_baseline = reward_baseline;
      st.has_best = has_best;
      detail::save_rl_state(st, state_path);
    }
  }

  if (has_best) {
    est.restore_head(best_blob);
    result.best_iteration = best_iter;
    result.best_metric = best_metric;
    result.best_head_blob = best_blob;
  } else {
    result.best_head_blob = est.serialize();
  }
  if (!run_dir.empty())
    write_file(run_dir + "/qve/best_head.bin", result.best_head_blob);
  return result;
}

}  // namespace qve
