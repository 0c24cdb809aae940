#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "qve/corpus.hpp"
#include "qve/reinforce.hpp"
#include "qve/toy_backend.hpp"
#include "qve/util.hpp"

namespace qve {

struct BatchTooLarge : Error {
  using Error::Error;
};
struct SingleClass : Error {
  using Error::Error;
};

struct PlantedExample {
  QAExample example;
  Quality quality = Quality::clean;
  std::vector<double> latent_features;  // small vector correlated with quality
};

struct SandboxCorpus {
  CorpusSplit annotated;
  CorpusSplit synthetic;
  std::vector<PlantedExample> planted;
  std::unordered_map<std::string, Quality> labels;
};

// ---------------------------------------------------------------------------
// Template-grammar world: each context states three facts of the form
// "the <attr> of <subj> is <value> .". Values are typed per attribute, so
// relational cues and type cues both carry signal.
// ---------------------------------------------------------------------------

namespace sandbox_grammar {

inline const std::vector<std::string>& attributes() {
  static const std::vector<std::string> v = {"capital", "color",  "size",  "shape",
                                             "price",   "weight", "height", "speed",
                                             "age",     "motto",  "founder", "rank"};
  return v;
}

inline const std::vector<std::vector<std::string>>& value_pools() {
  static const std::vector<std::vector<std::string>> v = {
      {"paris", "oslo", "cairo", "lima", "quito", "hanoi", "dakar", "tunis"},
      {"red", "blue", "green", "amber", "violet", "crimson", "teal", "ochre"},
      {"tiny", "small", "medium", "large", "huge", "giant", "compact", "vast"},
      {"round", "square", "oval", "flat", "curved", "spiral", "twisted", "pointed"},
      {"cheap", "costly", "modest", "premium", "bargain", "steep", "fair", "low"},
      {"light", "heavy", "hefty", "dense", "airy", "solid", "slim", "feathery"},
      {"tall", "short", "towering", "stubby", "lofty", "rising", "deep", "middling"},
      {"fast", "slow", "rapid", "sluggish", "swift", "brisk", "crawling", "quick"},
      {"old", "new", "ancient", "modern", "young", "aged", "fresh", "vintage"},
      {"courage", "honor", "unity", "wisdom", "truth", "freedom", "glory", "hope"},
      {"smith", "jones", "garcia", "chen", "patel", "kim", "novak", "rossi"},
      {"first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth"}};
  return v;
}

// non-answer tokens that fill the decoy frames
inline const std::vector<std::string>& junk_fillers() {
  static const std::vector<std::string> v = {
      "unknown",  "undecided", "unclear",    "disputed",  "debated",
      "contested", "uncertain", "unverified", "classified", "redacted"};
  return v;
}

inline const std::vector<std::string>& subjects() {
  static const std::vector<std::string> v = {
      "arvon",  "belda",  "corin",  "drome",  "elara",  "fenwick", "gorse",  "halden",
      "irwell", "jasker", "kelmor", "lyrian", "mavek",  "norwin",  "opaline", "pravik",
      "quorin", "rendal", "sorvel", "tamric", "ulvane", "vestor",  "wrenna",  "xandor",
      "yorven", "zelmar", "ashby",  "boralis", "cindral", "dunmore", "everly", "farrow",
      "glenrow", "hartsel", "ivoria", "jundal", "kestwick", "lorneth", "medara", "nivel",
      "ostrander", "pellam", "quintor", "ravelin", "selwick", "torvald", "umbria",
      "valcor", "westmere", "yarrow", "zephrin", "aldric", "brenwal", "caspian",
      "delmont", "eswick", "florin", "gravton", "hollis", "ingram", "jorvik",
      "kelsworth", "lindell", "marburg", "nestor", "orvandal", "pemberly", "quade",
      "ristol", "sandover", "tilburn", "ulmstead", "varden", "whitlow", "xerel",
      "yardley", "zorander", "amwell", "bricket", "cordale", "danby", "elsmere",
      "fallow", "girton", "hamlin", "iredell", "jephson", "kirwood", "lomond",
      "maxton", "norcross", "oswin", "purbeck", "quill", "redfern", "stanwick",
      "thorley"};
  return v;
}

struct Fact {
  std::string subject, attribute, value;
  size_t value_begin = 0, value_end = 0;  // char span within the context text
};

struct GrammarContext {
  Context ctx;
  std::vector<Fact> facts;
};

// Contexts deliberately repeat attributes across subjects ("the capital of
// arvon is paris . the capital of belda is oslo .") so answering requires
// matching the subject, not just spotting the attribute. Each context also
// carries decoy sentences that repeat a real fact's frame with a non-answer
// filler ("the capital of arvon is unknown ."): window matching alone ties on
// them, so a reader must additionally learn which tokens are answer-typed.
// Values within one context are kept distinct per attribute.
inline GrammarContext make_context(const std::string& id, Rng& rng, size_t facts_per_ctx = 3) {
  GrammarContext out;
  out.ctx.id = id;
  const auto& attrs = attributes();
  const auto& pools = value_pools();
  const auto& subs = subjects();
  const auto& junk = junk_fillers();

  size_t n_attrs = (facts_per_ctx + 1) / 2;
  std::vector<size_t> attr_pick = rng.sample_indices(attrs.size(), n_attrs);
  std::vector<size_t> subj_pick = rng.sample_indices(subs.size(), facts_per_ctx);
  std::vector<std::vector<size_t>> value_pick(n_attrs);
  for (size_t a = 0; a < n_attrs; ++a)
    value_pick[a] = rng.sample_indices(pools[attr_pick[a]].size(), 2);

  for (size_t f = 0; f < facts_per_ctx; ++f) {
    size_t a = f / 2;  // each attribute appears twice in a row
    Fact fact;
    fact.attribute = attrs[attr_pick[a]];
    fact.subject = subs[subj_pick[f]];
    fact.value = pools[attr_pick[a]][value_pick[a][f % 2]];
    std::string sentence =
        "the " + fact.attribute + " of " + fact.subject + " is ";
    fact.value_begin = out.ctx.text.size() + sentence.size();
    fact.value_end = fact.value_begin + fact.value.size();
    out.ctx.text += sentence + fact.value + " . ";
    out.facts.push_back(fact);
  }

  size_t n_decoys = std::min<size_t>(2, facts_per_ctx);
  std::vector<size_t> decoy_facts = rng.sample_indices(facts_per_ctx, n_decoys);
  for (size_t d : decoy_facts) {
    const Fact& fact = out.facts[d];
    out.ctx.text += "the " + fact.attribute + " of " + fact.subject + " is " +
                    junk[rng.uniform_int(junk.size())] + " . ";
  }

  // drop the trailing space
  if (!out.ctx.text.empty() && out.ctx.text.back() == ' ') out.ctx.text.pop_back();
  return out;
}

inline bool question_mentions(const std::string& question, const Fact& f) {
  bool attr = false, subj = false;
  for (const auto& t : tokenize(question)) {
    attr |= t.text == f.attribute;
    subj |= t.text == f.subject;
  }
  return attr && subj;
}

// Ground-truth quality of a generated question for a given fact: mode tells
// trivial copies apart; otherwise the question is clean iff it actually asks
// about the fact it is paired with.
inline Quality semantic_quality(Quality generator_mode, const std::string& question,
                                const Fact& fact) {
  if (generator_mode == Quality::trivial) return Quality::trivial;
  return question_mentions(question, fact) ? Quality::clean : Quality::mismatched;
}

// Annotator phrasings; none of them matches a machine template shape.
inline std::string human_question(const Fact& f, Rng& rng) {
  double u = rng.uniform01();
  if (u < 0.3) return "could you give the " + f.attribute + " of " + f.subject + " ?";
  if (u < 0.55) return "can you say what the " + f.attribute + " of " + f.subject + " is ?";
  if (u < 0.8) return "i wonder what the " + f.attribute + " of " + f.subject + " is .";
  return "name the " + f.attribute + " of " + f.subject + " .";
}

inline std::vector<GrammarContext> build_world(size_t n_contexts, uint64_t seed,
                                               const std::string& id_prefix = "sbx_ctx",
                                               size_t facts_per_ctx = 3) {
  Rng world_rng(seed);
  std::vector<GrammarContext> world;
  world.reserve(n_contexts);
  for (size_t i = 0; i < n_contexts; ++i)
    world.push_back(make_context(id_prefix + "_" + std::to_string(i), world_rng,
                                 facts_per_ctx));
  return world;
}

// Human questions over every fact of a world.
inline CorpusSplit annotate_world(const std::vector<GrammarContext>& world,
                                  uint64_t seed, const std::string& id_prefix,
                                  SplitName name) {
  CorpusSplit out;
  out.name = name;
  Rng human_rng(seed);
  size_t k = 0;
  for (const auto& gc : world) {
    out.contexts.push_back(gc.ctx);
    for (const auto& fact : gc.facts) {
      QAExample ex;
      ex.context_ref = gc.ctx.id;
      ex.question = human_question(fact, human_rng);
      ex.answer = {fact.value, fact.value_begin, fact.value_end};
      ex.origin = Origin::annotated;
      ex.example_id = id_prefix + "_" + std::to_string(k++);
      out.examples.push_back(std::move(ex));
    }
  }
  out.rebuild_index();
  validate_split(out);
  return out;
}

}  // namespace sandbox_grammar

/// Desk-scale corpus with planted noise labels. Annotated questions cover the
/// first half of the contexts; synthetic questions cover every fact and are
/// generated by the toy generator running in its noisy modes.
inline SandboxCorpus generate_sandbox(size_t n_contexts,
                                      std::pair<double, double> noise_rates,
                                      uint64_t seed, size_t facts_per_ctx = 3) {
  auto [p_mismatch, p_trivial] = noise_rates;
  if (p_mismatch < 0 || p_trivial < 0 || p_mismatch + p_trivial >= 1.0)
    throw Error("noise rates must be >= 0 with sum < 1");

  SandboxCorpus out;
  out.annotated.name = SplitName::target_annotated;
  out.synthetic.name = SplitName::target_synthetic;

  Rng human_rng(derive_seed(seed, "sbx_human"));
  Rng latent_rng(derive_seed(seed, "sbx_latent"));
  ToyGenerator gen(derive_seed(seed, "sbx_qg"), p_mismatch, p_trivial);

  std::vector<sandbox_grammar::GrammarContext> world = sandbox_grammar::build_world(
      n_contexts, derive_seed(seed, "sbx_world"), "sbx_ctx", facts_per_ctx);

  for (const auto& gc : world) {
    out.annotated.contexts.push_back(gc.ctx);
    out.synthetic.contexts.push_back(gc.ctx);
  }

  size_t ann_contexts = (n_contexts + 1) / 2;
  size_t ann_k = 0;
  for (size_t i = 0; i < ann_contexts; ++i) {
    for (const auto& fact : world[i].facts) {
      QAExample ex;
      ex.context_ref = world[i].ctx.id;
      ex.question = sandbox_grammar::human_question(fact, human_rng);
      ex.answer = {fact.value, fact.value_begin, fact.value_end};
      ex.origin = Origin::annotated;
      ex.example_id = "ann_" + std::to_string(ann_k++);
      out.annotated.examples.push_back(std::move(ex));
    }
  }

  size_t syn_k = 0;
  for (const auto& gc : world) {
    for (const auto& fact : gc.facts) {
      AnswerSpan span{fact.value, fact.value_begin, fact.value_end};
      GeneratedQuestion gq = gen.generate(gc.ctx, span);
      QAExample ex;
      ex.context_ref = gc.ctx.id;
      ex.question = gq.question;
      ex.answer = span;
      ex.origin = Origin::synthetic;
      ex.gen_loglik = gq.gen_loglik;
      ex.example_id = "syn_" + std::to_string(syn_k++);

      PlantedExample planted;
      planted.example = ex;
      planted.quality =
          sandbox_grammar::semantic_quality(gen.last_quality(), gq.question, fact);
      double bias = planted.quality == Quality::clean ? 1.0
                    : planted.quality == Quality::mismatched ? -1.0
                                                             : 0.0;
      planted.latent_features = {bias + latent_rng.uniform(-0.3, 0.3),
                                 latent_rng.uniform(-1.0, 1.0)};
      out.labels[ex.example_id] = planted.quality;
      out.synthetic.examples.push_back(std::move(ex));
      out.planted.push_back(std::move(planted));
    }
  }

  out.annotated.rebuild_index();
  out.synthetic.rebuild_index();
  validate_split(out.annotated);
  validate_split(out.synthetic);
  return out;
}

// ---------------------------------------------------------------------------
// Policy-gradient oracle: exact gradient by enumeration of the selection
// space, for logistic policies v_l = logistic(w . x_l).
// ---------------------------------------------------------------------------

struct OracleGradient {
  Eigen::VectorXd exact;         // -sum_S pi(S) r(S) grad log pi(S)  (loss gradient)
  Eigen::VectorXd direct;       // -grad of sum_S pi(S) r(S), via product rule
  Eigen::VectorXd estimate_mean;
  size_t n_samples = 0;
};

inline std::vector<double> logistic_values(const Eigen::VectorXd& w,
                                           const std::vector<Eigen::VectorXd>& feats) {
  std::vector<double> v(feats.size());
  for (size_t l = 0; l < feats.size(); ++l) v[l] = logistic(w.dot(feats[l]));
  return v;
}

/// Enumerates all 2^B selections. reward_table[mask] is the reward of the
/// selection whose bit l equals s_l. Fills `exact` (score-function form) and
/// `direct` (product-rule differentiation of the enumerated expectation);
/// the two are independent computations of the same quantity.
inline OracleGradient exact_policy_gradient(const Eigen::VectorXd& w,
                                            const std::vector<Eigen::VectorXd>& feats,
                                            const std::vector<double>& reward_table) {
  size_t b = feats.size();
  if (b > 12) throw BatchTooLarge("enumeration supports at most 12 positions");
  if (reward_table.size() != (size_t{1} << b))
    throw Error("reward table must have 2^B entries");
  std::vector<double> v = logistic_values(w, feats);

  OracleGradient out;
  out.exact = Eigen::VectorXd::Zero(w.size());
  out.direct = Eigen::VectorXd::Zero(w.size());

  for (size_t mask = 0; mask < reward_table.size(); ++mask) {
    double pi = 1.0;
    for (size_t l = 0; l < b; ++l) pi *= (mask >> l & 1) ? v[l] : (1.0 - v[l]);
    double r = reward_table[mask];

    // score-function form: pi(S) r(S) sum_l (s_l - v_l) x_l
    Eigen::VectorXd glogpi = Eigen::VectorXd::Zero(w.size());
    for (size_t l = 0; l < b; ++l)
      glogpi += ((mask >> l & 1) ? 1.0 - v[l] : -v[l]) * feats[l];
    out.exact -= pi * r * glogpi;

    // product rule: d pi / d v_l = (s_l ? +1 : -1) * prod_{k != l} bern(s_k)
    for (size_t l = 0; l < b; ++l) {
      double rest = 1.0;
      for (size_t k = 0; k < b; ++k) {
        if (k == l) continue;
        rest *= (mask >> k & 1) ? v[k] : (1.0 - v[k]);
      }
      double dpi_dvl = (mask >> l & 1) ? rest : -rest;
      out.direct -= r * dpi_dvl * v[l] * (1.0 - v[l]) * feats[l];
    }
  }
  return out;
}

/// Monte Carlo mean of the production single-sample estimator, using the
/// same sampling and per-position gradient code as training.
inline Eigen::VectorXd mc_policy_gradient(const Eigen::VectorXd& w,
                                          const std::vector<Eigen::VectorXd>& feats,
                                          const std::vector<double>& reward_table,
                                          size_t n_samples, Rng& rng) {
  std::vector<double> v = logistic_values(w, feats);
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(w.size());
  for (size_t n = 0; n < n_samples; ++n) {
    std::vector<int> sel = sample_selection(v, rng);
    size_t mask = 0;
    for (size_t l = 0; l < sel.size(); ++l)
      if (sel[l]) mask |= size_t{1} << l;
    std::vector<double> draw = qve_raw_gradient(v, sel, reward_table[mask]);
    for (size_t l = 0; l < feats.size(); ++l) acc += draw[l] * feats[l];
  }
  return acc / static_cast<double>(n_samples);
}

/// Rank-based AUC of clean (positive) vs mismatched/trivial (negative),
/// with the mid-rank convention for ties.
inline double auc_clean_vs_noisy(const std::vector<std::pair<std::string, double>>& scores,
                                 const std::unordered_map<std::string, Quality>& labels) {
  struct Row {
    double score;
    bool positive;
  };
  std::vector<Row> rows;
  rows.reserve(scores.size());
  for (const auto& [id, s] : scores) {
    auto it = labels.find(id);
    if (it == labels.end()) throw Error("no label for example " + id);
    rows.push_back({s, it->second == Quality::clean});
  }
  size_t n_pos = 0, n_neg = 0;
  for (const auto& r : rows) (r.positive ? n_pos : n_neg)++;
  if (n_pos == 0 || n_neg == 0)
    throw SingleClass("AUC needs both clean and noisy examples");

  std::sort(rows.begin(), rows.end(),
            [](const Row& a, const Row& b) { return a.score < b.score; });
  double rank_sum = 0.0;
  size_t i = 0;
  while (i < rows.size()) {
    size_t j = i;
    while (j < rows.size() && rows[j].score == rows[i].score) ++j;
    double mid_rank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
    for (size_t k = i; k < j; ++k)
      if (rows[k].positive) rank_sum += mid_rank;
    i = j;
  }
  double n_pos_d = static_cast<double>(n_pos);
  return (rank_sum - n_pos_d * (n_pos_d + 1.0) / 2.0) /
         (n_pos_d * static_cast<double>(n_neg));
}

// ---------------------------------------------------------------------------
// Bundle: everything a full pipeline run needs, written in the corpus module
// formats. The source world is noise-free; eval contexts are fresh.
// ---------------------------------------------------------------------------

struct SandboxBundleOptions {
  size_t source_contexts = 150;
  size_t target_contexts = 200;
  size_t eval_contexts = 120;
  double p_mismatch = 0.3;
  double p_trivial = 0.2;
  uint64_t seed = 7;
};

struct SandboxBundle {
  CorpusSplit source;        // clean annotated world
  CorpusSplit target_train;  // annotation pool over the target contexts
  CorpusSplit target_eval;   // human questions over fresh contexts
  CorpusSplit synthetic;     // planted noisy machine questions
  std::unordered_map<std::string, Quality> labels;
};

inline SandboxBundle generate_sandbox_bundle(const SandboxBundleOptions& opt) {
  using namespace sandbox_grammar;
  SandboxBundle out;

  // source world: clean, fully annotated
  auto src_world = build_world(opt.source_contexts,
                               derive_seed(opt.seed, "bundle_source"), "src_ctx");
  out.source = annotate_world(src_world, derive_seed(opt.seed, "bundle_source_q"),
                              "src", SplitName::source_train);

  // target world: annotation pool over every context plus planted synthetic
  auto tgt_world = build_world(opt.target_contexts,
                               derive_seed(opt.seed, "bundle_target"), "tgt_ctx");
  out.target_train = annotate_world(tgt_world, derive_seed(opt.seed, "bundle_target_q"),
                                    "pool", SplitName::target_annotated);
  {
    ToyGenerator gen(derive_seed(opt.seed, "bundle_qg"), opt.p_mismatch, opt.p_trivial);
    CorpusSplit syn;
    syn.name = SplitName::target_synthetic;
    size_t k = 0;
    for (const auto& gc : tgt_world) {
      syn.contexts.push_back(gc.ctx);
      for (const auto& fact : gc.facts) {
        AnswerSpan span{fact.value, fact.value_begin, fact.value_end};
        GeneratedQuestion gq = gen.generate(gc.ctx, span);
        QAExample ex;
        ex.context_ref = gc.ctx.id;
        ex.question = gq.question;
        ex.answer = span;
        ex.origin = Origin::synthetic;
        ex.gen_loglik = gq.gen_loglik;
        ex.example_id = "syn_" + std::to_string(k++);
        out.labels[ex.example_id] =
            semantic_quality(gen.last_quality(), gq.question, fact);
        syn.examples.push_back(std::move(ex));
      }
    }
    syn.rebuild_index();
    validate_split(syn);
    out.synthetic = std::move(syn);
  }

  // eval world: fresh contexts, human questions
  auto ev_world = build_world(opt.eval_contexts, derive_seed(opt.seed, "bundle_eval"),
                              "ev_ctx");
  out.target_eval = annotate_world(ev_world, derive_seed(opt.seed, "bundle_eval_q"),
                                   "eval", SplitName::eval_split);
  return out;
}

inline void write_labels_jsonl(const std::unordered_map<std::string, Quality>& labels,
                               const std::vector<QAExample>& order,
                               const std::string& path) {
  std::string body;
  for (const auto& ex : order) {
    auto it = labels.find(ex.example_id);
    if (it == labels.end()) continue;
    nlohmann::ordered_json j{{"example_id", ex.example_id},
                             {"quality", to_string(it->second)}};
    body += j.dump();
    body += "\n";
  }
  write_file(path, body);
}

inline std::unordered_map<std::string, Quality> read_labels_jsonl(const std::string& path) {
  std::unordered_map<std::string, Quality> labels;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    std::string q = j.at("quality").get<std::string>();
    Quality quality = q == "clean" ? Quality::clean
                      : q == "mismatched" ? Quality::mismatched
                                          : Quality::trivial;
    labels[j.at("example_id").get<std::string>()] = quality;
  }
  return labels;
}

inline void write_sandbox_bundle(const SandboxBundle& bundle, const std::string& dir) {
  std::filesystem::create_directories(dir);
  save_corpus(bundle.source, dir + "/source.json");
  save_corpus(bundle.target_train, dir + "/target_train.json");
  save_corpus(bundle.target_eval, dir + "/target_eval.json");
  save_corpus(bundle.synthetic, dir + "/synthetic.json");
  write_labels_jsonl(bundle.labels, bundle.synthetic.examples, dir + "/labels.jsonl");
}

}  // namespace qve
