#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>

#include "qve/pipeline.hpp"
#include "qve/prepare.hpp"
#include "qve/sandbox.hpp"
#include "test_support.hpp"

using namespace qve;
using qve::test::TempDir;

namespace {

// small bundle + config shared by the pipeline tests
struct PipelineFixture {
  TempDir tmp{"pipeline"};
  ExperimentConfig cfg;

  PipelineFixture() {
    SandboxBundleOptions opt;
    opt.source_contexts = 20;
    opt.target_contexts = 24;
    opt.eval_contexts = 10;
    opt.seed = 77;
    write_sandbox_bundle(generate_sandbox_bundle(opt), tmp.file("sbx"));

    cfg.run_id = "t";
    cfg.runs_root = tmp.file("runs");
    cfg.source_path = tmp.file("sbx/source.json");
    cfg.target_train_path = tmp.file("sbx/target_train.json");
    cfg.target_eval_path = tmp.file("sbx/target_eval.json");
    cfg.synthetic_path = tmp.file("sbx/synthetic.json");
    cfg.n_annotations = 30;
    cfg.k_percent = 60.0;
    cfg.method = FilterMethod::none;
    cfg.seeds = {5};
    cfg.toy.vocab_hash_dim = 1024;
    cfg.toy.encoder_dim = 32;
    cfg.toy.stage_lr = 0.4;
    cfg.train.outer_iterations = 4;
    cfg.train.outer_batch = 8;
    cfg.train.inner_iterations = 2;
    cfg.train.inner_batch = 2;
    cfg.train.qve_lr = 0.05;
    cfg.train.qa_lr = 0.3;
  }
};

}  // namespace

TEST_CASE("config validation catches bad stage lists") {
  ExperimentConfig cfg;
  cfg.target_train_path = "x";
  cfg.target_eval_path = "y";
  cfg.finetune_order = {};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.finetune_order = {"bogus"};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.finetune_order = {"source", "target_synthetic", "target_annotated"};
  cfg.merge_synthetic_and_annotated = true;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.merge_synthetic_and_annotated = false;
  cfg.finetune_order = {"source", "target_merged"};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.merge_synthetic_and_annotated = true;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("yaml and json configs load identically") {
  TempDir tmp("config");
  const char* yaml = R"(run_id: demo
source_path: src.json
target_train_path: train.json
target_eval_path: eval.json
n_annotations: 123
k_percent: 45.5
method: qve_rl
finetune_order: [source, target_synthetic, target_annotated]
seeds: [1, 2, 3]
train:
  outer_iterations: 77
  outer_batch: 11
  inner_iterations: 4
  inner_batch: 2
  qve_lr: 0.01
  reward_mode: f1_gain
  checkpoint_rule: lowest_qa_loss
toy:
  encoder_dim: 16
  vocab_hash_dim: 256
)";
  write_file(tmp.file("c.yaml"), yaml);
  ExperimentConfig a = load_experiment_config(tmp.file("c.yaml"));
  CHECK(a.run_id == "demo");
  CHECK(a.n_annotations == 123);
  CHECK(a.k_percent == 45.5);
  CHECK(a.method == FilterMethod::qve_rl);
  CHECK(a.seeds == std::vector<uint64_t>{1, 2, 3});
  CHECK(a.train.outer_iterations == 77);
  CHECK(a.train.outer_batch == 11);
  CHECK(a.train.reward_mode == RewardMode::f1_gain);
  CHECK(a.train.checkpoint_rule == CheckpointRule::lowest_qa_loss);
  CHECK(a.toy.encoder_dim == 16);

  write_file(tmp.file("c.json"), config_to_json(a).dump(1));
  ExperimentConfig b = load_experiment_config(tmp.file("c.json"));
  CHECK(config_to_json(b).dump() == config_to_json(a).dump());
}

TEST_CASE("degenerate pipelines reproduce the baseline stage semantics") {
  PipelineFixture fx;

  SECTION("source only") {
    fx.cfg.finetune_order = {"source"};
    RunRecord rec = run_experiment(fx.cfg, 5);
    REQUIRE(rec.stages.size() == 1);
    CHECK(rec.stages[0].name == "source");
    CHECK(rec.final_eval.em == rec.stages[0].eval.em);
  }
  SECTION("source then annotations") {
    fx.cfg.finetune_order = {"source", "target_annotated"};
    RunRecord rec = run_experiment(fx.cfg, 5);
    REQUIRE(rec.stages.size() == 2);
    CHECK(rec.stages[1].name == "target_annotated");
  }
  SECTION("full order with no filtering keeps every synthetic example") {
    RunRecord rec = run_experiment(fx.cfg, 5);
    REQUIRE(rec.stages.size() == 3);
    CHECK(rec.filter_report.kept_count == rec.filter_report.input_count);
    CHECK(rec.filter_report.input_count == 72);
  }
}

TEST_CASE("the eval split is never a training input") {
  PipelineFixture fx;
  fx.cfg.method = FilterMethod::lm;
  RunRecord rec = run_experiment(fx.cfg, 5);
  for (const auto& stage : rec.stages)
    for (const auto& path : stage.paths_read)
      CHECK(path != fx.cfg.target_eval_path);
}

TEST_CASE("runs are reproducible for a fixed seed") {
  PipelineFixture fx;
  fx.cfg.method = FilterMethod::qve_rl;
  RunRecord a = run_experiment(fx.cfg, 5);
  RunRecord b = run_experiment(fx.cfg, 5);
  CHECK(a.final_eval.em == b.final_eval.em);
  CHECK(a.final_eval.f1 == b.final_eval.f1);
  CHECK(a.filter_report.kept_ids == b.filter_report.kept_ids);
  REQUIRE(a.stages.size() == b.stages.size());
  for (size_t i = 0; i < a.stages.size(); ++i)
    CHECK(a.stages[i].eval.em == b.stages[i].eval.em);
}

TEST_CASE("every filter method runs end to end") {
  PipelineFixture fx;
  for (FilterMethod m : {FilterMethod::roundtrip, FilterMethod::lm,
                         FilterMethod::qve_binary, FilterMethod::qve_rank,
                         FilterMethod::qve_rl}) {
    fx.cfg.method = m;
    fx.cfg.run_id = std::string("t_") + to_string(m);
    RunRecord rec = run_experiment(fx.cfg, 5);
    CHECK(rec.filter_report.method == m);
    CHECK(rec.filter_report.kept_count <= rec.filter_report.input_count);
    if (m != FilterMethod::roundtrip)
      CHECK(rec.filter_report.kept_count ==
            static_cast<size_t>(0.6 * rec.filter_report.input_count));
  }
}

TEST_CASE("merged finetuning consumes one combined corpus") {
  PipelineFixture fx;
  fx.cfg.merge_synthetic_and_annotated = true;
  fx.cfg.finetune_order = {"source", "target_merged"};
  RunRecord rec = run_experiment(fx.cfg, 5);
  REQUIRE(rec.stages.size() == 2);
  CHECK(rec.stages[1].name == "target_merged");
}

TEST_CASE("run records persist and reload") {
  PipelineFixture fx;
  RunRecord rec = run_experiment(fx.cfg, 5);
  std::string path = fx.cfg.runs_root + "/t_s5/report/record.json";
  RunRecord back = RunRecord::from_json(nlohmann::json::parse(read_file(path)));
  CHECK(back.run_id == rec.run_id);
  CHECK(back.final_eval.em == rec.final_eval.em);
  CHECK(back.eval_fingerprint == rec.eval_fingerprint);
  CHECK(back.filter_report.kept_count == rec.filter_report.kept_count);
}

TEST_CASE("report tabulates and rejects mixed eval splits") {
  PipelineFixture fx;
  RunRecord a = run_experiment(fx.cfg, 5);
  fx.cfg.run_id = "t2";
  RunRecord b = run_experiment(fx.cfg, 5);

  ReportTable t1 = report({a});
  CHECK(t1.csv.find("t_s5") != std::string::npos);
  ReportTable t2 = report({a, b});
  CHECK(t2.csv.find("t2_s5") != std::string::npos);

  RunRecord c = a;
  c.eval_fingerprint ^= 1;
  CHECK_THROWS_AS(report({a, c}), MixedEvalSplits);
}

TEST_CASE("sweep shares seeds, continues past failures, obeys the top-k law") {
  PipelineFixture fx;
  fx.cfg.method = FilterMethod::lm;

  SECTION("single-value sweep equals a direct run") {
    SweepResult res = sweep(fx.cfg, SweepAxis::n_annotations, {30});
    REQUIRE(res.records.size() == 1);
    fx.cfg.n_annotations = 30;
    fx.cfg.run_id = "t_n30";
    RunRecord direct = run_experiment(fx.cfg, 5);
    CHECK(res.records[0].final_eval.em == direct.final_eval.em);
  }
  SECTION("k sweep kept counts") {
    SweepResult res = sweep(fx.cfg, SweepAxis::k_percent, {20, 60, 100});
    REQUIRE(res.records.size() == 3);
    size_t n = res.records[0].filter_report.input_count;
    CHECK(res.records[0].filter_report.kept_count ==
          static_cast<size_t>(std::floor(0.2 * n)));
    CHECK(res.records[1].filter_report.kept_count ==
          static_cast<size_t>(std::floor(0.6 * n)));
    CHECK(res.records[2].filter_report.kept_count == n);
  }
  SECTION("failures are recorded and the sweep continues") {
    SweepResult res = sweep(fx.cfg, SweepAxis::n_annotations, {1000000, 30});
    CHECK(res.records.size() == 1);
    REQUIRE(res.failures.size() == 1);
    CHECK(res.failures[0].find("n1000000") != std::string::npos);
  }
}

TEST_CASE("prepared inputs build the feature reader once") {
  PipelineFixture fx;
  PreparedInputs in = prepare_inputs(fx.cfg, 5);
  CHECK(in.annotations.size() == 30);
  CHECK(in.synthetic.size() == 72);
  CHECK(in.row2 != nullptr);
  EvalResult r = evaluate_reader(*in.row2, in.annotations);
  CHECK(r.em > 0.0);
}

#ifdef QVE_CLI_PATH
TEST_CASE("command line interface round trip") {
  TempDir tmp("cli");
  std::string cli = QVE_CLI_PATH;
  auto sh = [&](const std::string& args) {
    std::string cmd = cli + " " + args + " > " + tmp.file("out.txt") + " 2>&1";
    return std::system(cmd.c_str());
  };

  REQUIRE(sh("sandbox generate --out " + tmp.file("sbx") +
             " --noise 0.3,0.2 --seed 7 --source-contexts 10 --target-contexts 12 "
             "--eval-contexts 6") == 0);

  std::string cfg =
      "run_id: cli\n"
      "runs_root: " + tmp.file("runs") + "\n" +
      "source_path: " + tmp.file("sbx/source.json") + "\n" +
      "target_train_path: " + tmp.file("sbx/target_train.json") + "\n" +
      "target_eval_path: " + tmp.file("sbx/target_eval.json") + "\n" +
      "synthetic_path: " + tmp.file("sbx/synthetic.json") + "\n" +
      "n_annotations: 20\n"
      "method: lm\n"
      "toy: {vocab_hash_dim: 512, encoder_dim: 16, stage_lr: 0.4}\n"
      "train: {outer_iterations: 2, outer_batch: 6, inner_iterations: 2, inner_batch: "
      "2, qve_lr: 0.05, qa_lr: 0.3}\n"
      "seeds: [3]\n";
  write_file(tmp.file("cfg.yaml"), cfg);

  REQUIRE(sh("run --config " + tmp.file("cfg.yaml")) == 0);
  REQUIRE(sh("report " + tmp.file("runs/cli_s3")) == 0);
  std::string out = read_file(tmp.file("out.txt"));
  CHECK(out.find("cli_s3") != std::string::npos);

  REQUIRE(sh("filter --config " + tmp.file("cfg.yaml") + " --method lm --k 60 --out " +
             tmp.file("filtered.json")) == 0);
  CorpusSplit filtered =
      load_corpus(tmp.file("filtered.json"), CorpusFormat::squad_json);
  CHECK(filtered.size() == static_cast<size_t>(std::floor(0.6 * 36)));
}
#endif
