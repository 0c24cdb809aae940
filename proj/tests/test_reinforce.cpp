#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "qve/reinforce.hpp"
#include "qve/sandbox.hpp"
#include "sandbox_harness.hpp"
#include "test_support.hpp"

using namespace qve;

TEST_CASE("bernoulli selection sampling") {
  Rng rng(5);
  SECTION("empty values give an empty selection") {
    CHECK(sample_selection({}, rng).empty());
  }
  SECTION("values clamped at the top select everything") {
    std::vector<double> v(16, 1.0 - kProbEps);
    std::vector<int> s = sample_selection(v, rng);
    for (int x : s) CHECK(x == 1);
  }
  SECTION("per-position frequency approaches the probability") {
    std::vector<double> v(4, 0.5);
    size_t draws = 100000;
    std::vector<size_t> count(4, 0);
    for (size_t i = 0; i < draws; ++i) {
      auto s = sample_selection(v, rng);
      for (size_t j = 0; j < 4; ++j) count[j] += static_cast<size_t>(s[j]);
    }
    for (size_t j = 0; j < 4; ++j)
      CHECK(std::abs(count[j] / static_cast<double>(draws) - 0.5) < 0.01);
  }
  SECTION("probabilities outside (0,1) are rejected") {
    CHECK_THROWS_AS(sample_selection({0.0}, rng), Error);
    CHECK_THROWS_AS(sample_selection({1.0}, rng), Error);
  }
}

TEST_CASE("policy log probability") {
  CHECK(policy_log_prob({0.5, 0.5, 0.5}, {1, 0, 1}) ==
        Catch::Approx(std::log(1.0 / 8.0)).margin(1e-12));
  CHECK(policy_log_prob({0.3}, {1}) == Catch::Approx(std::log(0.3)).margin(1e-12));
  CHECK(policy_log_prob({0.3}, {0}) == Catch::Approx(std::log(0.7)).margin(1e-12));
  CHECK_THROWS_AS(policy_log_prob({0.5, 0.5}, {1}), LengthMismatch);

  SECTION("probabilities over the whole selection space sum to one") {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
      size_t b = 3;
      std::vector<double> v(b);
      for (auto& x : v) x = rng.uniform(0.05, 0.95);
      double total = 0.0;
      for (size_t mask = 0; mask < (size_t{1} << b); ++mask) {
        std::vector<int> s(b);
        for (size_t l = 0; l < b; ++l) s[l] = (mask >> l) & 1;
        double lp = policy_log_prob(v, s);
        CHECK(lp <= 0.0);
        total += std::exp(lp);
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("score-function per-position gradient") {
  std::vector<double> v{0.2, 0.7, 0.5};
  std::vector<int> s{1, 0, 1};
  auto g0 = qve_raw_gradient(v, s, 0.0);
  for (double x : g0) CHECK(x == 0.0);

  auto g1 = qve_raw_gradient(v, s, 1.5);
  auto g2 = qve_raw_gradient(v, s, 3.0);
  for (size_t i = 0; i < v.size(); ++i)
    CHECK(g2[i] == Catch::Approx(2.0 * g1[i]).margin(1e-12));

  // positive reward pushes selected items up (negative loss gradient)
  CHECK(g1[0] < 0.0);
  CHECK(g1[1] > 0.0);
  CHECK_THROWS_AS(qve_raw_gradient(v, {1, 0}, 1.0), LengthMismatch);
}

namespace {

struct RlFixture {
  SandboxCorpus sbx;
  ToyReader reader;
  LearnerCheckpoint theta0;
  Estimator est;
  TrainConfig cfg;

  explicit RlFixture(uint64_t seed, size_t contexts = 24)
      : sbx(generate_sandbox(contexts, {0.3, 0.2}, seed)),
        reader(1024, seed),
        est(qve::test::make_estimator(32, seed + 1)) {
    Rng rng(seed + 2);
    train_reader_epochs(reader, sbx.annotated, 2, 0.3, 8, rng);
    theta0 = reader.snapshot("theta_0");
    cfg.outer_iterations = 6;
    cfg.outer_batch = 10;
    cfg.inner_iterations = 2;
    cfg.inner_batch = 2;
    cfg.qve_lr = 0.05;
    cfg.qa_lr = 0.3;
    cfg.seed = seed;
  }
};

}  // namespace

TEST_CASE("an all-zero selection is a no-op round") {
  RlFixture fx(31);
  fx.est.head() = ValueHead::zeros(fx.est.head().dims);
  fx.est.head().b4 = -40.0;  // values pinned at the epsilon clamp
  Rng rng(9);
  SelectionRound round = run_outer_iteration(fx.est, fx.reader, fx.theta0,
                                             fx.sbx.synthetic, fx.sbx.annotated,
                                             fx.cfg, rng);
  for (int s : round.selection) CHECK(s == 0);
  CHECK(round.reward == 0.0);
  CHECK(fx.reader.snapshot().same_params(fx.theta0));
  CHECK(round.log_prob <= 0.0);
}

TEST_CASE("every iteration restores the reader exactly") {
  RlFixture fx(33);
  Rng rng(11);
  uint64_t theta0_address = fx.theta0.content_address();
  for (size_t it = 0; it < 8; ++it) {
    run_outer_iteration(fx.est, fx.reader, fx.theta0, fx.sbx.synthetic,
                        fx.sbx.annotated, fx.cfg, rng, it);
    CHECK(fx.reader.snapshot().content_address() == theta0_address);
  }
}

TEST_CASE("a reader that diverged from theta_0 is rejected") {
  RlFixture fx(35);
  auto batch = make_batch(fx.sbx.annotated);
  std::vector<int> ones(batch.size(), 1);
  qa_weighted_update(fx.reader, batch, ones, 0.2);
  Rng rng(3);
  CHECK_THROWS_AS(run_outer_iteration(fx.est, fx.reader, fx.theta0, fx.sbx.synthetic,
                                      fx.sbx.annotated, fx.cfg, rng),
                  CheckpointMismatch);
}

TEST_CASE("selection round serialization round-trips") {
  SelectionRound r;
  r.iteration = 7;
  r.batch_ids = {"a", "b"};
  r.values = {0.25, 0.75};
  r.selection = {1, 0};
  r.reward = -1.5;
  r.log_prob = policy_log_prob(r.values, r.selection);
  r.qa_loss = 2.25;
  SelectionRound back = SelectionRound::from_json(r.to_json());
  CHECK(back.iteration == r.iteration);
  CHECK(back.batch_ids == r.batch_ids);
  CHECK(back.values == r.values);
  CHECK(back.selection == r.selection);
  CHECK(back.reward == r.reward);
  CHECK(back.log_prob == r.log_prob);
  CHECK(back.qa_loss == r.qa_loss);
}

TEST_CASE("zero outer iterations return the estimator unchanged") {
  RlFixture fx(37);
  fx.cfg.outer_iterations = 0;
  std::string before = fx.est.serialize();
  RlTrainResult res = train_qve_rl(fx.est, fx.reader, fx.sbx.synthetic,
                                   fx.sbx.annotated, fx.cfg);
  CHECK(fx.est.serialize() == before);
  CHECK(res.rounds.empty());
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto run = [](uint64_t seed) {
    RlFixture fx(39);
    fx.cfg.seed = seed;
    return train_qve_rl(fx.est, fx.reader, fx.sbx.synthetic, fx.sbx.annotated, fx.cfg);
  };
  RlTrainResult a = run(5), b = run(5), c = run(6);
  REQUIRE(a.rounds.size() == b.rounds.size());
  for (size_t i = 0; i < a.rounds.size(); ++i) {
    CHECK(a.rounds[i].reward == b.rounds[i].reward);
    CHECK(a.rounds[i].values == b.rounds[i].values);
    CHECK(a.rounds[i].selection == b.rounds[i].selection);
  }
  CHECK(a.best_head_blob == b.best_head_blob);

  bool all_equal = a.rounds.size() == c.rounds.size();
  if (all_equal)
    for (size_t i = 0; i < a.rounds.size(); ++i)
      all_equal = all_equal && a.rounds[i].selection == c.rounds[i].selection;
  CHECK_FALSE(all_equal);
}

TEST_CASE("interrupted training resumes to the identical result") {
  qve::test::TempDir tmp("rl_resume");
  std::string run_dir = tmp.file("run");

  RlFixture base(41);
  std::string whole;
  {
    RlFixture fx(41);
    fx.cfg.outer_iterations = 10;
    RlTrainResult res =
        train_qve_rl(fx.est, fx.reader, fx.sbx.synthetic, fx.sbx.annotated, fx.cfg);
    whole = fx.est.serialize();
    REQUIRE(res.rounds.size() == 10);
  }

  RlFixture fx(41);
  fx.cfg.outer_iterations = 5;
  train_qve_rl(fx.est, fx.reader, fx.sbx.synthetic, fx.sbx.annotated, fx.cfg, run_dir);
  RlFixture fx2(41);
  fx2.cfg.outer_iterations = 10;
  RlTrainResult resumed = train_qve_rl(fx2.est, fx2.reader, fx2.sbx.synthetic,
                                       fx2.sbx.annotated, fx2.cfg, run_dir);
  REQUIRE(resumed.rounds.size() == 10);
  CHECK(fx2.est.serialize() == whole);

  // the on-disk log holds one line per completed round
  std::istringstream log(read_file(run_dir + "/log/rl_rounds.jsonl"));
  size_t lines = 0;
  std::string line;
  while (std::getline(log, line))
    if (!line.empty()) ++lines;
  CHECK(lines == 10);
}

TEST_CASE("reward ignores unselected batch content") {
  // two readers; the same masked update where the masked-out rows differ
  CorpusSplit split = qve::test::tiny_split();
  SandboxCorpus extra = generate_sandbox(4, {0.0, 0.0}, 77);

  ToyReader a(512, 9), b(512, 9);
  std::vector<BatchItem> batch_a = {make_batch(split)[0], make_batch(extra.annotated)[0]};
  std::vector<BatchItem> batch_b = {make_batch(split)[0], make_batch(extra.annotated)[1]};
  std::vector<int> mask{1, 0};
  qa_weighted_update(a, batch_a, mask, 0.4);
  qa_weighted_update(b, batch_b, mask, 0.4);
  CHECK(a.snapshot().same_params(b.snapshot()));
}
