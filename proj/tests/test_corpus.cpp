#include <catch2/catch_amalgamated.hpp>

#include "qve/corpus.hpp"
#include "qve/util.hpp"
#include "test_support.hpp"

using namespace qve;
using qve::test::TempDir;

namespace {

const char* kSquadDoc = R"({
  "version": "1.1",
  "data": [{
    "title": "demo",
    "paragraphs": [{
      "context": "the capital of france is paris .",
      "qas": [{
        "id": "d0",
        "question": "what is the capital of france ?",
        "answers": [{"text": "paris", "answer_start": 25}]
      }]
    }]
  }]
})";

const char* kMrqaDoc =
    "{\"header\": {\"dataset\": \"demo\"}}\n"
    "{\"id\": \"m_ctx0\", \"context\": \"the color of mars is red .\", \"qas\": ["
    "{\"qid\": \"m0\", \"question\": \"what is the color of mars ?\","
    " \"answers\": [\"red\", \"crimson\"],"
    " \"detected_answers\": [{\"text\": \"red\", \"char_spans\": [[21, 23]]}]}]}\n";

}  // namespace

TEST_CASE("squad json loads and satisfies span alignment") {
  TempDir tmp("corpus_squad");
  write_file(tmp.file("a.json"), kSquadDoc);
  CorpusSplit split = load_corpus(tmp.file("a.json"), CorpusFormat::squad_json);
  REQUIRE(split.size() == 1);
  const auto& ex = split.examples[0];
  CHECK(ex.question == "what is the capital of france ?");
  CHECK(ex.answer.text == "paris");
  CHECK(split.context_of(ex).text.substr(ex.answer.char_start,
                                         ex.answer.char_end - ex.answer.char_start) ==
        "paris");
  CHECK(ex.origin == Origin::annotated);
  CHECK_FALSE(ex.gen_loglik.has_value());
}

TEST_CASE("misaligned answer text is rejected with the record id") {
  TempDir tmp("corpus_bad");
  std::string doc = kSquadDoc;
  auto pos = doc.find("\"answer_start\": 25");
  doc.replace(pos, 18, "\"answer_start\": 3");
  write_file(tmp.file("bad.json"), doc);
  try {
    load_corpus(tmp.file("bad.json"), CorpusFormat::squad_json);
    FAIL("expected MalformedRecord");
  } catch (const MalformedRecord& e) {
    CHECK(std::string(e.what()).find("d0") != std::string::npos);
  }
}

TEST_CASE("gzipped paths and bad shapes are unsupported") {
  TempDir tmp("corpus_gz");
  write_file(tmp.file("a.json.gz"), "x");
  CHECK_THROWS_AS(load_corpus(tmp.file("a.json.gz"), CorpusFormat::squad_json),
                  UnsupportedFormat);
  write_file(tmp.file("flat.json"), "{\"notdata\": []}");
  CHECK_THROWS_AS(load_corpus(tmp.file("flat.json"), CorpusFormat::squad_json),
                  UnsupportedFormat);
}

TEST_CASE("mrqa jsonl: header skipped, inclusive spans widened, alt answers kept") {
  TempDir tmp("corpus_mrqa");
  write_file(tmp.file("m.jsonl"), kMrqaDoc);
  CorpusSplit split = load_corpus(tmp.file("m.jsonl"), CorpusFormat::mrqa_jsonl);
  REQUIRE(split.size() == 1);
  const auto& ex = split.examples[0];
  CHECK(ex.answer.char_start == 21);
  CHECK(ex.answer.char_end == 24);
  CHECK(ex.answer.text == "red");
  REQUIRE(ex.alt_answers.size() == 1);
  CHECK(ex.alt_answers[0] == "crimson");
}

TEST_CASE("serialize/load round-trip is canonical") {
  CorpusSplit split = qve::test::tiny_split();
  TempDir tmp("corpus_rt");
  save_corpus(split, tmp.file("rt.json"));
  CorpusSplit again = load_corpus(tmp.file("rt.json"), CorpusFormat::squad_json);
  REQUIRE(again.size() == split.size());
  for (size_t i = 0; i < split.size(); ++i) {
    CHECK(again.examples[i].example_id == split.examples[i].example_id);
    CHECK(again.examples[i].question == split.examples[i].question);
    CHECK(again.examples[i].answer.char_start == split.examples[i].answer.char_start);
  }
  // fixpoint: a second round-trip yields the identical file
  save_corpus(again, tmp.file("rt2.json"));
  CHECK(read_file(tmp.file("rt.json")) == read_file(tmp.file("rt2.json")));
}

TEST_CASE("synthetic round-trip keeps gen_loglik and origin") {
  CorpusSplit split = qve::test::tiny_split(SplitName::target_synthetic);
  for (auto& ex : split.examples) {
    ex.origin = Origin::synthetic;
    ex.gen_loglik = -1.25;
  }
  TempDir tmp("corpus_syn");
  save_corpus(split, tmp.file("syn.json"));
  CorpusSplit again = load_corpus(tmp.file("syn.json"), CorpusFormat::squad_json);
  CHECK(again.examples[0].origin == Origin::synthetic);
  CHECK(again.examples[0].gen_loglik.value() == -1.25);
}

TEST_CASE("gen_loglik presence must match origin") {
  CorpusSplit split = qve::test::tiny_split();
  split.examples[0].gen_loglik = -0.5;  // annotated with loglik
  CHECK_THROWS_AS(validate_split(split), MalformedRecord);
  split.examples[0].gen_loglik.reset();
  split.examples[0].origin = Origin::synthetic;  // synthetic without loglik
  CHECK_THROWS_AS(validate_split(split), MalformedRecord);
}

TEST_CASE("random corpora survive the save/load round trip") {
  Rng rng(99);
  for (int trial = 0; trial < 10; ++trial) {
    CorpusSplit split;
    split.name = SplitName::target_annotated;
    size_t n_ctx = 1 + rng.uniform_int(4);
    for (size_t c = 0; c < n_ctx; ++c) {
      Context ctx;
      ctx.id = "c" + std::to_string(c);
      size_t n_words = 4 + rng.uniform_int(10);
      for (size_t w = 0; w < n_words; ++w) {
        ctx.text += "w" + std::to_string(rng.uniform_int(30));
        if (w + 1 < n_words) ctx.text += " ";
      }
      split.contexts.push_back(ctx);
      // one QA per context over a random token
      size_t start = ctx.text.find(' ') == std::string::npos
                         ? 0
                         : rng.uniform_int(ctx.text.size() / 2);
      while (start < ctx.text.size() && ctx.text[start] == ' ') ++start;
      size_t end = ctx.text.find(' ', start);
      if (end == std::string::npos) end = ctx.text.size();
      QAExample ex;
      ex.context_ref = ctx.id;
      ex.example_id = "e" + std::to_string(c);
      ex.question = "which token q" + std::to_string(trial) + " ?";
      ex.answer = {ctx.text.substr(start, end - start), start, end};
      split.examples.push_back(ex);
    }
    split.rebuild_index();
    validate_split(split);

    TempDir tmp("corpus_prop");
    save_corpus(split, tmp.file("p.json"));
    CorpusSplit again = load_corpus(tmp.file("p.json"), CorpusFormat::squad_json);
    REQUIRE(again.size() == split.size());
    for (size_t i = 0; i < split.size(); ++i) {
      CHECK(again.examples[i].answer.text == split.examples[i].answer.text);
      CHECK(again.examples[i].answer.char_start == split.examples[i].answer.char_start);
    }
  }
}

TEST_CASE("subsample draws exactly n, deterministically, order preserved") {
  CorpusSplit split;
  split.name = SplitName::target_annotated;
  Context ctx;
  ctx.id = "c";
  ctx.text = "alpha beta gamma delta";
  split.contexts.push_back(ctx);
  for (int i = 0; i < 50; ++i) {
    QAExample ex;
    ex.context_ref = "c";
    ex.example_id = "e" + std::to_string(i);
    ex.question = "q?";
    ex.answer = {"alpha", 0, 5};
    split.examples.push_back(ex);
  }
  split.rebuild_index();

  SECTION("identity when n equals the split size") {
    CorpusSplit out = subsample_annotations(split, 50, 1);
    REQUIRE(out.size() == 50);
    for (size_t i = 0; i < 50; ++i)
      CHECK(out.examples[i].example_id == split.examples[i].example_id);
  }
  SECTION("n too large") {
    CHECK_THROWS_AS(subsample_annotations(split, 51, 1), NTooLarge);
  }
  SECTION("deterministic and order-preserving") {
    CorpusSplit a = subsample_annotations(split, 20, 7);
    CorpusSplit b = subsample_annotations(split, 20, 7);
    REQUIRE(a.size() == 20);
    for (size_t i = 0; i < 20; ++i)
      CHECK(a.examples[i].example_id == b.examples[i].example_id);
    // relative order matches the parent split
    size_t last = 0;
    for (const auto& ex : a.examples) {
      size_t idx = split.example_index(ex.example_id);
      CHECK(idx >= last);
      last = idx;
    }
    CorpusSplit c = subsample_annotations(split, 20, 8);
    bool all_same = true;
    for (size_t i = 0; i < 20; ++i)
      all_same &= c.examples[i].example_id == a.examples[i].example_id;
    CHECK_FALSE(all_same);
  }
}

TEST_CASE("source split partitions at context level") {
  CorpusSplit split;
  split.name = SplitName::source_train;
  for (int c = 0; c < 10; ++c) {
    Context ctx;
    ctx.id = "c" + std::to_string(c);
    ctx.text = "token zero one two three";
    split.contexts.push_back(ctx);
    for (int q = 0; q < 3; ++q) {
      QAExample ex;
      ex.context_ref = ctx.id;
      ex.example_id = "e" + std::to_string(c) + "_" + std::to_string(q);
      ex.question = "which token ?";
      ex.answer = {"token", 0, 5};
      split.examples.push_back(ex);
    }
  }
  split.rebuild_index();

  auto [a, b] = split_source_for_classifier(split, 0.7, 3);
  CHECK(a.contexts.size() == 7);
  CHECK(b.contexts.size() == 3);
  CHECK(a.size() + b.size() == split.size());

  // disjoint and exhaustive at context level
  for (const auto& ctx : a.contexts) CHECK_FALSE(b.has_context(ctx.id));
  for (const auto& ex : a.examples) CHECK(a.has_context(ex.context_ref));
  for (const auto& ex : b.examples) CHECK(b.has_context(ex.context_ref));

  auto [a2, b2] = split_source_for_classifier(split, 0.7, 3);
  CHECK(a2.contexts.size() == a.contexts.size());
  for (size_t i = 0; i < a.contexts.size(); ++i)
    CHECK(a2.contexts[i].id == a.contexts[i].id);

  CHECK_THROWS_AS(split_source_for_classifier(split, 1.5, 3), Error);
}
