#pragma once

#include <filesystem>
#include <string>

#include "qve/corpus.hpp"

namespace qve::test {

// Fresh scratch directory per test run, removed on destruction.
struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("qve_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

// Minimal single-context corpus with explicit spans.
inline CorpusSplit tiny_split(SplitName name = SplitName::target_annotated) {
  CorpusSplit s;
  s.name = name;
  Context ctx;
  ctx.id = "c0";
  ctx.text = "the capital of france is paris . the color of mars is red .";
  s.contexts.push_back(ctx);
  QAExample a;
  a.context_ref = "c0";
  a.question = "what is the capital of france ?";
  a.answer = {"paris", 25, 30};
  a.example_id = "q0";
  s.examples.push_back(a);
  QAExample b;
  b.context_ref = "c0";
  b.question = "what is the color of mars ?";
  b.answer = {"red", 54, 57};
  b.example_id = "q1";
  s.examples.push_back(b);
  s.rebuild_index();
  validate_split(s);
  return s;
}

}  // namespace qve::test
