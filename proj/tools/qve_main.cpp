// qve: data-valuation toolkit for synthetic QA selection.
//
// Subcommands: run, sweep, report, filter, train-rl, sandbox.

#include <CLI11.hpp>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "qve/pipeline.hpp"
#include "qve/prepare.hpp"
#include "qve/sandbox.hpp"

namespace fs = std::filesystem;

namespace {

std::vector<double> parse_values(const std::string& csv) {
  std::vector<double> vals;
  std::string cur;
  for (char c : csv) {
    if (c == ',') {
      if (!cur.empty()) vals.push_back(std::stod(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) vals.push_back(std::stod(cur));
  return vals;
}

int cmd_run(const std::string& config_path, const std::string& run_id_override,
            bool all_seeds) {
  qve::ExperimentConfig cfg = qve::load_experiment_config(config_path);
  if (!run_id_override.empty()) cfg.run_id = run_id_override;
  std::vector<qve::RunRecord> records;
  std::vector<uint64_t> seeds = all_seeds ? cfg.seeds
                                          : std::vector<uint64_t>{cfg.seeds.at(0)};
  for (uint64_t seed : seeds) {
    std::cout << "running " << cfg.run_id << " (seed " << seed << ", method "
              << qve::to_string(cfg.method) << ")\n";
    records.push_back(qve::run_experiment(cfg, seed));
    const auto& r = records.back();
    std::cout << "  final EM " << r.final_eval.em << "  F1 " << r.final_eval.f1 << "\n";
  }
  auto table = qve::report(records);
  std::cout << table.text;
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& axis_name,
              const std::string& values_csv) {
  qve::ExperimentConfig cfg = qve::load_experiment_config(config_path);
  qve::SweepAxis axis;
  if (axis_name == "n" || axis_name == "n_annotations")
    axis = qve::SweepAxis::n_annotations;
  else if (axis_name == "k" || axis_name == "k_percent")
    axis = qve::SweepAxis::k_percent;
  else {
    std::cerr << "unknown sweep axis: " << axis_name << "\n";
    return 2;
  }
  auto result = qve::sweep(cfg, axis, parse_values(values_csv));
  for (const auto& f : result.failures) std::cerr << "FAILED " << f << "\n";
  std::cout << result.table.text;
  fs::create_directories(cfg.runs_root);
  std::string base = cfg.runs_root + "/sweep_" + axis_name + "_" + cfg.run_id;
  qve::write_file(base + ".csv", result.table.csv);
  qve::write_file(base + ".txt", result.table.text);
  std::cout << "wrote " << base << ".csv\n";
  return result.failures.empty() ? 0 : 1;
}

int cmd_report(const std::vector<std::string>& paths, const std::string& csv_out) {
  std::vector<qve::RunRecord> records;
  for (const auto& p : paths) {
    std::string file = p;
    if (fs::is_directory(p)) file = p + "/report/record.json";
    records.push_back(
        qve::RunRecord::from_json(nlohmann::json::parse(qve::read_file(file))));
  }
  auto table = qve::report(records);
  std::cout << table.text;
  if (!csv_out.empty()) {
    qve::write_file(csv_out, table.csv);
    std::cout << "wrote " << csv_out << "\n";
  }
  return 0;
}

int cmd_filter(const std::string& config_path, const std::string& method_name,
               double k, const std::string& out_path, uint64_t seed) {
  qve::ExperimentConfig cfg = qve::load_experiment_config(config_path);
  qve::FilterMethod method = qve::filter_method_from_string(method_name);
  qve::PreparedInputs in = qve::prepare_inputs(cfg, seed);

  qve::FilterReport rep;
  switch (method) {
    case qve::FilterMethod::none:
      rep.method = method;
      rep.input_count = in.synthetic.size();
      for (const auto& ex : in.synthetic.examples) rep.kept_ids.push_back(ex.example_id);
      rep.kept_count = rep.kept_ids.size();
      break;
    case qve::FilterMethod::roundtrip:
      rep = qve::roundtrip_filter(*in.row2, in.synthetic);
      break;
    case qve::FilterMethod::lm:
      rep = qve::lm_filter(in.synthetic, k);
      break;
    default: {
      auto est = qve::train_estimator_for_method(cfg, method, in.synthetic,
                                                 in.annotations,
                                                 in.source.size() ? &in.source : nullptr,
                                                 *in.row2, seed);
      rep = qve::qve_filter(*est, in.synthetic, *in.row2, k, method);
      break;
    }
  }

  qve::CorpusSplit filtered = qve::apply_filter_report(in.synthetic, rep);
  qve::save_corpus(filtered, out_path);
  qve::write_file(out_path + ".filter_report.json", rep.to_json().dump(1));
  std::cout << qve::to_string(method) << ": kept " << rep.kept_count << " of "
            << rep.input_count << " -> " << out_path << "\n";
  return 0;
}

int cmd_train_rl(const std::string& config_path, const std::string& run_id,
                 uint64_t seed) {
  qve::ExperimentConfig cfg = qve::load_experiment_config(config_path);
  if (!run_id.empty()) cfg.run_id = run_id;
  qve::PreparedInputs in = qve::prepare_inputs(cfg, seed);

  std::string run_dir = cfg.runs_root + "/" + cfg.run_id + "_s" + std::to_string(seed);
  auto est = qve::train_estimator_for_method(cfg, qve::FilterMethod::qve_rl,
                                             in.synthetic, in.annotations,
                                             in.source.size() ? &in.source : nullptr,
                                             *in.row2, seed, run_dir);

  // score dump for the whole synthetic corpus
  std::string dump;
  for (const auto& s : qve::score_corpus(*est, in.synthetic, *in.row2)) {
    nlohmann::ordered_json j{{"example_id", s.example_id}, {"raw", s.raw},
                             {"prob", s.prob}};
    dump += j.dump();
    dump += "\n";
  }
  fs::create_directories(run_dir + "/qve");
  qve::write_file(run_dir + "/qve/scores.jsonl", dump);
  std::cout << "trained RL estimator over " << in.synthetic.size()
            << " synthetic examples; artifacts under " << run_dir << "\n";
  return 0;
}

int cmd_sandbox_generate(const std::string& out_dir, const std::string& noise_csv,
                         uint64_t seed, size_t source_contexts, size_t target_contexts,
                         size_t eval_contexts) {
  auto noise = parse_values(noise_csv);
  if (noise.size() != 2) {
    std::cerr << "--noise expects two comma-separated rates, e.g. 0.3,0.2\n";
    return 2;
  }
  qve::SandboxBundleOptions opt;
  opt.p_mismatch = noise[0];
  opt.p_trivial = noise[1];
  opt.seed = seed;
  opt.source_contexts = source_contexts;
  opt.target_contexts = target_contexts;
  opt.eval_contexts = eval_contexts;
  qve::SandboxBundle bundle = qve::generate_sandbox_bundle(opt);
  qve::write_sandbox_bundle(bundle, out_dir);

  size_t clean = 0, mism = 0, triv = 0;
  for (const auto& [id, q] : bundle.labels) {
    if (q == qve::Quality::clean) ++clean;
    else if (q == qve::Quality::mismatched) ++mism;
    else ++triv;
  }
  std::cout << "sandbox written to " << out_dir << "\n"
            << "  source " << bundle.source.size() << ", target pool "
            << bundle.target_train.size() << ", synthetic " << bundle.synthetic.size()
            << " (clean " << clean << ", mismatched " << mism << ", trivial " << triv
            << "), eval " << bundle.target_eval.size() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qve: estimate synthetic question values and select training data"};
  app.require_subcommand(1);

  std::string config_path, run_id, axis, values_csv, csv_out, out_path, method;
  std::vector<std::string> record_paths;
  std::string noise_csv = "0.3,0.2";
  double k = 60.0;
  uint64_t seed = 7;
  size_t source_contexts = 150, target_contexts = 200, eval_contexts = 120;
  bool all_seeds = false;

  auto* run = app.add_subcommand("run", "run a configured experiment");
  run->add_option("--config", config_path, "config file (yaml or json)")->required();
  run->add_option("--run-id", run_id, "override the config run id");
  run->add_flag("--all-seeds", all_seeds, "run every seed listed in the config");

  auto* sw = app.add_subcommand("sweep", "run one experiment per axis value");
  sw->add_option("--config", config_path)->required();
  sw->add_option("--axis", axis, "n|k")->required();
  sw->add_option("--values", values_csv, "comma-separated values")->required();

  auto* rep = app.add_subcommand("report", "tabulate run records");
  rep->add_option("records", record_paths, "record.json files or run directories")
      ->required();
  rep->add_option("--csv", csv_out, "also write the table as csv");

  auto* flt = app.add_subcommand("filter", "filter a synthetic corpus");
  flt->add_option("--config", config_path)->required();
  flt->add_option("--method", method, "none|roundtrip|lm|qve-binary|qve-rank|qve-rl")
      ->required();
  flt->add_option("--k", k, "top-K percent for score-based methods");
  flt->add_option("--out", out_path, "output corpus path")->required();
  flt->add_option("--seed", seed);

  auto* trl = app.add_subcommand("train-rl", "train the RL estimator only");
  trl->add_option("--config", config_path)->required();
  trl->add_option("--run-id", run_id);
  trl->add_option("--seed", seed);

  auto* sbx = app.add_subcommand("sandbox", "sandbox utilities");
  auto* gen = sbx->add_subcommand("generate", "generate a sandbox bundle");
  gen->add_option("--out", out_path)->required();
  gen->add_option("--noise", noise_csv, "p_mismatch,p_trivial");
  gen->add_option("--seed", seed);
  gen->add_option("--source-contexts", source_contexts);
  gen->add_option("--target-contexts", target_contexts);
  gen->add_option("--eval-contexts", eval_contexts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, run_id, all_seeds);
    if (*sw) return cmd_sweep(config_path, axis, values_csv);
    if (*rep) return cmd_report(record_paths, csv_out);
    if (*flt) return cmd_filter(config_path, method, k, out_path, seed);
    if (*trl) return cmd_train_rl(config_path, run_id, seed);
    if (*gen) return cmd_sandbox_generate(out_path, noise_csv, seed, source_contexts,
                                          target_contexts, eval_contexts);
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
