#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "triphase/corpus.hpp"
#include "triphase/errors.hpp"
#include "triphase/experiment.hpp"
#include "triphase/synthetic.hpp"
#include "triphase/train.hpp"

namespace fs = std::filesystem;
using namespace triphase;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

void emit(const experiment::Report& rep, bool as_json) {
  if (as_json) std::cout << rep.json.dump(2) << "\n";
  else std::cout << rep.text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Three-phase text classifier training: denoising adaptation, contrastive training, fine-tuning."};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "Train every (variant, seed) pair of an experiment file");
  std::string run_spec;
  std::vector<std::string> run_sets;
  std::vector<std::string> run_variants;
  std::vector<std::uint64_t> run_seeds;
  std::string run_output;
  bool run_force = false;
  bool run_quiet = false;
  std::size_t run_jobs = 1;
  run->add_option("spec", run_spec, "Experiment JSON file")->required()->check(CLI::ExistingFile);
  run->add_option("--set", run_sets, "Override a training key, key=value");
  run->add_option("--variants", run_variants, "Replace the variant list");
  run->add_option("--seeds", run_seeds, "Replace the seed list");
  run->add_option("--output", run_output, "Replace the output directory");
  run->add_flag("--force", run_force, "Overwrite existing run directories");
  run->add_option("--jobs", run_jobs, "Runs executed in parallel")->check(CLI::PositiveNumber);
  run->add_flag("--quiet", run_quiet, "No progress lines");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Median test metrics per variant over seeds");
  std::string ablate_spec;
  std::string ablate_dir;
  std::vector<std::string> ablate_variants;
  bool ablate_json = false;
  auto* ablate_spec_opt = ablate->add_option("--spec", ablate_spec, "Experiment JSON file")->check(CLI::ExistingFile);
  ablate->add_option("--dir", ablate_dir, "Output directory holding the runs")->excludes(ablate_spec_opt);
  ablate->add_option("--variants", ablate_variants, "Variants to tabulate (default: all seven or the experiment's list)");
  ablate->add_flag("--json", ablate_json, "Print JSON instead of text");

  // report
  auto* report = app.add_subcommand("report", "Per-class tables and confusion matrix of one run");
  std::string report_manifest;
  bool report_json = false;
  report->add_option("manifest", report_manifest, "manifest.json or its run directory")->required();
  report->add_flag("--json", report_json, "Print JSON instead of text");

  // gen-synth
  auto* gen = app.add_subcommand("gen-synth", "Write a synthetic JSONL corpus");
  synthetic::SyntheticSpec synth;
  std::size_t gen_classes = 0;
  std::size_t gen_size = 100;
  std::string gen_out;
  gen->add_option("--sizes", synth.sizes, "Examples per class");
  gen->add_option("--classes", gen_classes, "Number of classes (with --size)");
  gen->add_option("--size", gen_size, "Examples per class when --sizes is absent");
  gen->add_option("--vocab", synth.vocab_size, "Vocabulary size")->capture_default_str();
  gen->add_option("--signal", synth.signal_strength, "Indicator probability per position")->capture_default_str();
  gen->add_option("--levels", synth.levels, "Label hierarchy depth, 1 or 2")->capture_default_str();
  gen->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  gen->add_option("--indicators", synth.indicators_per_class, "Indicator tokens per class")->capture_default_str();
  gen->add_option("-o,--out", gen_out, "Output JSONL file")->required();

  // stats
  auto* stats = app.add_subcommand("stats", "Split statistics of a corpus");
  std::string stats_data;
  std::string stats_spec;
  std::vector<std::string> stats_sets;
  bool stats_json = false;
  auto* stats_data_opt = stats->add_option("--data", stats_data, "JSONL corpus")->check(CLI::ExistingFile);
  stats->add_option("--spec", stats_spec, "Experiment JSON file")->check(CLI::ExistingFile)->excludes(stats_data_opt);
  stats->add_option("--set", stats_sets, "Override a training key, key=value");
  stats->add_flag("--json", stats_json, "Print JSON instead of text");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) {
      auto spec = experiment::load_spec(run_spec, run_sets);
      if (!run_variants.empty()) {
        spec.variants.clear();
        for (const auto& v : run_variants) spec.variants.push_back(train::parse_variant(v));
      }
      if (!run_seeds.empty()) spec.seeds = run_seeds;
      if (!run_output.empty()) spec.output_dir = run_output;
      spec.validate();
      experiment::RunCommandOptions opts;
      opts.force = run_force;
      opts.jobs = run_jobs;
      opts.log = run_quiet ? nullptr : &std::cerr;
      const auto summary = experiment::cmd_run(spec, opts);
      std::cout << summary.manifests.size() << " runs written under " << summary.root.string() << "\n";
      if (summary.failed > 0) {
        std::cerr << summary.failed << " run(s) did not complete\n";
        return kRuntimeError;
      }
      return kOk;
    }
    if (*ablate) {
      fs::path root;
      std::vector<train::Variant> variants = train::ablation_order();
      if (!ablate_spec.empty()) {
        const auto spec = experiment::load_spec(ablate_spec);
        root = experiment::resolve_output(spec.output_dir);
        variants = spec.variants;
      } else if (!ablate_dir.empty()) {
        root = ablate_dir;
      } else {
        throw ConfigError("ablate needs --spec or --dir");
      }
      if (!ablate_variants.empty()) {
        variants.clear();
        for (const auto& v : ablate_variants) variants.push_back(train::parse_variant(v));
      }
      const auto rep = experiment::cmd_ablate(root, variants);
      experiment::write_text(root / "ablation.json", rep.json.dump(2) + "\n");
      experiment::write_text(root / "ablation.txt", rep.text);
      emit(rep, ablate_json);
      return kOk;
    }
    if (*report) {
      fs::path manifest = report_manifest;
      if (fs::is_directory(manifest)) manifest /= "manifest.json";
      if (!fs::exists(manifest)) throw ConfigError("no manifest at " + manifest.string());
      const auto rep = experiment::cmd_report(manifest);
      experiment::write_text(manifest.parent_path() / "report.json", rep.json.dump(2) + "\n");
      experiment::write_text(manifest.parent_path() / "report.txt", rep.text);
      emit(rep, report_json);
      return kOk;
    }
    if (*gen) {
      if (synth.sizes.empty()) {
        if (gen_classes == 0) throw ConfigError("gen-synth needs --sizes or --classes");
        synth.sizes.assign(gen_classes, gen_size);
      }
      const auto examples = synthetic::generate(synth);
      corpus::write_jsonl(gen_out, examples);
      std::cout << examples.size() << " examples written to " << gen_out << "\n";
      return kOk;
    }
    if (*stats) {
      train::TrainConfig cfg;
      corpus::Dataset raw, unlabelled;
      bool has_unlabelled = false;
      if (!stats_spec.empty()) {
        const auto spec = experiment::load_spec(stats_spec, stats_sets);
        cfg = spec.config;
        raw = experiment::load_corpus(spec);
        unlabelled = experiment::load_unlabelled(spec);
        has_unlabelled = spec.unlabelled.has_value();
      } else if (!stats_data.empty()) {
        cfg = train::TrainConfig::with_overrides(cfg, stats_sets);
        raw = corpus::load_dataset(stats_data);
      } else {
        throw ConfigError("stats needs --data or --spec");
      }
      emit(experiment::cmd_stats(raw, cfg, has_unlabelled ? &unlabelled : nullptr), stats_json);
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kConfigError;
  } catch (const SchemaError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kOk;
}
