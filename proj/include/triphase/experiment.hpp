#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "triphase/corpus.hpp"
#include "triphase/synthetic.hpp"
#include "triphase/train.hpp"

namespace triphase::experiment {

/// Environment variable that anchors relative output directories.
inline constexpr const char* kOutputRootEnv = "TRIPHASE_OUTPUT_ROOT";

/// One experiment file: data source, variants x seeds, training config, output location.
struct ExperimentSpec {
  std::optional<std::filesystem::path> dataset;
  std::optional<synthetic::SyntheticSpec> synthetic;
  std::optional<std::filesystem::path> unlabelled;  // JSONL texts used only by the DAE phase
  std::vector<train::Variant> variants;
  std::vector<std::uint64_t> seeds;
  train::TrainConfig config;
  std::filesystem::path output_dir = "runs";

  void validate() const;
  nlohmann::json to_json() const;
  /// Relative dataset paths are resolved against `base_dir`.
  static ExperimentSpec from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
};

/// Reads the file and applies "key=value" overrides to the training config.
ExperimentSpec load_spec(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

/// Relative paths go under $TRIPHASE_OUTPUT_ROOT when it is set.
std::filesystem::path resolve_output(const std::filesystem::path& p);

corpus::Dataset load_corpus(const ExperimentSpec& spec);
/// Empty when the experiment names no unlabelled file.
corpus::Dataset load_unlabelled(const ExperimentSpec& spec);

std::filesystem::path run_dir(const std::filesystem::path& root, train::Variant v, std::uint64_t seed);

void write_text(const std::filesystem::path& path, const std::string& content);
nlohmann::json read_json(const std::filesystem::path& path);

struct RunCommandOptions {
  bool force = false;
  std::size_t jobs = 1;
  std::ostream* log = nullptr;  // progress lines; per-run logs always go to run.log
};

struct RunSummary {
  std::filesystem::path root;
  std::vector<std::filesystem::path> manifests;
  std::size_t failed = 0;
};

/// Runs every (variant, seed) pair and writes <root>/<variant>/seed_<n>/{manifest.json,run.log,*.ckpt}.
/// A manifest is written as "incomplete" before training starts and updated after each phase.
RunSummary cmd_run(const ExperimentSpec& spec, const RunCommandOptions& opts = {});

struct Report {
  nlohmann::json json;
  std::string text;
};

double median(std::vector<double> values);

/// Median test metrics per variant over seeds, in the fixed ablation column order.
/// Variants without a complete manifest are listed as absent.
Report cmd_ablate(const std::filesystem::path& root, const std::vector<train::Variant>& variants);

/// Per-class precision/recall and F1 tables plus the confusion matrix of one run.
Report cmd_report(const std::filesystem::path& manifest_path);

/// Split statistics of a corpus under the given config.
Report cmd_stats(const corpus::Dataset& raw, const train::TrainConfig& cfg,
                const corpus::Dataset* unlabelled = nullptr);

}  // namespace triphase::experiment
