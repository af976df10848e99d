#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "triphase/balance.hpp"
#include "triphase/corpus.hpp"
#include "triphase/metrics.hpp"
#include "triphase/model.hpp"
#include "triphase/noise.hpp"

namespace triphase::train {

enum class Variant { kThreePhase, kJoint, kDaeFt, kClFt, kExtraImb, kNoImb, kFt };

Variant parse_variant(std::string_view name);
std::string variant_name(Variant v);
/// Column order of the ablation table.
const std::vector<Variant>& ablation_order();

/// Every knob of a run. JSON keys match the field names.
struct TrainConfig {
  // Phases 1 and 2 share a learning rate unless learning_rate_cl is set explicitly.
  double learning_rate_dae = 1e-3;
  double learning_rate_cl = 1e-3;
  double learning_rate_ft = 1e-3;
  std::size_t epochs_dae = 3;
  std::size_t epochs_cl = 3;
  std::size_t epochs_joint = 3;
  std::size_t max_epochs_ft = 20;
  std::size_t patience_ft = 5;
  std::size_t batch_size_dae = 16;
  std::size_t batch_size_cl = 16;
  std::size_t batch_size_ft = 16;
  double eps_dae = 1e-6;
  double eps_cl = 1e-6;
  double eps_ft = 2e-5;
  double weight_decay = 0.0;
  double max_grad_norm = 1.0;
  std::size_t use_length = 0;  // 0: estimate from the training split
  bool freeze_encoder = false;

  double deleting_ratio = 0.6;
  std::string corruption_mode = "delete";
  std::size_t dae_repeat = 1;

  double min_ratio = 1.5;
  double max_ratio = 4.0;
  std::size_t stopword_min_length = 8;
  double stopword_delete_frac = 0.5;
  std::string stopwords_file;
  double pair_factor = 1.0;    // target pair count = pair_factor * balanced example count
  std::size_t max_pairs = 0;   // 0: no cap
  std::size_t pair_passes = 8;

  double joint_weight_dae = 1.0;
  double joint_weight_cl = 1.0;

  model::ModelConfig model;  // vocab_size is filled from the data
  std::size_t max_vocab = 8000;

  double val_frac = 0.2;
  double test_frac = 0.2;
  std::uint64_t split_seed = 1234;

  void validate() const;
  nlohmann::json to_json() const;
  /// Unknown keys are rejected. learning_rate_cl defaults to learning_rate_dae when absent.
  static TrainConfig from_json(const nlohmann::json& j);
  /// Applies "key=value" from the command line on top of `base`.
  static TrainConfig with_overrides(const TrainConfig& base, const std::vector<std::string>& assignments);

  noise::CorruptionConfig corruption() const;
  noise::StopwordNoiseConfig stopword_noise() const;
};

/// The held-out split. Reads are counted; reading before unlock() is a phase-isolation violation.
class GuardedSplit {
 public:
  GuardedSplit() = default;
  explicit GuardedSplit(corpus::Dataset ds) : data_(std::move(ds)) {}

  const corpus::Dataset& read(std::string_view phase);
  void unlock() { locked_ = false; }
  bool locked() const { return locked_; }
  std::size_t reads() const { return reads_; }
  std::size_t premature_reads() const { return premature_reads_; }
  std::size_t size() const { return data_.size(); }

 private:
  corpus::Dataset data_;
  bool locked_ = true;
  std::size_t reads_ = 0;
  std::size_t premature_reads_ = 0;
};

struct PreparedData {
  corpus::Dataset train;
  corpus::Dataset val;
  GuardedSplit test;
  corpus::Dataset unlabelled;  // phase-1 only
  corpus::LabelSpace labels;
  corpus::Vocab vocab;
  std::size_t truncation_length = 0;
  std::vector<std::string> warnings;
  nlohmann::json stats;
};

/// Split, build the vocabulary on the training split plus any unlabelled texts, tokenize everything and
/// fix the truncation length.
PreparedData prepare_data(const corpus::Dataset& raw, const TrainConfig& cfg,
                          const corpus::Dataset* unlabelled = nullptr);

struct PhaseRecord {
  std::string phase;
  std::string metric;
  bool higher_is_better = false;
  std::vector<double> val_curve;    // index 0 is the untrained model for the representation phases
  std::vector<double> train_curve;  // mean training loss per epoch
  std::size_t best_epoch = 0;
  double best_value = 0.0;
  std::size_t epochs_run = 0;
  bool stopped_early = false;
  std::string checkpoint_path;
  std::string checkpoint_hash;
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const;
};

struct PhaseContext {
  std::uint64_t seed = 0;
  std::size_t truncation_length = 32;
  std::ostream* log = nullptr;
  std::optional<std::filesystem::path> checkpoint_dir;
};

struct RepresentationResult {
  model::EncoderBundle best;
  PhaseRecord record;
};

/// Denoising reconstruction through the bottleneck; noise is redrawn every step. Returns the encoder
/// (decoder discarded) with the lowest validation reconstruction loss.
RepresentationResult train_dae(const TrainConfig& cfg, const corpus::Dataset& train, const corpus::Dataset& val,
                               model::EncoderBundle bundle, model::DecoderBundle decoder, const PhaseContext& ctx);

struct PairingOptions {
  bool balance = true;
  double min_ratio = 1.5;
  double max_ratio = 4.0;
};

/// Pairs from the train split (balanced per `opts`) plus validation pairs from the raw val split.
struct PairSets {
  std::vector<corpus::Example> train_examples;
  std::vector<balance::LabeledPair> train_pairs;
  std::vector<balance::LabeledPair> val_pairs;
  std::optional<balance::BalancePlan> plan;
};
PairSets build_pairs(const TrainConfig& cfg, const corpus::Dataset& train, const corpus::Dataset& val,
                     const PairingOptions& opts, std::uint64_t seed);

/// Siamese cosine-similarity training with a projection layer attached on top of the bottleneck.
RepresentationResult train_cl(const TrainConfig& cfg, const corpus::Dataset& train, const corpus::Dataset& val,
                              model::EncoderBundle bundle, const PairingOptions& opts, const PhaseContext& ctx);

/// Single optimization of the weighted sum of reconstruction and pair losses.
RepresentationResult train_joint(const TrainConfig& cfg, const corpus::Dataset& train, const corpus::Dataset& val,
                                 model::EncoderBundle bundle, model::DecoderBundle decoder,
                                 const PairingOptions& opts, const PhaseContext& ctx);

struct FineTuneResult {
  model::Classifier best;
  PhaseRecord record;
  metrics::MetricsReport val_metrics;
  metrics::MetricsReport test_metrics;
};

/// Cross-entropy fine-tuning with patience-based early stopping on validation accuracy.
/// The test split is unlocked and read exactly once, after model selection.
FineTuneResult train_ft(const TrainConfig& cfg, const corpus::Dataset& train, const corpus::Dataset& val,
                        GuardedSplit& test, const corpus::LabelSpace& labels, model::EncoderBundle bundle,
                        const PhaseContext& ctx);

/// Features come from any external encoder, which stays fixed; only the head is trained.
struct HeadResult {
  model::ClassifierHead head;
  PhaseRecord record;
  metrics::MetricsReport test_metrics;
};
HeadResult train_head_on_encoder(const TrainConfig& cfg, const model::TextEncoder& encoder,
                                 const corpus::Dataset& train, const corpus::Dataset& val, GuardedSplit& test,
                                 const corpus::LabelSpace& labels, const PhaseContext& ctx);

metrics::MetricsReport evaluate_classifier(const model::Classifier& clf, const corpus::Dataset& ds,
                                           const corpus::LabelSpace& labels, std::size_t truncation_length);

struct RunManifest {
  std::string variant;
  std::uint64_t seed = 0;
  std::string status = "incomplete";  // incomplete | complete | failed
  std::string note;
  nlohmann::json config;
  std::vector<PhaseRecord> phases;
  std::optional<metrics::MetricsReport> val_metrics;
  std::optional<metrics::MetricsReport> test_metrics;
  std::vector<std::string> class_names;
  nlohmann::json balance = nullptr;  // plan used by the pair generator, if any
  std::size_t truncation_length = 0;
  std::size_t test_reads = 0;
  std::size_t test_reads_before_ft = 0;
  nlohmann::json data_stats;
  std::vector<std::string> warnings;
  nlohmann::json timestamps = nlohmann::json::object();

  /// Everything except timestamps.
  nlohmann::json content_json() const;
  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  /// Hash of content_json().
  std::string content_hash() const;
};

struct RunOptions {
  std::ostream* log = nullptr;
  std::optional<std::filesystem::path> output_dir;  // checkpoints are written here when set
  std::function<void(const RunManifest&)> on_progress;
  const corpus::Dataset* unlabelled = nullptr;  // extra texts for the DAE phase
};

/// Runs the phases of `v` on `raw` and returns the manifest. Training failures are reported in the
/// manifest (status "failed") rather than thrown.
RunManifest run_variant(Variant v, const TrainConfig& cfg, const corpus::Dataset& raw, std::uint64_t seed,
                        const RunOptions& opts = {});

/// Derives an independent stream seed from a base seed and a tag.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag);

}  // namespace triphase::train
