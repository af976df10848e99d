#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "triphase/corpus.hpp"
#include "triphase/noise.hpp"

namespace triphase::balance {

/// Resampling ratio for a class of size `x` relative to the largest class:
/// log(max_k / x) * max_ratio / log(max_k). Equals max_ratio at x = 1 and 0 at x = max_k.
double ratio_function(double x, double max_k, double max_ratio);

/// The class size at which ratio_function crosses 1.
double unit_ratio_size(double max_k, double max_ratio);

struct BalancePlan {
  std::map<std::string, std::size_t> class_sizes;
  std::size_t max_k = 0;
  double min_ratio = 1.5;
  double max_ratio = 4.0;
  std::map<std::string, double> ratios;
  std::map<std::string, std::size_t> targets;

  /// max/min over a count map.
  static double imbalance(const std::map<std::string, std::size_t>& counts);
  nlohmann::json to_json() const;
};

/// Ratios are ratio_function clamped to [min_ratio, max_ratio]; targets are ratio * size rounded half-up.
BalancePlan plan_balance(const std::map<std::string, std::size_t>& class_sizes, double min_ratio = 1.5,
                         double max_ratio = 4.0);

/// Keeps the originals and fills up to `target` with stop-word-noised copies taken round-robin
/// over a shuffled order of the originals.
std::vector<corpus::Example> augment_class(std::span<const corpus::Example> originals, std::size_t target,
                                           const noise::StopwordNoiseConfig& noiser, noise::Rng& rng);

/// Applies a plan to a whole split. Examples must carry tokens; copies are re-tokenized with `vocab`.
std::vector<corpus::Example> apply_plan(const corpus::Dataset& ds, const BalancePlan& plan,
                                        const noise::StopwordNoiseConfig& noiser, noise::Rng& rng);

std::map<std::string, std::size_t> class_sizes(const corpus::Dataset& ds);

/// Fraction of matching leading levels between two label paths.
double similarity_label(const corpus::LabelPath& u, const corpus::LabelPath& v, std::size_t levels);

struct LabeledPair {
  std::size_t left = 0;  // indices into the example list the pairs were made from
  std::size_t right = 0;
  double similarity = 0.0;
  bool left_augmented = false;
  bool right_augmented = false;
};

struct PairConfig {
  std::optional<std::size_t> max_pairs;
  /// Shuffle-and-zip passes are repeated until this many pairs exist (default: the example count).
  std::optional<std::size_t> target_pairs;
  std::size_t max_passes = 8;
};

/// Duplicates the list, shuffles both copies independently and zips them positionally.
/// Self-pairs and unordered duplicates (also across passes) are dropped.
std::vector<LabeledPair> make_pairs(std::span<const corpus::Example> examples, std::size_t levels, noise::Rng& rng,
                                    const PairConfig& cfg = {});

/// JSONL {"left_id", "right_id", "similarity"} per line.
void write_pairs_jsonl(std::ostream& os, std::span<const corpus::Example> examples,
                       std::span<const LabeledPair> pairs);

}  // namespace triphase::balance
