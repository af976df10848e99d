#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "triphase/corpus.hpp"

namespace triphase::synthetic {

/// Bag-of-indicator corpus. Each class owns `indicators_per_class` tokens; every position draws
/// an indicator of its class with probability `signal_strength`, otherwise a background token.
struct SyntheticSpec {
  std::vector<std::size_t> sizes;  // one entry per class
  std::size_t vocab_size = 2000;   // indicators plus background fillers
  double signal_strength = 0.35;
  std::size_t levels = 1;          // 2 groups classes pairwise under a parent label
  std::uint64_t seed = 7;
  std::size_t indicators_per_class = 8;
  std::size_t min_length = 8;
  std::size_t max_length = 16;
  double stopword_rate = 0.3;      // share of background positions that are stop-words

  void validate() const;
  nlohmann::json to_json() const;
  /// Accepts "n_classes" with a single "size" as shorthand for equal sizes.
  static SyntheticSpec from_json(const nlohmann::json& j);
};

std::vector<corpus::Example> generate(const SyntheticSpec& spec);
corpus::Dataset gen_synthetic(const SyntheticSpec& spec);

/// Name of class k, e.g. "c0"; its parent is "g0" for classes 0 and 1 when levels == 2.
std::string class_name(std::size_t k);

}  // namespace triphase::synthetic
