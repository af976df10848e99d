#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "triphase/corpus.hpp"

namespace triphase::noise {

using Rng = std::mt19937_64;

enum class CorruptionMode { kDelete, kMask };

CorruptionMode parse_mode(const std::string& name);
std::string mode_name(CorruptionMode mode);

struct CorruptionConfig {
  double ratio = 0.6;
  CorruptionMode mode = CorruptionMode::kDelete;
  std::set<corpus::TokenId> protect{corpus::special::kPad, corpus::special::kBos, corpus::special::kEos};

  void validate() const;
};

/// Corrupts each unprotected token independently with probability `ratio`.
/// In delete mode at least one token is kept: if every token would be removed, one of them is restored.
std::vector<corpus::TokenId> corrupt_tokens(std::span<const corpus::TokenId> tokens, const CorruptionConfig& cfg,
                                            Rng& rng);

struct StopwordNoiseConfig {
  std::unordered_set<std::string> stopwords;
  std::size_t min_length = 8;
  double delete_frac = 0.5;

  void validate() const;
};

/// Bundled English stop-word list.
const std::vector<std::string>& default_stopwords();
/// One token per line; blank lines ignored.
std::unordered_set<std::string> load_stopwords(const std::filesystem::path& path);
StopwordNoiseConfig default_stopword_noise();

/// Sequences shorter than `min_length` pass through untouched; otherwise each stop-word is dropped
/// with probability `delete_frac`.
std::vector<std::string> delete_stopwords(std::span<const std::string> tokens, const StopwordNoiseConfig& cfg,
                                          Rng& rng);

}  // namespace triphase::noise
