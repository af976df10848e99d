#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace triphase::corpus {

using TokenId = std::int32_t;
using LabelPath = std::vector<std::string>;

/// Reserved vocabulary ids. They always occupy the first slots.
namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kMask = 2;
inline constexpr TokenId kBos = 3;
inline constexpr TokenId kEos = 4;
inline constexpr TokenId kCount = 5;
}  // namespace special

struct Example {
  std::string id;
  std::string text;
  LabelPath label_path;
  std::vector<TokenId> tokens;  // filled by Vocab::tokenize_all
  bool augmented = false;
  std::string source_id;  // for augmented copies: id of the original
};

/// Lowercases and splits on whitespace; every punctuation character becomes its own token.
std::vector<std::string> split_words(std::string_view text);

class Vocab {
 public:
  Vocab();

  /// Builds from token frequencies; ties broken lexicographically. `max_size` includes reserved ids.
  static Vocab build(std::span<const Example> examples, std::size_t max_size);

  TokenId id_of(std::string_view token) const;
  const std::string& token_of(TokenId id) const;
  std::size_t size() const noexcept { return tokens_.size(); }
  bool contains(std::string_view token) const;

  std::vector<TokenId> encode(std::string_view text) const;
  void tokenize_all(std::vector<Example>& examples) const;

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);

 private:
  void add(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Sorted set of distinct label paths. Class ids are positions in this list.
class LabelSpace {
 public:
  LabelSpace() = default;
  explicit LabelSpace(std::span<const Example> examples);

  std::size_t size() const noexcept { return paths_.size(); }
  std::size_t levels() const noexcept { return paths_.empty() ? 0 : paths_.front().size(); }
  std::size_t class_of(const LabelPath& path) const;
  const LabelPath& path(std::size_t class_id) const { return paths_.at(class_id); }
  std::string name(std::size_t class_id) const;

  nlohmann::json to_json() const;
  static LabelSpace from_json(const nlohmann::json& j);

 private:
  std::vector<LabelPath> paths_;
  std::map<LabelPath, std::size_t> index_;
};

std::string join_path(const LabelPath& path);

struct Dataset {
  std::vector<Example> examples;
  std::size_t levels = 0;
  std::map<LabelPath, std::vector<std::string>> class_index;
  std::optional<Vocab> vocab;

  std::size_t size() const noexcept { return examples.size(); }
  bool empty() const noexcept { return examples.empty(); }
  void rebuild_index();
};

/// Builds a dataset from in-memory examples, validating label depth consistency.
Dataset make_dataset(std::vector<Example> examples);

/// Reads JSONL records {"id"?: str, "text": str, "labels": [str, ...]}. With require_labels false the
/// "labels" field is ignored and every example has an empty label path (levels 0).
Dataset load_dataset(const std::filesystem::path& path, bool require_labels = true);
Dataset parse_jsonl(std::string_view content, bool require_labels = true);
void write_jsonl(const std::filesystem::path& path, std::span<const Example> examples);

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
  std::vector<std::string> warnings;
};

/// Stratified by full label path and deterministic given the seed.
Splits split_dataset(const Dataset& ds, double val_frac, double test_frac, std::uint64_t seed);

/// Builds the vocabulary from `ds` and attaches token ids to every example.
Dataset build_vocab_and_tokenize(Dataset ds, std::size_t max_vocab);

/// ceil(factor * longest token length) over an evenly strided sample of ceil(sample_frac * N)
/// examples, capped at `model_cap`.
std::size_t estimate_max_length(const Dataset& ds, double sample_frac = 0.1, double factor = 1.2,
                                std::size_t model_cap = 512);

struct CorpusStats {
  std::size_t count = 0;
  double avg_length = 0.0;
  std::size_t max_length = 0;
  std::map<std::string, std::size_t> per_class;
  bool empty = true;
};

CorpusStats compute_stats(const Dataset& ds);

nlohmann::json stats_to_json(const std::vector<std::pair<std::string, CorpusStats>>& splits);
/// Two plain-text tables: split sizes, then average / max lengths.
std::string stats_to_text(const std::vector<std::pair<std::string, CorpusStats>>& splits);

}  // namespace triphase::corpus
