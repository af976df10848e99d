#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "triphase/model.hpp"

namespace triphase::checkpoint {

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes);
std::string hex64(std::uint64_t v);

/// Hash of the canonical (sorted-key) dump of a model config.
std::uint64_t config_hash(const model::ModelConfig& cfg);

/// Binary layout (little endian):
///   "TPHCKPT1" | u64 config hash | u64 meta length | meta JSON |
///   u32 tensor count | per tensor: u32 name length, name, u64 rows, u64 cols, rows*cols f64
std::string serialize(const model::ModelConfig& cfg, const nlohmann::json& meta,
                      const std::vector<model::NamedParameter>& params);

struct Archive {
  model::ModelConfig config;
  std::uint64_t config_hash = 0;
  nlohmann::json meta;
  std::vector<std::pair<std::string, ag::Matrix>> tensors;
};

Archive deserialize(std::string_view bytes);

/// Copies archive tensors into `params` by name; shapes and name sets must match exactly.
void restore(const Archive& archive, const std::vector<model::NamedParameter>& params);

/// Writes the file and returns the hex content hash.
std::string save_file(const std::filesystem::path& path, const model::ModelConfig& cfg, const nlohmann::json& meta,
                      const std::vector<model::NamedParameter>& params);
Archive load_file(const std::filesystem::path& path);
/// Refuses archives whose embedded config hash differs from `expected`.
Archive load_file(const std::filesystem::path& path, const model::ModelConfig& expected);

/// Rebuilds a classifier (encoder with projection if saved, plus head) from an archive.
model::Classifier load_classifier(const Archive& archive);

}  // namespace triphase::checkpoint
