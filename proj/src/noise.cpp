#include "triphase/noise.hpp"

#include <stdexcept>

#include "triphase/errors.hpp"

namespace triphase::noise {

CorruptionMode parse_mode(const std::string& name) {
  if (name == "delete") return CorruptionMode::kDelete;
  if (name == "mask") return CorruptionMode::kMask;
  throw ConfigError("unknown corruption mode '" + name + "' (expected delete or mask)");
}

std::string mode_name(CorruptionMode mode) { return mode == CorruptionMode::kDelete ? "delete" : "mask"; }

void CorruptionConfig::validate() const {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("corruption ratio must be in [0, 1]");
  for (auto id : {corpus::special::kPad, corpus::special::kBos, corpus::special::kEos}) {
    if (protect.count(id) == 0) throw ConfigError("corruption must protect PAD, BOS and EOS");
  }
}

std::vector<corpus::TokenId> corrupt_tokens(std::span<const corpus::TokenId> tokens, const CorruptionConfig& cfg,
                                            Rng& rng) {
  std::vector<corpus::TokenId> out;
  if (tokens.empty()) return out;
  std::bernoulli_distribution hit(cfg.ratio);

  if (cfg.mode == CorruptionMode::kMask) {
    out.assign(tokens.begin(), tokens.end());
    for (auto& t : out) {
      if (cfg.protect.count(t) == 0 && hit(rng)) t = corpus::special::kMask;
    }
    return out;
  }

  std::vector<std::size_t> dropped;
  out.reserve(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (cfg.protect.count(tokens[i]) == 0 && hit(rng)) {
      dropped.push_back(i);
    } else {
      out.push_back(tokens[i]);
    }
  }
  if (out.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, dropped.size() - 1);
    out.push_back(tokens[dropped[pick(rng)]]);
  }
  return out;
}

void StopwordNoiseConfig::validate() const {
  if (min_length < 1) throw ConfigError("stop-word noise min_length must be >= 1");
  if (!(delete_frac > 0.0 && delete_frac <= 1.0)) throw ConfigError("stop-word delete_frac must be in (0, 1]");
}

std::vector<std::string> delete_stopwords(std::span<const std::string> tokens, const StopwordNoiseConfig& cfg,
                                          Rng& rng) {
  std::vector<std::string> out(tokens.begin(), tokens.end());
  if (tokens.size() < cfg.min_length) return out;
  std::bernoulli_distribution drop(cfg.delete_frac);
  out.clear();
  for (const auto& t : tokens) {
    if (cfg.stopwords.count(t) != 0 && drop(rng)) continue;
    out.push_back(t);
  }
  return out;
}

}  // namespace triphase::noise
