#include "triphase/synthetic.hpp"

#include <random>
#include <sstream>

#include "triphase/errors.hpp"
#include "triphase/noise.hpp"

namespace triphase::synthetic {

std::string class_name(std::size_t k) { return "c" + std::to_string(k); }

void SyntheticSpec::validate() const {
  if (sizes.size() < 2) throw ConfigError("synthetic corpus needs at least two classes");
  for (auto s : sizes) {
    if (s < 1) throw ConfigError("synthetic class sizes must be >= 1");
  }
  if (signal_strength < 0.0 || signal_strength > 1.0) throw ConfigError("signal_strength must be in [0, 1]");
  if (levels != 1 && levels != 2) throw ConfigError("synthetic levels must be 1 or 2");
  if (indicators_per_class < 1) throw ConfigError("indicators_per_class must be >= 1");
  if (min_length < 1 || min_length > max_length) throw ConfigError("need 1 <= min_length <= max_length");
  if (stopword_rate < 0.0 || stopword_rate > 1.0) throw ConfigError("stopword_rate must be in [0, 1]");
  if (vocab_size < sizes.size() * indicators_per_class + 1) {
    throw ConfigError("vocab_size " + std::to_string(vocab_size) + " too small for " +
                      std::to_string(sizes.size()) + " x " + std::to_string(indicators_per_class) +
                      " distinct indicators plus background");
  }
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"sizes", sizes},
          {"vocab_size", vocab_size},
          {"signal_strength", signal_strength},
          {"levels", levels},
          {"seed", seed},
          {"indicators_per_class", indicators_per_class},
          {"min_length", min_length},
          {"max_length", max_length},
          {"stopword_rate", stopword_rate}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("synthetic spec must be an object");
  SyntheticSpec s;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "sizes") s.sizes = v.get<std::vector<std::size_t>>();
      else if (key == "n_classes" || key == "size") continue;
      else if (key == "vocab_size") s.vocab_size = v.get<std::size_t>();
      else if (key == "signal_strength") s.signal_strength = v.get<double>();
      else if (key == "levels") s.levels = v.get<std::size_t>();
      else if (key == "seed") s.seed = v.get<std::uint64_t>();
      else if (key == "indicators_per_class") s.indicators_per_class = v.get<std::size_t>();
      else if (key == "min_length") s.min_length = v.get<std::size_t>();
      else if (key == "max_length") s.max_length = v.get<std::size_t>();
      else if (key == "stopword_rate") s.stopword_rate = v.get<double>();
      else throw ConfigError("unknown synthetic key '" + key + "'");
    }
    if (j.contains("n_classes")) {
      const auto n = j["n_classes"].get<std::size_t>();
      if (s.sizes.empty()) s.sizes.assign(n, j.value("size", std::size_t{100}));
      if (s.sizes.size() != n) throw ConfigError("n_classes disagrees with sizes");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<corpus::Example> generate(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t k_count = spec.sizes.size();
  const std::size_t background = spec.vocab_size - k_count * spec.indicators_per_class;
  const auto& stopwords = noise::default_stopwords();

  std::mt19937_64 rng(spec.seed);
  std::bernoulli_distribution take_signal(spec.signal_strength);
  std::bernoulli_distribution take_stop(spec.stopword_rate);
  std::uniform_int_distribution<std::size_t> length(spec.min_length, spec.max_length);
  std::uniform_int_distribution<std::size_t> indicator(0, spec.indicators_per_class - 1);
  std::uniform_int_distribution<std::size_t> filler(0, background - 1);
  std::uniform_int_distribution<std::size_t> stop(0, stopwords.size() - 1);

  std::vector<corpus::Example> out;
  for (std::size_t k = 0; k < k_count; ++k) {
    for (std::size_t i = 0; i < spec.sizes[k]; ++i) {
      const std::size_t n = length(rng);
      std::ostringstream text;
      for (std::size_t p = 0; p < n; ++p) {
        if (p) text << ' ';
        if (take_signal(rng)) {
          text << class_name(k) << "w" << indicator(rng);
        } else if (take_stop(rng)) {
          text << stopwords[stop(rng)];
        } else {
          text << "tok" << filler(rng);
        }
      }
      corpus::Example ex;
      ex.id = class_name(k) + "-" + std::to_string(i);
      ex.text = text.str();
      if (spec.levels == 2) ex.label_path.push_back("g" + std::to_string(k / 2));
      ex.label_path.push_back(class_name(k));
      out.push_back(std::move(ex));
    }
  }
  return out;
}

corpus::Dataset gen_synthetic(const SyntheticSpec& spec) { return corpus::make_dataset(generate(spec)); }

}  // namespace triphase::synthetic
