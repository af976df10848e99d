#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace triphase::metrics {

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;  // true count
  bool absent = false;      // never predicted and never a target
};

struct MetricsReport {
  std::size_t total = 0;
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassScores> per_class;
  std::vector<std::vector<std::size_t>> confusion;  // rows = true, cols = predicted

  nlohmann::json to_json(const std::vector<std::string>& class_names = {}) const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Macro metrics average per-class values; a zero denominator yields 0 for that class.
MetricsReport evaluate(std::span<const std::size_t> predictions, std::span<const std::size_t> targets,
                       std::size_t classes);

/// Confusion matrix as an aligned text table.
std::string confusion_to_text(const MetricsReport& r, const std::vector<std::string>& class_names);

}  // namespace triphase::metrics
