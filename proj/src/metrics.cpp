#include "triphase/metrics.hpp"

#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace triphase::metrics {

namespace {
double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace

MetricsReport evaluate(std::span<const std::size_t> predictions, std::span<const std::size_t> targets,
                       std::size_t classes) {
  if (predictions.size() != targets.size()) throw std::invalid_argument("predictions and targets differ in length");
  if (predictions.empty()) throw std::invalid_argument("cannot evaluate an empty prediction set");
  if (classes == 0) throw std::invalid_argument("class count must be positive");

  MetricsReport r;
  r.total = predictions.size();
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] >= classes || targets[i] >= classes) throw std::invalid_argument("class id out of range");
    ++r.confusion[targets[i]][predictions[i]];
  }

  std::size_t correct = 0;
  r.per_class.resize(classes);
  for (std::size_t k = 0; k < classes; ++k) {
    std::size_t predicted = 0;
    std::size_t actual = 0;
    for (std::size_t j = 0; j < classes; ++j) {
      predicted += r.confusion[j][k];
      actual += r.confusion[k][j];
    }
    const std::size_t tp = r.confusion[k][k];
    correct += tp;
    auto& c = r.per_class[k];
    c.support = actual;
    c.absent = predicted == 0 && actual == 0;
    c.precision = ratio(tp, predicted);
    c.recall = ratio(tp, actual);
    c.f1 = (c.precision + c.recall) == 0.0 ? 0.0 : 2.0 * c.precision * c.recall / (c.precision + c.recall);
    r.macro_precision += c.precision;
    r.macro_recall += c.recall;
    r.macro_f1 += c.f1;
  }
  const auto k = static_cast<double>(classes);
  r.macro_precision /= k;
  r.macro_recall /= k;
  r.macro_f1 /= k;
  r.accuracy = ratio(correct, r.total);
  return r;
}

nlohmann::json MetricsReport::to_json(const std::vector<std::string>& class_names) const {
  nlohmann::json per = nlohmann::json::array();
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    const auto& c = per_class[k];
    nlohmann::json e{{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1},
                     {"support", c.support},     {"absent", c.absent}};
    if (k < class_names.size()) e["name"] = class_names[k];
    per.push_back(std::move(e));
  }
  return {{"total", total},           {"accuracy", accuracy},   {"macro_precision", macro_precision},
          {"macro_recall", macro_recall}, {"macro_f1", macro_f1}, {"per_class", per},
          {"confusion_matrix", confusion}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.total = j.at("total").get<std::size_t>();
  r.accuracy = j.at("accuracy").get<double>();
  r.macro_precision = j.at("macro_precision").get<double>();
  r.macro_recall = j.at("macro_recall").get<double>();
  r.macro_f1 = j.at("macro_f1").get<double>();
  r.confusion = j.at("confusion_matrix").get<std::vector<std::vector<std::size_t>>>();
  for (const auto& e : j.at("per_class")) {
    ClassScores c;
    c.precision = e.at("precision").get<double>();
    c.recall = e.at("recall").get<double>();
    c.f1 = e.at("f1").get<double>();
    c.support = e.at("support").get<std::size_t>();
    c.absent = e.at("absent").get<bool>();
    r.per_class.push_back(c);
  }
  return r;
}

std::string confusion_to_text(const MetricsReport& r, const std::vector<std::string>& class_names) {
  std::ostringstream os;
  const std::size_t k = r.confusion.size();
  auto name = [&](std::size_t i) { return i < class_names.size() ? class_names[i] : std::to_string(i); };
  std::size_t width = 8;
  for (std::size_t i = 0; i < k; ++i) width = std::max(width, name(i).size() + 2);
  os << std::left << std::setw(static_cast<int>(width)) << "true\\pred";
  for (std::size_t j = 0; j < k; ++j) os << std::right << std::setw(static_cast<int>(width)) << name(j);
  os << '\n';
  for (std::size_t i = 0; i < k; ++i) {
    os << std::left << std::setw(static_cast<int>(width)) << name(i);
    for (std::size_t j = 0; j < k; ++j) os << std::right << std::setw(static_cast<int>(width)) << r.confusion[i][j];
    os << '\n';
  }
  return os.str();
}

}  // namespace triphase::metrics
