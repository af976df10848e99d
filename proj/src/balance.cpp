#include "triphase/balance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>
#include <utility>

#include "triphase/errors.hpp"

namespace triphase::balance {

double ratio_function(double x, double max_k, double max_ratio) {
  if (!(x > 0.0)) throw std::domain_error("class size must be positive");
  if (!(max_k >= 2.0)) throw std::domain_error("largest class size must be at least 2");
  if (x > max_k) throw std::domain_error("class size exceeds the largest class size");
  return std::log(max_k / x) * max_ratio / std::log(max_k);
}

double unit_ratio_size(double max_k, double max_ratio) { return std::pow(max_k, (max_ratio - 1.0) / max_ratio); }

double BalancePlan::imbalance(const std::map<std::string, std::size_t>& counts) {
  if (counts.empty()) return 1.0;
  auto [lo, hi] = std::minmax_element(counts.begin(), counts.end(),
                                      [](const auto& a, const auto& b) { return a.second < b.second; });
  return lo->second == 0 ? INFINITY : static_cast<double>(hi->second) / static_cast<double>(lo->second);
}

nlohmann::json BalancePlan::to_json() const {
  return {{"class_sizes", class_sizes}, {"max_k", max_k},     {"min_ratio", min_ratio},
          {"max_ratio", max_ratio},     {"ratios", ratios},   {"targets", targets},
          {"raw_imbalance", imbalance(class_sizes)},          {"balanced_imbalance", imbalance(targets)}};
}

BalancePlan plan_balance(const std::map<std::string, std::size_t>& class_sizes, double min_ratio, double max_ratio) {
  if (min_ratio > max_ratio) throw ConfigError("min_ratio must not exceed max_ratio");
  if (class_sizes.size() < 2) throw std::invalid_argument("balancing needs at least two classes");
  BalancePlan plan;
  plan.class_sizes = class_sizes;
  plan.min_ratio = min_ratio;
  plan.max_ratio = max_ratio;
  for (const auto& [k, n] : class_sizes) {
    if (n == 0) throw std::invalid_argument("class '" + k + "' is empty");
    plan.max_k = std::max(plan.max_k, n);
  }
  for (const auto& [k, n] : class_sizes) {
    // With max_k == 1 every class is the largest one, where f is 0.
    const double f = plan.max_k >= 2 ? ratio_function(static_cast<double>(n), static_cast<double>(plan.max_k), max_ratio)
                                     : 0.0;
    const double r = std::clamp(f, min_ratio, max_ratio);
    plan.ratios[k] = r;
    plan.targets[k] = static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 0.5));
  }
  return plan;
}

namespace {

std::string join_tokens(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

}  // namespace

std::vector<corpus::Example> augment_class(std::span<const corpus::Example> originals, std::size_t target,
                                           const noise::StopwordNoiseConfig& noiser, noise::Rng& rng) {
  std::vector<corpus::Example> out(originals.begin(), originals.end());
  if (target <= originals.size() || originals.empty()) return out;

  std::vector<std::size_t> order(originals.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t extra = target - originals.size();
  for (std::size_t j = 0; j < extra; ++j) {
    const auto& src = originals[order[j % order.size()]];
    corpus::Example copy;
    copy.id = src.id + "#aug" + std::to_string(j / order.size());
    copy.label_path = src.label_path;
    copy.augmented = true;
    copy.source_id = src.augmented ? src.source_id : src.id;
    const auto words = corpus::split_words(src.text);
    const auto noised = noise::delete_stopwords(words, noiser, rng);
    // Unchanged copies keep the exact source text.
    copy.text = noised.size() == words.size() ? src.text : join_tokens(noised);
    if (copy.text.empty()) copy.text = src.text;
    out.push_back(std::move(copy));
  }
  return out;
}

std::map<std::string, std::size_t> class_sizes(const corpus::Dataset& ds) {
  std::map<std::string, std::size_t> sizes;
  for (const auto& [path, ids] : ds.class_index) sizes[corpus::join_path(path)] = ids.size();
  return sizes;
}

std::vector<corpus::Example> apply_plan(const corpus::Dataset& ds, const BalancePlan& plan,
                                        const noise::StopwordNoiseConfig& noiser, noise::Rng& rng) {
  std::map<std::string, std::vector<corpus::Example>> by_class;
  for (const auto& ex : ds.examples) by_class[corpus::join_path(ex.label_path)].push_back(ex);

  std::vector<corpus::Example> out;
  for (auto& [name, members] : by_class) {
    auto it = plan.targets.find(name);
    const std::size_t target = it == plan.targets.end() ? members.size() : it->second;
    auto grown = augment_class(members, target, noiser, rng);
    for (auto& ex : grown) {
      if (ex.augmented && ds.vocab) ex.tokens = ds.vocab->encode(ex.text);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

double similarity_label(const corpus::LabelPath& u, const corpus::LabelPath& v, std::size_t levels) {
  if (u.size() != levels || v.size() != levels || levels == 0) {
    throw std::invalid_argument("label paths must both have length " + std::to_string(levels));
  }
  std::size_t common = 0;
  while (common < levels && u[common] == v[common]) ++common;
  return static_cast<double>(common) / static_cast<double>(levels);
}

std::vector<LabeledPair> make_pairs(std::span<const corpus::Example> examples, std::size_t levels, noise::Rng& rng,
                                    const PairConfig& cfg) {
  std::vector<LabeledPair> pairs;
  const std::size_t n = examples.size();
  if (n < 2) return pairs;

  const std::size_t unique_limit = n * (n - 1) / 2;
  std::size_t target = cfg.target_pairs.value_or(n);
  if (cfg.max_pairs) target = std::min(target, *cfg.max_pairs);
  target = std::min(target, unique_limit);

  std::set<std::pair<std::size_t, std::size_t>> seen;
  std::vector<std::size_t> a(n), b(n);
  for (std::size_t pass = 0; pass < std::max<std::size_t>(cfg.max_passes, 1) && pairs.size() < target; ++pass) {
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), 0);
    std::shuffle(a.begin(), a.end(), rng);
    std::shuffle(b.begin(), b.end(), rng);
    for (std::size_t i = 0; i < n && pairs.size() < target; ++i) {
      const auto l = a[i];
      const auto r = b[i];
      if (examples[l].id == examples[r].id) continue;
      if (!seen.emplace(std::min(l, r), std::max(l, r)).second) continue;
      LabeledPair p;
      p.left = l;
      p.right = r;
      p.similarity = similarity_label(examples[l].label_path, examples[r].label_path, levels);
      p.left_augmented = examples[l].augmented;
      p.right_augmented = examples[r].augmented;
      pairs.push_back(p);
    }
  }
  return pairs;
}

void write_pairs_jsonl(std::ostream& os, std::span<const corpus::Example> examples,
                       std::span<const LabeledPair> pairs) {
  for (const auto& p : pairs) {
    nlohmann::json j{{"left_id", examples[p.left].id}, {"right_id", examples[p.right].id},
                     {"similarity", p.similarity}};
    os << j.dump() << '\n';
  }
}

}  // namespace triphase::balance
