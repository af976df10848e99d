#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "triphase/balance.hpp"
#include "triphase/errors.hpp"

using namespace triphase;
using namespace triphase::balance;
using corpus::Example;

namespace {

std::vector<Example> two_class_examples(std::size_t per_class) {
  std::vector<Example> ex;
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    ex.push_back(oracle::example("e" + std::to_string(i), "text", {i < per_class ? "a" : "b"}));
  }
  return ex;
}

}  // namespace

TEST_CASE("ratio_function: anchor values") {
  CHECK(ratio_function(1, 1000, 4) == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(ratio_function(1000, 1000, 4) == doctest::Approx(0.0));
  const double x = std::pow(1000.0, 0.75);
  CHECK(std::abs(ratio_function(x, 1000, 4) - 1.0) < 1e-9);
  CHECK(std::abs(unit_ratio_size(1000, 4) - x) < 1e-9);
  CHECK(std::abs(ratio_function(unit_ratio_size(500, 20), 500, 20) - 1.0) < 1e-9);
}

TEST_CASE("ratio_function: decreasing and base invariant") {
  double prev = 1e9;
  for (double x = 1; x <= 1000; x += 7) {
    const double f = ratio_function(x, 1000, 4);
    CHECK(f < prev);
    prev = f;
    const double base10 = std::log10(1000.0 / x) * 4.0 / std::log10(1000.0);
    CHECK(std::abs(f - base10) < 1e-12);
  }
}

TEST_CASE("ratio_function: domain") {
  CHECK_THROWS_AS(ratio_function(0, 10, 4), std::domain_error);
  CHECK_THROWS_AS(ratio_function(-1, 10, 4), std::domain_error);
  CHECK_THROWS_AS(ratio_function(11, 10, 4), std::domain_error);
  CHECK_THROWS_AS(ratio_function(1, 1, 4), std::domain_error);
}

TEST_CASE("plan_balance: skewed three-class example") {
  const auto plan = plan_balance({{"A", 1000}, {"B", 100}, {"C", 10}});
  CHECK(plan.max_k == 1000);
  CHECK(plan.ratios.at("A") == doctest::Approx(1.5));
  CHECK(plan.ratios.at("B") == doctest::Approx(1.5));
  CHECK(plan.ratios.at("C") == doctest::Approx(8.0 / 3.0));
  CHECK(plan.targets.at("A") == 1500);
  CHECK(plan.targets.at("B") == 150);
  CHECK(plan.targets.at("C") == 27);
}

TEST_CASE("plan_balance: equal sizes and a unit class") {
  const auto eq = plan_balance({{"a", 40}, {"b", 40}, {"c", 40}});
  for (const auto& [k, r] : eq.ratios) CHECK(r == doctest::Approx(1.5));
  for (const auto& [k, t] : eq.targets) CHECK(t == 60);

  const auto tiny = plan_balance({{"big", 1000}, {"one", 1}});
  CHECK(tiny.ratios.at("one") == doctest::Approx(4.0));
  CHECK(tiny.targets.at("one") == 4);
}

TEST_CASE("plan_balance: errors") {
  CHECK_THROWS_AS(plan_balance({{"a", 10}, {"b", 5}}, 5.0, 4.0), ConfigError);
  CHECK_THROWS(plan_balance({{"a", 10}}));
  CHECK_THROWS(plan_balance({{"a", 10}, {"b", 0}}));
}

TEST_CASE("plan_balance: never increases imbalance") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> size(1, 3000);
  for (int t = 0; t < 300; ++t) {
    std::map<std::string, std::size_t> sizes;
    const int k = 2 + t % 5;
    for (int c = 0; c < k; ++c) sizes["c" + std::to_string(c)] = size(rng);
    const auto plan = plan_balance(sizes);
    double lo = 1e300, hi = 0.0;
    std::size_t lo_n = 0, hi_n = 0;
    for (const auto& [name, n] : sizes) {
      const double scaled = plan.ratios.at(name) * static_cast<double>(n);
      if (scaled < lo) lo = scaled, lo_n = plan.targets.at(name);
      if (scaled > hi) hi = scaled, hi_n = plan.targets.at(name);
    }
    CHECK(hi / lo <= BalancePlan::imbalance(sizes) + 1e-12);
    // Half-up rounding moves each target by at most 0.5.
    CHECK(static_cast<double>(hi_n) / static_cast<double>(lo_n) <= (hi + 0.5) / (lo - 0.5) + 1e-12);
    for (const auto& [name, r] : plan.ratios) {
      CHECK(r >= plan.min_ratio);
      CHECK(r <= plan.max_ratio);
      CHECK(plan.targets.at(name) == static_cast<std::size_t>(std::floor(r * sizes.at(name) + 0.5)));
    }
  }
  const auto j = plan_balance({{"a", 100}, {"b", 10}}).to_json();
  CHECK(j.contains("targets"));
}

TEST_CASE("augment_class: target equal to size adds nothing") {
  noise::Rng rng(1);
  const auto ex = two_class_examples(2);
  const auto out = augment_class(std::span(ex).first(2), 2, noise::default_stopword_noise(), rng);
  CHECK(out.size() == 2);
  CHECK(out[0].id == ex[0].id);
  CHECK_FALSE(out[1].augmented);
}

TEST_CASE("augment_class: round robin over two originals") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    noise::Rng rng(seed);
    const std::vector<Example> originals{oracle::example("x", "short text", {"k"}),
                                         oracle::example("y", "another one", {"k"})};
    const auto out = augment_class(originals, 5, noise::default_stopword_noise(), rng);
    REQUIRE(out.size() == 5);
    CHECK(out[0].id == "x");
    CHECK(out[1].id == "y");
    std::map<std::string, int> sources;
    std::set<std::string> ids;
    for (std::size_t i = 2; i < out.size(); ++i) {
      CHECK(out[i].augmented);
      ++sources[out[i].source_id];
      CHECK(out[i].label_path == originals[0].label_path);
    }
    for (const auto& e : out) CHECK(ids.insert(e.id).second);
    CHECK(sources.size() == 2);
    CHECK(std::max(sources["x"], sources["y"]) == 2);
    CHECK(std::min(sources["x"], sources["y"]) == 1);
  }
}

TEST_CASE("augment_class: short copies keep their text") {
  noise::Rng rng(3);
  const std::vector<Example> originals{oracle::example("s", "the cat is on the mat", {"k"})};
  const auto out = augment_class(originals, 4, noise::default_stopword_noise(), rng);
  for (std::size_t i = 1; i < out.size(); ++i) {
    CHECK(out[i].text == originals[0].text);
    CHECK(out[i].id != originals[0].id);
  }
}

TEST_CASE("apply_plan grows classes to their targets") {
  std::vector<Example> ex;
  for (int i = 0; i < 20; ++i) ex.push_back(oracle::example("a" + std::to_string(i), "alpha beta", {"a"}));
  for (int i = 0; i < 3; ++i) ex.push_back(oracle::example("b" + std::to_string(i), "gamma delta", {"b"}));
  const auto ds = corpus::build_vocab_and_tokenize(corpus::make_dataset(ex), 50);
  const auto plan = plan_balance(class_sizes(ds));
  noise::Rng rng(4);
  const auto out = apply_plan(ds, plan, noise::default_stopword_noise(), rng);
  std::map<std::string, std::size_t> counts;
  for (const auto& e : out) {
    ++counts[corpus::join_path(e.label_path)];
    CHECK_FALSE(e.tokens.empty());
  }
  CHECK(counts == plan.targets);
}

TEST_CASE("similarity_label") {
  CHECK(similarity_label({"a"}, {"a"}, 1) == 1.0);
  CHECK(similarity_label({"a"}, {"b"}, 1) == 0.0);
  CHECK(similarity_label({"w", "p"}, {"w", "p"}, 2) == 1.0);
  CHECK(similarity_label({"w", "p"}, {"w", "s"}, 2) == 0.5);
  CHECK(similarity_label({"w", "p"}, {"x", "p"}, 2) == 0.0);
  CHECK_THROWS(similarity_label({"a"}, {"a", "b"}, 2));
  CHECK_THROWS(similarity_label({}, {}, 0));
}

TEST_CASE("make_pairs: two same-class examples") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    noise::Rng rng(seed);
    const std::vector<Example> ex{oracle::example("1", "t", {"a"}), oracle::example("2", "t", {"a"})};
    const auto pairs = make_pairs(ex, 1, rng);
    CHECK(pairs.size() <= 1);
    for (const auto& p : pairs) CHECK(p.similarity == 1.0);
  }
}

TEST_CASE("make_pairs: no duplicates, no self-pairs, labels by class equality") {
  const auto ex = two_class_examples(2);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    noise::Rng rng(seed);
    const auto pairs = make_pairs(ex, 1, rng, {std::nullopt, 6, 8});
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (const auto& p : pairs) {
      CHECK(p.left != p.right);
      CHECK(seen.emplace(std::min(p.left, p.right), std::max(p.left, p.right)).second);
      CHECK(p.similarity == (ex[p.left].label_path == ex[p.right].label_path ? 1.0 : 0.0));
    }
    CHECK(pairs.size() <= 6);
  }
}

TEST_CASE("make_pairs: deterministic, capped and able to exhaust all pairs") {
  const auto ex = two_class_examples(5);
  noise::Rng r1(9), r2(9);
  const auto p1 = make_pairs(ex, 1, r1, {std::nullopt, 30, 8});
  const auto p2 = make_pairs(ex, 1, r2, {std::nullopt, 30, 8});
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i].left == p2[i].left);
    CHECK(p1[i].right == p2[i].right);
  }
  noise::Rng r3(9);
  CHECK(make_pairs(ex, 1, r3, {5, 30, 8}).size() == 5);
  noise::Rng r4(10);
  CHECK(make_pairs(ex, 1, r4, {std::nullopt, 1000, 200}).size() == 45);
}

TEST_CASE("make_pairs: augmented copies pair with their source") {
  noise::Rng rng(5);
  const std::vector<Example> originals{oracle::example("x", "t", {"a"})};
  const auto grown = augment_class(originals, 3, noise::default_stopword_noise(), rng);
  const auto pairs = make_pairs(grown, 1, rng, {std::nullopt, 3, 50});
  CHECK(pairs.size() == 3);
  for (const auto& p : pairs) CHECK((p.left_augmented || p.right_augmented));
}

TEST_CASE("pair dump") {
  const auto ex = two_class_examples(1);
  std::ostringstream os;
  write_pairs_jsonl(os, ex, std::vector<LabeledPair>{{0, 1, 0.0, false, false}});
  CHECK(os.str() == "{\"left_id\":\"e0\",\"right_id\":\"e1\",\"similarity\":0.0}\n");
}
