#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "oracles.hpp"
#include "triphase/corpus.hpp"
#include "triphase/errors.hpp"

using namespace triphase;
using namespace triphase::corpus;

namespace {

Dataset classes_dataset(const std::vector<std::pair<std::string, std::size_t>>& sizes) {
  std::vector<Example> ex;
  for (const auto& [name, n] : sizes) {
    for (std::size_t i = 0; i < n; ++i) {
      ex.push_back(oracle::example(name + std::to_string(i), "text " + name + " " + std::to_string(i), {name}));
    }
  }
  return make_dataset(std::move(ex));
}

Dataset with_lengths(const std::vector<std::size_t>& lengths) {
  std::vector<Example> ex;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    std::string text;
    for (std::size_t j = 0; j < lengths[i]; ++j) text += "w ";
    ex.push_back(oracle::example("e" + std::to_string(i), text, {"a"}));
  }
  return build_vocab_and_tokenize(make_dataset(std::move(ex)), 100);
}

std::set<std::string> ids(const Dataset& d) {
  std::set<std::string> s;
  for (const auto& e : d.examples) s.insert(e.id);
  return s;
}

}  // namespace

TEST_CASE("jsonl: three single-level records") {
  const auto ds = parse_jsonl(R"({"id":"a","text":"hello world","labels":["x"]}
{"id":"b","text":"good day","labels":["y"]}
{"text":"third one","labels":["x"]}
)");
  CHECK(ds.size() == 3);
  CHECK(ds.levels == 1);
  CHECK(ds.examples[2].id == "line3");
  CHECK(ds.class_index.at({"x"}).size() == 2);
}

TEST_CASE("jsonl: two-level label path") {
  const auto ds = parse_jsonl(R"({"text":"t","labels":["World","Politics"]})");
  REQUIRE(ds.examples.size() == 1);
  CHECK(ds.examples[0].label_path == LabelPath{"World", "Politics"});
  CHECK(ds.levels == 2);
}

TEST_CASE("jsonl: missing text names the line") {
  try {
    parse_jsonl("{\"text\":\"ok\",\"labels\":[\"a\"]}\n{\"labels\":[\"a\"]}\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(parse_jsonl("{not json}\n"), ParseError);
  CHECK_THROWS_AS(parse_jsonl(R"({"text":"","labels":["a"]})"), ParseError);
}

TEST_CASE("jsonl: unlabelled records") {
  const auto ds = parse_jsonl("{\"text\":\"only words\"}\n{\"text\":\"more\",\"labels\":[\"x\",\"y\"]}\n", false);
  REQUIRE(ds.size() == 2);
  CHECK(ds.levels == 0);
  CHECK(ds.examples[0].label_path.empty());
  CHECK(ds.examples[1].label_path.empty());
  CHECK(ds.class_index.empty());
  CHECK_THROWS_AS(parse_jsonl("{\"text\":\"only words\"}\n"), ParseError);
  CHECK_THROWS_AS(parse_jsonl("{\"labels\":[\"x\"]}\n", false), ParseError);
}

TEST_CASE("jsonl: inconsistent depth and duplicate ids") {
  CHECK_THROWS_AS(parse_jsonl("{\"text\":\"a\",\"labels\":[\"x\"]}\n{\"text\":\"b\",\"labels\":[\"x\",\"y\"]}\n"),
                  SchemaError);
  CHECK_THROWS_AS(parse_jsonl("{\"id\":\"1\",\"text\":\"a\",\"labels\":[\"x\"]}\n"
                              "{\"id\":\"1\",\"text\":\"b\",\"labels\":[\"x\"]}\n"),
                  SchemaError);
}

TEST_CASE("jsonl: write and load round trip") {
  const auto path = std::filesystem::temp_directory_path() / "triphase_corpus_rt.jsonl";
  const auto ds = classes_dataset({{"a", 3}, {"b", 2}});
  write_jsonl(path, ds.examples);
  const auto back = load_dataset(path);
  REQUIRE(back.size() == ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(back.examples[i].id == ds.examples[i].id);
    CHECK(back.examples[i].text == ds.examples[i].text);
    CHECK(back.examples[i].label_path == ds.examples[i].label_path);
  }
  std::filesystem::remove(path);
}

TEST_CASE("split: 100 examples with val 0.2") {
  const auto ds = classes_dataset({{"a", 50}, {"b", 50}});
  const auto s = split_dataset(ds, 0.2, 0.0, 1);
  CHECK(s.train.size() == 80);
  CHECK(s.val.size() == 20);
  CHECK(s.test.size() == 0);
}

TEST_CASE("split: deterministic, disjoint and covering") {
  const auto ds = classes_dataset({{"a", 37}, {"b", 21}, {"c", 5}});
  const auto s1 = split_dataset(ds, 0.2, 0.1, 99);
  const auto s2 = split_dataset(ds, 0.2, 0.1, 99);
  CHECK(ids(s1.train) == ids(s2.train));
  CHECK(ids(s1.val) == ids(s2.val));
  CHECK(ids(s1.test) == ids(s2.test));

  std::set<std::string> all;
  for (const auto* d : {&s1.train, &s1.val, &s1.test}) {
    for (const auto& e : d->examples) CHECK(all.insert(e.id).second);
  }
  CHECK(all == ids(ds));

  const auto s3 = split_dataset(ds, 0.2, 0.1, 100);
  CHECK(ids(s3.val) != ids(s1.val));
}

TEST_CASE("split: stratified per class") {
  const auto ds = classes_dataset({{"a", 50}, {"b", 10}});
  const auto s = split_dataset(ds, 0.2, 0.2, 3);
  CHECK(s.val.class_index.at({"a"}).size() == 10);
  CHECK(s.val.class_index.at({"b"}).size() == 2);
  CHECK(s.test.class_index.at({"b"}).size() == 2);
}

TEST_CASE("split: val_frac 0 keeps everything in train") {
  const auto ds = classes_dataset({{"a", 7}, {"b", 4}});
  const auto s = split_dataset(ds, 0.0, 0.0, 5);
  CHECK(s.train.size() == ds.size());
  CHECK(s.val.empty());
}

TEST_CASE("split: tiny class warns and keeps a training example") {
  const auto ds = classes_dataset({{"a", 20}, {"b", 2}});
  const auto s = split_dataset(ds, 0.4, 0.4, 5);
  CHECK_FALSE(s.warnings.empty());
  CHECK(s.train.class_index.at({"b"}).size() >= 1);
  CHECK_THROWS(split_dataset(ds, 0.6, 0.5, 1));
}

TEST_CASE("vocab: reserved ids, coverage and unknown tokens") {
  const auto ds = build_vocab_and_tokenize(
      make_dataset({oracle::example("1", "a b", {"x"}), oracle::example("2", "a c", {"x"})}), 10);
  REQUIRE(ds.vocab);
  const auto& v = *ds.vocab;
  CHECK(v.size() == special::kCount + 3);
  for (const char* t : {"a", "b", "c"}) CHECK(v.contains(t));
  CHECK(v.id_of("zebra") == special::kUnk);
  CHECK(v.id_of("a") == special::kCount);  // most frequent first
  const auto ids = v.encode("a b a");
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == ids[2]);
  CHECK(v.encode("a b a") == ids);
  CHECK_THROWS(build_vocab_and_tokenize(make_dataset({}), 10));
}

TEST_CASE("vocab: size cap counts reserved ids and json round trips") {
  const auto v = Vocab::build(
      std::vector<Example>{oracle::example("1", "a a a b b c d e f", {"x"})}, special::kCount + 2);
  CHECK(v.size() == special::kCount + 2);
  CHECK(v.contains("a"));
  CHECK(v.contains("b"));
  CHECK_FALSE(v.contains("c"));
  const auto back = Vocab::from_json(v.to_json());
  CHECK(back.size() == v.size());
  CHECK(back.id_of("b") == v.id_of("b"));
}

TEST_CASE("tokenizer: lowercase and punctuation") {
  CHECK(split_words("Hello, World!") == std::vector<std::string>{"hello", ",", "world", "!"});
  CHECK(split_words("  spaced\tout\n") == std::vector<std::string>{"spaced", "out"});
}

TEST_CASE("estimate_max_length") {
  CHECK(estimate_max_length(with_lengths({10, 10, 10, 10}), 1.0) == 12);
  CHECK(estimate_max_length(with_lengths({10, 20, 30}), 1.0) == 36);
  CHECK(estimate_max_length(with_lengths({600}), 1.0) == 512);
  CHECK(estimate_max_length(with_lengths({10, 20, 30}), 1.0, 1.2, 20) == 20);

  const auto ds = with_lengths({3, 9, 4, 17, 8, 2, 11, 6, 13, 5, 7, 21});
  std::size_t prev = 0;
  for (double f = 0.5; f <= 3.0; f += 0.25) {
    const auto n = estimate_max_length(ds, 0.3, f, 40);
    CHECK(n >= prev);
    CHECK(n <= 40);
    prev = n;
  }
}

TEST_CASE("compute_stats") {
  const auto ds = build_vocab_and_tokenize(
      make_dataset({oracle::example("1", "a b c d", {"x"}), oracle::example("2", "a b c d e f", {"x"})}), 50);
  const auto s = compute_stats(ds);
  CHECK(s.count == 2);
  CHECK(s.avg_length == doctest::Approx(5.0));
  CHECK(s.max_length == 6);
  CHECK(s.per_class.at("x") == s.count);
  CHECK_FALSE(s.empty);

  const auto e = compute_stats(Dataset{});
  CHECK(e.empty);
  CHECK(e.count == 0);
  CHECK(e.avg_length == 0.0);

  const auto j = stats_to_json({{"train", s}});
  CHECK(j.dump().find("train") != std::string::npos);
  CHECK_FALSE(stats_to_text({{"train", s}, {"test", e}}).empty());
}

TEST_CASE("label space") {
  const auto ds = classes_dataset({{"b", 1}, {"a", 2}});
  const LabelSpace ls(ds.examples);
  CHECK(ls.size() == 2);
  CHECK(ls.class_of({"a"}) == 0);
  CHECK(ls.name(1) == "b");
  CHECK_THROWS(ls.class_of({"zzz"}));
  const auto back = LabelSpace::from_json(ls.to_json());
  CHECK(back.class_of({"b"}) == 1);
  CHECK(join_path({"World", "Politics"}) == "World/Politics");
}
