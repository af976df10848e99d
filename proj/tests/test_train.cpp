#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "oracles.hpp"
#include "triphase/checkpoint.hpp"
#include "triphase/errors.hpp"
#include "triphase/synthetic.hpp"
#include "triphase/train.hpp"

using namespace triphase;
using namespace triphase::train;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.model.hidden = 16;
  c.model.n_blocks = 1;
  c.model.n_heads = 2;
  c.model.max_positions = 24;
  c.epochs_dae = 2;
  c.epochs_cl = 2;
  c.epochs_joint = 2;
  c.max_epochs_ft = 6;
  c.patience_ft = 2;
  c.learning_rate_dae = c.learning_rate_cl = 3e-3;
  c.learning_rate_ft = 3e-3;
  return c;
}

corpus::Dataset toy_corpus(std::vector<std::size_t> sizes, double signal, std::uint64_t seed = 3) {
  synthetic::SyntheticSpec s;
  s.sizes = std::move(sizes);
  s.vocab_size = 120;
  s.signal_strength = signal;
  s.seed = seed;
  s.indicators_per_class = 4;
  return synthetic::gen_synthetic(s);
}

model::EncoderBundle fresh(const PreparedData& d, const TrainConfig& cfg, std::uint64_t seed = 1) {
  auto mc = cfg.model;
  mc.vocab_size = d.vocab.size();
  model::Rng rng(seed);
  return model::EncoderBundle(mc, rng);
}

model::DecoderBundle fresh_decoder(const PreparedData& d, const TrainConfig& cfg) {
  auto mc = cfg.model;
  mc.vocab_size = d.vocab.size();
  model::Rng rng(2);
  return model::DecoderBundle(mc, rng);
}

double mean_cosine(const model::EncoderBundle& enc, const corpus::Dataset& ds, std::size_t trunc, bool same) {
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = i + 1; j < ds.size(); ++j) {
      if ((ds.examples[i].label_path == ds.examples[j].label_path) != same) continue;
      const auto u = enc.encode(ds.examples[i].tokens, trunc);
      const auto v = enc.encode(ds.examples[j].tokens, trunc);
      total += u.dot(v) / (u.norm() * v.norm());
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

std::vector<ag::Matrix> encoder_values(model::EncoderBundle& enc) {
  std::vector<ag::Matrix> out;
  for (const auto& p : enc.parameters()) {
    if (p.group == model::Group::kEncoder) out.push_back(p.param->value());
  }
  return out;
}

}  // namespace

TEST_CASE("variants") {
  for (auto v : ablation_order()) CHECK(parse_variant(variant_name(v)) == v);
  CHECK(ablation_order().size() == 7);
  CHECK(variant_name(ablation_order().front()) == "3phase");
  CHECK(variant_name(ablation_order().back()) == "ft");
  CHECK_THROWS_AS(parse_variant("4phase"), ConfigError);
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
}

TEST_CASE("config: json, defaults and overrides") {
  const TrainConfig def;
  CHECK(def.learning_rate_cl == def.learning_rate_dae);
  CHECK(def.eps_ft == 2e-5);
  CHECK(def.deleting_ratio == 0.6);
  const auto back = TrainConfig::from_json(def.to_json());
  CHECK(back.to_json() == def.to_json());

  const auto shared = TrainConfig::from_json({{"learning_rate_dae", 5e-4}});
  CHECK(shared.learning_rate_cl == 5e-4);
  const auto split = TrainConfig::from_json({{"learning_rate_dae", 5e-4}, {"learning_rate_cl", 1e-4}});
  CHECK(split.learning_rate_cl == 1e-4);

  CHECK_THROWS_AS(TrainConfig::from_json({{"learning_rate", 1e-3}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"epochs_dae", "three"}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"patience_ft", 20}, {"max_epochs_ft", 20}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"min_ratio", 5.0}}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::from_json({{"deleting_ratio", 1.5}}), ConfigError);

  const auto o = TrainConfig::with_overrides(def, {"epochs_dae=7", "corruption_mode=mask", "freeze_encoder=true",
                                                   "max_ratio=20"});
  CHECK(o.epochs_dae == 7);
  CHECK(o.corruption().mode == noise::CorruptionMode::kMask);
  CHECK(o.freeze_encoder);
  CHECK(o.max_ratio == 20.0);
  CHECK_THROWS_AS(TrainConfig::with_overrides(def, {"epochs_dae"}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::with_overrides(def, {"nope=1"}), ConfigError);
  CHECK_THROWS_AS(TrainConfig::with_overrides(def, {"batch_size_ft=0"}), ConfigError);
}

TEST_CASE("guarded split") {
  GuardedSplit g(toy_corpus({3, 3}, 1.0));
  CHECK(g.locked());
  CHECK_THROWS(g.read("dae"));
  CHECK(g.premature_reads() == 1);
  CHECK(g.reads() == 0);
  g.unlock();
  CHECK(g.read("ft").size() == 6);
  CHECK(g.reads() == 1);
}

TEST_CASE("prepare_data") {
  const auto cfg = tiny_config();
  const auto d = prepare_data(toy_corpus({50, 30}, 0.8), cfg);
  CHECK(d.train.size() + d.val.size() + d.test.size() == 80);
  CHECK(d.val.size() == 16);
  CHECK(d.test.size() == 16);
  CHECK(d.truncation_length >= 1);
  CHECK(d.truncation_length <= cfg.model.max_positions - 1);
  CHECK(d.labels.size() == 2);
  CHECK(d.test.locked());
  CHECK(d.stats.dump().find("validation") != std::string::npos);
  for (const auto& e : d.train.examples) CHECK_FALSE(e.tokens.empty());
}

TEST_CASE("unlabelled texts reach the vocabulary and the dae phase only") {
  const auto cfg = tiny_config();
  const auto raw = toy_corpus({30, 20}, 0.8);
  const auto unlabelled = corpus::parse_jsonl("{\"text\":\"zyxw vuts zyxw\"}\n{\"text\":\"vuts the\"}\n", false);

  const auto plain = prepare_data(raw, cfg);
  const auto extra = prepare_data(raw, cfg, &unlabelled);
  CHECK_FALSE(plain.vocab.contains("zyxw"));
  CHECK(extra.vocab.contains("zyxw"));
  CHECK(extra.unlabelled.size() == 2);
  CHECK(extra.stats.at("unlabelled").at("count") == 2);
  CHECK(extra.train.size() == plain.train.size());
  CHECK(extra.test.size() == plain.test.size());

  RunOptions opts;
  opts.unlabelled = &unlabelled;
  const auto with = run_variant(Variant::kDaeFt, cfg, raw, 1, opts);
  const auto without = run_variant(Variant::kDaeFt, cfg, raw, 1);
  REQUIRE(with.status == "complete");
  REQUIRE(with.phases.size() == 2);
  CHECK(with.phases[0].train_curve != without.phases[0].train_curve);
  CHECK(with.test_reads_before_ft == 0);
}

TEST_CASE("dae phase lowers validation loss and is deterministic") {
  auto cfg = tiny_config();
  cfg.val_frac = 0.2;
  cfg.test_frac = 0.0;
  const auto d = prepare_data(toy_corpus({25, 25}, 0.5), cfg);
  PhaseContext ctx{5, d.truncation_length, nullptr, std::nullopt};
  const auto a = train_dae(cfg, d.train, d.val, fresh(d, cfg), fresh_decoder(d, cfg), ctx);
  REQUIRE(a.record.val_curve.size() == 3);
  CHECK(a.record.val_curve[0] == doctest::Approx(std::log(static_cast<double>(d.vocab.size()))).epsilon(0.2));
  CHECK(a.record.best_value < a.record.val_curve[0]);
  CHECK(a.record.best_epoch >= 1);
  CHECK(a.record.checkpoint_hash.size() == 16);

  const auto b = train_dae(cfg, d.train, d.val, fresh(d, cfg), fresh_decoder(d, cfg), ctx);
  CHECK(b.record.best_epoch == a.record.best_epoch);
  CHECK(b.record.val_curve == a.record.val_curve);
  CHECK(b.record.checkpoint_hash == a.record.checkpoint_hash);

  cfg.deleting_ratio = 0.0;
  const auto plain = train_dae(cfg, d.train, d.val, fresh(d, cfg), fresh_decoder(d, cfg), ctx);
  CHECK(plain.best.dim() == 16);
  CHECK_FALSE(plain.best.has_projection());

  corpus::Dataset empty;
  CHECK_THROWS_AS(train_dae(cfg, d.train, empty, fresh(d, cfg), fresh_decoder(d, cfg), ctx), ConfigError);
}

TEST_CASE("cl phase clusters classes") {
  auto cfg = tiny_config();
  cfg.epochs_cl = 4;
  cfg.pair_factor = 2.0;
  const auto d = prepare_data(toy_corpus({60, 60}, 0.6), cfg);
  PhaseContext ctx{7, d.truncation_length, nullptr, std::nullopt};
  const auto r = train_cl(cfg, d.train, d.val, fresh(d, cfg), PairingOptions{}, ctx);
  CHECK(r.best.has_projection());
  const double within = mean_cosine(r.best, d.val, d.truncation_length, true);
  const double across = mean_cosine(r.best, d.val, d.truncation_length, false);
  MESSAGE("within " << within << " across " << across);
  CHECK(within > across);
  CHECK(r.record.best_value <= r.record.val_curve[0]);

  auto one_class = d.train;
  std::erase_if(one_class.examples, [](const corpus::Example& e) { return e.label_path[0] != "c0"; });
  one_class.rebuild_index();
  CHECK_THROWS(train_cl(cfg, one_class, d.val, fresh(d, cfg), PairingOptions{}, ctx));
}

TEST_CASE("pair sets: balanced versus raw") {
  const auto cfg = tiny_config();
  const auto d = prepare_data(toy_corpus({100, 20}, 0.6), cfg);
  const auto balanced = build_pairs(cfg, d.train, d.val, PairingOptions{}, 3);
  REQUIRE(balanced.plan);
  std::map<std::string, std::size_t> counts;
  for (const auto& e : balanced.train_examples) ++counts[corpus::join_path(e.label_path)];
  CHECK(counts == balanced.plan->targets);
  CHECK(balance::BalancePlan::imbalance(balanced.plan->targets) <
        balance::BalancePlan::imbalance(balanced.plan->class_sizes));

  const auto raw = build_pairs(cfg, d.train, d.val, PairingOptions{false, 1.5, 4.0}, 3);
  CHECK_FALSE(raw.plan);
  CHECK(raw.train_examples.size() == d.train.size());
  CHECK(raw.train_pairs.size() == d.train.size());
  for (const auto& p : raw.val_pairs) {
    CHECK(p.similarity == (d.val.examples[p.left].label_path == d.val.examples[p.right].label_path ? 1.0 : 0.0));
  }
}

TEST_CASE("ft phase on a separable corpus") {
  auto cfg = tiny_config();
  cfg.max_epochs_ft = 10;
  cfg.patience_ft = 3;
  const auto raw = toy_corpus({100, 100}, 1.0);
  auto d = prepare_data(raw, cfg);

  std::vector<corpus::Example> train_and_val = d.train.examples;
  train_and_val.insert(train_and_val.end(), d.val.examples.begin(), d.val.examples.end());
  GuardedSplit peek = d.test;
  peek.unlock();
  CHECK(oracle::bag_of_words_accuracy(train_and_val, peek.read("oracle").examples) == 1.0);

  PhaseContext ctx{9, d.truncation_length, nullptr, std::nullopt};
  const auto r = train_ft(cfg, d.train, d.val, d.test, d.labels, fresh(d, cfg), ctx);
  CHECK(r.test_metrics.accuracy >= 0.95);
  CHECK(d.test.reads() == 1);
  CHECK(d.test.premature_reads() == 0);
  const double best_seen = *std::max_element(r.record.val_curve.begin(), r.record.val_curve.end());
  CHECK(r.record.best_value == best_seen);
  CHECK(r.val_metrics.accuracy == best_seen);
  CHECK(r.record.epochs_run - r.record.best_epoch <= cfg.patience_ft);
  if (r.record.stopped_early) CHECK(r.record.epochs_run - r.record.best_epoch == cfg.patience_ft);

  auto bad = cfg;
  bad.patience_ft = bad.max_epochs_ft;
  CHECK_THROWS_AS(train_ft(bad, d.train, d.val, d.test, d.labels, fresh(d, cfg), ctx), ConfigError);
}

TEST_CASE("ft phase with a frozen encoder") {
  auto cfg = tiny_config();
  cfg.freeze_encoder = true;
  cfg.max_epochs_ft = 3;
  cfg.patience_ft = 2;
  auto d = prepare_data(toy_corpus({30, 30}, 0.8), cfg);
  auto start = fresh(d, cfg);
  const auto before = encoder_values(start);
  PhaseContext ctx{9, d.truncation_length, nullptr, std::nullopt};
  auto r = train_ft(cfg, d.train, d.val, d.test, d.labels, start, ctx);
  CHECK(encoder_values(r.best.encoder) == before);
}

TEST_CASE("head on an external encoder") {
  auto cfg = tiny_config();
  auto d = prepare_data(toy_corpus({40, 40}, 1.0), cfg);
  const auto enc = fresh(d, cfg);
  model::BundleTextEncoder adapter(enc, d.truncation_length);
  PhaseContext ctx{4, d.truncation_length, nullptr, std::nullopt};
  const auto r = train_head_on_encoder(cfg, adapter, d.train, d.val, d.test, d.labels, ctx);
  CHECK(r.test_metrics.total == d.test.size());
  CHECK(d.test.reads() == 1);
  CHECK(r.record.extra.at("external_encoder") == true);
}

TEST_CASE("run_variant: phases per variant and reproducibility") {
  const auto cfg = tiny_config();
  const auto raw = toy_corpus({40, 15}, 0.6);

  const auto ft = run_variant(Variant::kFt, cfg, raw, 1);
  CHECK(ft.status == "complete");
  CHECK(ft.phases.size() == 1);
  CHECK(ft.balance.is_null());

  const auto three = run_variant(Variant::kThreePhase, cfg, raw, 1);
  REQUIRE(three.phases.size() == 3);
  CHECK(three.phases[0].phase == "dae");
  CHECK(three.phases[1].phase == "cl");
  CHECK(three.phases[2].phase == "ft");
  for (const auto& p : three.phases) CHECK(p.checkpoint_hash.size() == 16);
  CHECK(three.test_reads == 1);
  CHECK(three.test_reads_before_ft == 0);
  CHECK(three.balance.at("max_ratio") == 4.0);
  REQUIRE(three.test_metrics);

  const auto again = run_variant(Variant::kThreePhase, cfg, raw, 1);
  CHECK(again.content_json() == three.content_json());
  CHECK(again.content_hash() == three.content_hash());
  const auto other_seed = run_variant(Variant::kThreePhase, cfg, raw, 2);
  CHECK(other_seed.content_hash() != three.content_hash());

  const auto round = RunManifest::from_json(three.to_json());
  CHECK(round.content_hash() == three.content_hash());
}

TEST_CASE("run_variant: ablation settings") {
  const auto cfg = tiny_config();
  const auto raw = toy_corpus({40, 15}, 0.6);
  const auto no_imb = run_variant(Variant::kNoImb, cfg, raw, 1);
  CHECK(no_imb.phases.size() == 3);
  CHECK(no_imb.balance.is_null());
  CHECK(no_imb.phases[1].extra.at("balanced") == false);

  const auto extra = run_variant(Variant::kExtraImb, cfg, raw, 1);
  CHECK(extra.balance.at("min_ratio") == 1.5);
  CHECK(extra.balance.at("max_ratio") == 20.0);

  const auto joint = run_variant(Variant::kJoint, cfg, raw, 1);
  REQUIRE(joint.phases.size() == 2);
  CHECK(joint.phases[0].phase == "joint");
  CHECK(joint.status == "complete");

  const auto dae_ft = run_variant(Variant::kDaeFt, cfg, raw, 1);
  CHECK(dae_ft.phases.size() == 2);
  CHECK(dae_ft.phases[0].phase == "dae");
  const auto cl_ft = run_variant(Variant::kClFt, cfg, raw, 1);
  CHECK(cl_ft.phases.size() == 2);
  CHECK(cl_ft.phases[0].phase == "cl");
}

TEST_CASE("run_variant: divergence is reported, not thrown") {
  auto cfg = tiny_config();
  cfg.learning_rate_dae = cfg.learning_rate_cl = 1e300;
  cfg.max_grad_norm = 0.0;
  const auto m = run_variant(Variant::kDaeFt, cfg, toy_corpus({20, 20}, 0.6), 1);
  CHECK(m.status == "failed");
  CHECK_FALSE(m.note.empty());
  CHECK(m.test_reads == 0);
}

TEST_CASE("checkpoint of the selected classifier reproduces validation metrics") {
  const auto cfg = tiny_config();
  const auto raw = toy_corpus({40, 20}, 0.6);
  const auto dir = std::filesystem::temp_directory_path() / "triphase_train_ckpt";
  std::filesystem::remove_all(dir);
  RunOptions opts;
  opts.output_dir = dir;
  const auto m = run_variant(Variant::kClFt, cfg, raw, 3, opts);
  REQUIRE(m.status == "complete");
  const auto& ft = m.phases.back();
  const auto archive = checkpoint::load_file(dir / ft.checkpoint_path);
  const auto clf = checkpoint::load_classifier(archive);
  const auto d = prepare_data(raw, cfg);
  const auto metrics = evaluate_classifier(clf, d.val, d.labels, d.truncation_length);
  CHECK(std::abs(metrics.accuracy - m.val_metrics->accuracy) < 1e-9);
  CHECK(std::abs(metrics.macro_f1 - m.val_metrics->macro_f1) < 1e-9);
  for (const auto& p : m.phases) CHECK(std::filesystem::exists(dir / p.checkpoint_path));
  std::filesystem::remove_all(dir);
}
