#include "triphase/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "triphase/autograd.hpp"
#include "triphase/checkpoint.hpp"
#include "triphase/errors.hpp"
#include "triphase/losses.hpp"
#include "triphase/optim.hpp"

namespace triphase::train {

using corpus::TokenId;
using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Variants

namespace {
const std::vector<std::pair<Variant, std::string>>& variant_names() {
  static const std::vector<std::pair<Variant, std::string>> names = {
      {Variant::kThreePhase, "3phase"}, {Variant::kJoint, "joint"},   {Variant::kDaeFt, "dae_ft"},
      {Variant::kClFt, "cl_ft"},        {Variant::kExtraImb, "extra_imb"}, {Variant::kNoImb, "no_imb"},
      {Variant::kFt, "ft"}};
  return names;
}
}  // namespace

Variant parse_variant(std::string_view name) {
  for (const auto& [v, n] : variant_names()) {
    if (n == name) return v;
  }
  throw ConfigError("unknown variant '" + std::string(name) +
                    "' (expected 3phase, joint, dae_ft, cl_ft, extra_imb, no_imb or ft)");
}

std::string variant_name(Variant v) {
  for (const auto& [vv, n] : variant_names()) {
    if (vv == v) return n;
  }
  return "?";
}

const std::vector<Variant>& ablation_order() {
  static const std::vector<Variant> order = {Variant::kThreePhase, Variant::kJoint,    Variant::kDaeFt,
                                             Variant::kClFt,       Variant::kExtraImb, Variant::kNoImb,
                                             Variant::kFt};
  return order;
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  std::uint64_t z = base ^ checkpoint::fnv1a(tag);
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Config

namespace {

template <typename C, typename F>
void visit_fields(C& c, F&& f) {
  f("learning_rate_dae", c.learning_rate_dae);
  f("learning_rate_cl", c.learning_rate_cl);
  f("learning_rate_ft", c.learning_rate_ft);
  f("epochs_dae", c.epochs_dae);
  f("epochs_cl", c.epochs_cl);
  f("epochs_joint", c.epochs_joint);
  f("max_epochs_ft", c.max_epochs_ft);
  f("patience_ft", c.patience_ft);
  f("batch_size_dae", c.batch_size_dae);
  f("batch_size_cl", c.batch_size_cl);
  f("batch_size_ft", c.batch_size_ft);
  f("eps_dae", c.eps_dae);
  f("eps_cl", c.eps_cl);
  f("eps_ft", c.eps_ft);
  f("weight_decay", c.weight_decay);
  f("max_grad_norm", c.max_grad_norm);
  f("use_length", c.use_length);
  f("freeze_encoder", c.freeze_encoder);
  f("deleting_ratio", c.deleting_ratio);
  f("corruption_mode", c.corruption_mode);
  f("dae_repeat", c.dae_repeat);
  f("min_ratio", c.min_ratio);
  f("max_ratio", c.max_ratio);
  f("stopword_min_length", c.stopword_min_length);
  f("stopword_delete_frac", c.stopword_delete_frac);
  f("stopwords_file", c.stopwords_file);
  f("pair_factor", c.pair_factor);
  f("max_pairs", c.max_pairs);
  f("pair_passes", c.pair_passes);
  f("joint_weight_dae", c.joint_weight_dae);
  f("joint_weight_cl", c.joint_weight_cl);
  f("hidden", c.model.hidden);
  f("n_blocks", c.model.n_blocks);
  f("n_heads", c.model.n_heads);
  f("ffn_dim", c.model.ffn_dim);
  f("max_positions", c.model.max_positions);
  f("head_activation", c.model.head_activation);
  f("init_std", c.model.init_std);
  f("max_vocab", c.max_vocab);
  f("val_frac", c.val_frac);
  f("test_frac", c.test_frac);
  f("split_seed", c.split_seed);
}

template <typename T>
void assign_field(const char* key, T& field, const nlohmann::json& v) {
  const std::string k = key;
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError("config key '" + k + "' expects true/false");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<long long>() < 0)) {
      throw ConfigError("config key '" + k + "' expects a non-negative integer");
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError("config key '" + k + "' expects a number");
  } else {
    if (!v.is_string()) throw ConfigError("config key '" + k + "' expects a string");
  }
  field = v.get<T>();
}

void set_key(TrainConfig& cfg, const std::string& key, const nlohmann::json& value) {
  bool found = false;
  visit_fields(cfg, [&](const char* name, auto& field) {
    if (key == name) {
      assign_field(name, field, value);
      found = true;
    }
  });
  if (!found) throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void TrainConfig::validate() const {
  for (double lr : {learning_rate_dae, learning_rate_cl, learning_rate_ft}) {
    if (!(lr > 0.0)) throw ConfigError("learning rates must be positive");
  }
  for (auto b : {batch_size_dae, batch_size_cl, batch_size_ft}) {
    if (b < 1) throw ConfigError("batch sizes must be >= 1");
  }
  if (max_epochs_ft < 1) throw ConfigError("max_epochs_ft must be >= 1");
  if (patience_ft >= max_epochs_ft) throw ConfigError("patience_ft must be smaller than max_epochs_ft");
  if (patience_ft < 1) throw ConfigError("patience_ft must be >= 1");
  if (min_ratio > max_ratio) throw ConfigError("min_ratio must not exceed max_ratio");
  if (!(pair_factor > 0.0)) throw ConfigError("pair_factor must be positive");
  if (dae_repeat < 1) throw ConfigError("dae_repeat must be >= 1");
  if (val_frac < 0.0 || test_frac < 0.0 || val_frac + test_frac >= 1.0) {
    throw ConfigError("val_frac and test_frac must be non-negative and sum to less than 1");
  }
  corruption().validate();
  stopword_noise().validate();
  model::ModelConfig m = model;
  m.vocab_size = std::max<std::size_t>(m.vocab_size, 64);
  m.validate();
}

nlohmann::json TrainConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  visit_fields(*this, [&](const char* name, const auto& field) { j[name] = field; });
  return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  TrainConfig cfg;
  for (const auto& [key, value] : j.items()) set_key(cfg, key, value);
  if (!j.contains("learning_rate_cl")) cfg.learning_rate_cl = cfg.learning_rate_dae;
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::with_overrides(const TrainConfig& base, const std::vector<std::string>& assignments) {
  TrainConfig cfg = base;
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + a + "' is not key=value");
    const std::string key = a.substr(0, eq);
    const std::string raw = a.substr(eq + 1);
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
      value = raw;
    }
    // Keep string-typed keys as strings even if the text parses as a number.
    if (key == "corruption_mode" || key == "stopwords_file" || key == "head_activation") value = raw;
    set_key(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

noise::CorruptionConfig TrainConfig::corruption() const {
  noise::CorruptionConfig c;
  c.ratio = deleting_ratio;
  c.mode = noise::parse_mode(corruption_mode);
  return c;
}

noise::StopwordNoiseConfig TrainConfig::stopword_noise() const {
  auto c = noise::default_stopword_noise();
  if (!stopwords_file.empty()) c.stopwords = noise::load_stopwords(stopwords_file);
  c.min_length = stopword_min_length;
  c.delete_frac = stopword_delete_frac;
  return c;
}

// ---------------------------------------------------------------------------
// Data

const corpus::Dataset& GuardedSplit::read(std::string_view phase) {
  if (locked_) {
    ++premature_reads_;
    throw std::logic_error("held-out split read during phase '" + std::string(phase) + "' before evaluation");
  }
  ++reads_;
  return data_;
}

PreparedData prepare_data(const corpus::Dataset& raw, const TrainConfig& cfg, const corpus::Dataset* unlabelled) {
  PreparedData out;
  out.labels = corpus::LabelSpace(raw.examples);
  auto splits = corpus::split_dataset(raw, cfg.val_frac, cfg.test_frac, cfg.split_seed);
  out.warnings = splits.warnings;
  if (splits.train.empty()) throw ConfigError("training split is empty");

  if (unlabelled) out.unlabelled.examples = unlabelled->examples;
  std::vector<corpus::Example> vocab_source = splits.train.examples;
  vocab_source.insert(vocab_source.end(), out.unlabelled.examples.begin(), out.unlabelled.examples.end());
  out.vocab = corpus::Vocab::build(vocab_source, cfg.max_vocab);
  auto tokenize = [&](corpus::Dataset& d, const char* name) {
    out.vocab.tokenize_all(d.examples);
    const auto before = d.examples.size();
    std::erase_if(d.examples, [](const corpus::Example& e) { return e.tokens.empty(); });
    if (d.examples.size() != before) {
      out.warnings.push_back(std::to_string(before - d.examples.size()) + " " + name +
                             " examples produced no tokens and were dropped");
    }
    d.vocab = out.vocab;
  };
  auto finish = [&](corpus::Dataset& d, const char* name) {
    tokenize(d, name);
    d.levels = raw.levels;
    d.rebuild_index();
  };
  finish(splits.train, "train");
  finish(splits.val, "validation");
  finish(splits.test, "test");
  tokenize(out.unlabelled, "unlabelled");

  const std::size_t cap = cfg.model.max_positions - 1;  // decoder needs room for BOS
  out.truncation_length = cfg.use_length == 0 ? corpus::estimate_max_length(splits.train, 0.1, 1.2, cap)
                                              : std::min(cfg.use_length, cap);

  std::vector<std::pair<std::string, corpus::CorpusStats>> stats{{"train", corpus::compute_stats(splits.train)},
                                                                {"validation", corpus::compute_stats(splits.val)},
                                                                {"test", corpus::compute_stats(splits.test)}};
  if (unlabelled) stats.emplace_back("unlabelled", corpus::compute_stats(out.unlabelled));
  out.stats = corpus::stats_to_json(stats);
  out.train = std::move(splits.train);
  out.val = std::move(splits.val);
  out.test = GuardedSplit(std::move(splits.test));
  return out;
}

// ---------------------------------------------------------------------------
// Helpers

namespace {

void log_line(const PhaseContext& ctx, const std::string& line) {
  if (ctx.log) *ctx.log << line << std::endl;
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

void check_finite(double v, const std::string& phase) {
  if (!std::isfinite(v)) throw TrainingError(phase + " loss diverged (non-finite value)");
}

std::vector<std::size_t> shuffled_indices(std::size_t n, std::size_t repeat, Rng& rng) {
  std::vector<std::size_t> idx;
  idx.reserve(n * repeat);
  for (std::size_t r = 0; r < repeat; ++r) {
    for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
  }
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

void require_validation(const corpus::Dataset& val, const std::string& phase) {
  if (val.empty()) throw ConfigError(phase + " phase needs a non-empty validation split for model selection");
}

std::vector<model::NamedParameter> concat(std::vector<model::NamedParameter> a,
                                          const std::vector<model::NamedParameter>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

void attach_checkpoint(PhaseRecord& record, const PhaseContext& ctx, const model::ModelConfig& mc,
                       const nlohmann::json& meta, const std::vector<model::NamedParameter>& params) {
  const auto bytes = checkpoint::serialize(mc, meta, params);
  record.checkpoint_hash = checkpoint::hex64(checkpoint::fnv1a(bytes));
  if (ctx.checkpoint_dir) {
    const auto path = *ctx.checkpoint_dir / (record.phase + ".ckpt");
    checkpoint::save_file(path, mc, meta, params);
    record.checkpoint_path = path.filename().string();
  }
}

struct DaeExample {
  std::vector<TokenId> source;
  std::vector<TokenId> prefix;
  std::vector<TokenId> targets;
};

DaeExample dae_example(std::span<const TokenId> tokens, std::size_t trunc, std::size_t max_positions) {
  DaeExample d;
  d.source = model::truncate(tokens, trunc, max_positions - 1);
  d.prefix.push_back(corpus::special::kBos);
  d.prefix.insert(d.prefix.end(), d.source.begin(), d.source.end());
  d.targets = d.source;
  d.targets.push_back(corpus::special::kEos);
  return d;
}

// Reconstruction loss summed over tokens for one example; returns the graph node.
ag::Var dae_example_loss(const model::EncoderBundle& enc, const model::DecoderBundle& dec, const DaeExample& d,
                         const noise::CorruptionConfig& corruption, std::size_t trunc, Rng& rng) {
  const auto corrupted = noise::corrupt_tokens(d.source, corruption, rng);
  const auto encoded = enc.forward(corrupted, trunc);
  const auto logits = dec.decode_logits(encoded.bottleneck, d.prefix);
  return ag::cross_entropy_sum(logits, d.targets);
}

double validation_dae_loss(const model::EncoderBundle& enc, const model::DecoderBundle& dec,
                           const corpus::Dataset& val, const noise::CorruptionConfig& corruption, std::size_t trunc,
                           std::uint64_t seed) {
  ag::NoGradGuard no_grad;
  Rng rng(seed);
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : val.examples) {
    const auto d = dae_example(ex.tokens, trunc, enc.config().max_positions);
    total += dae_example_loss(enc, dec, d, corruption, trunc, rng).scalar();
    tokens += d.targets.size();
  }
  return total / static_cast<double>(tokens);
}

double validation_cl_loss(const model::EncoderBundle& enc, std::span<const corpus::Example> examples,
                          std::span<const balance::LabeledPair> pairs, std::size_t trunc) {
  if (pairs.empty()) return 0.0;
  ag::NoGradGuard no_grad;
  std::vector<ag::RowVector> cache(examples.size());
  std::vector<bool> have(examples.size(), false);
  auto vec = [&](std::size_t i) -> const ag::RowVector& {
    if (!have[i]) {
      cache[i] = enc.encode(examples[i].tokens, trunc);
      have[i] = true;
    }
    return cache[i];
  };
  double total = 0.0;
  for (const auto& p : pairs) total += losses::cl_loss(vec(p.left), vec(p.right), p.similarity).value;
  return total / static_cast<double>(pairs.size());
}

ag::Var pair_loss(const model::EncoderBundle& enc, std::span<const corpus::Example> examples,
                  const balance::LabeledPair& p, std::size_t trunc) {
  const auto u = enc.forward(examples[p.left].tokens, trunc).output;
  const auto v = enc.forward(examples[p.right].tokens, trunc).output;
  return ag::squared_error(ag::cosine(u, v), p.similarity);
}

optim::AdamWConfig adam(const TrainConfig& cfg, double lr, double eps) {
  optim::AdamWConfig a;
  a.learning_rate = lr;
  a.eps = eps;
  a.weight_decay = cfg.weight_decay;
  a.max_grad_norm = cfg.max_grad_norm;
  return a;
}

nlohmann::json encoder_meta(const std::string& phase) { return {{"kind", "encoder"}, {"phase", phase}}; }

}  // namespace

nlohmann::json PhaseRecord::to_json() const {
  return {{"phase", phase},
          {"metric", metric},
          {"higher_is_better", higher_is_better},
          {"val_curve", val_curve},
          {"train_curve", train_curve},
          {"best_epoch", best_epoch},
          {"best_value", best_value},
          {"epochs_run", epochs_run},
          {"stopped_early", stopped_early},
          {"checkpoint", {{"path", checkpoint_path}, {"hash", checkpoint_hash}}},
          {"extra", extra}};
}

// ---------------------------------------------------------------------------
// Phase 1

RepresentationResult train_dae(const TrainConfig& cfg, const corpus::Dataset& train, const corpus::Dataset& val,
                               model::EncoderBundle bundle, model::DecoderBundle decoder, const PhaseContext& ctx) {
  require_validation(val, "dae");
  if (decoder.config().hidden != bundle.dim()) throw std::invalid_argument("decoder and encoder widths differ");
  Rng rng(derive_seed(ctx.seed, "dae"));
  const auto corruption = cfg.corruption();
  const auto trunc = ctx.truncation_length;
  const auto max_pos = bundle.config().max_positions;

  optim::AdamW opt(concat(bundle.parameters(), decoder.parameters()), adam(cfg, cfg.learning_rate_dae, cfg.eps_dae));
  auto val_loss = [&](std::size_t epoch) {
    return validation_dae_loss(bundle, decoder, val, corruption, trunc,
                               derive_seed(ctx.seed + epoch, "dae-validation"));
  };

  RepresentationResult res;
  res.record.phase = "dae";
  res.record.metric = "val_dae_loss";
  res.record.val_curve.push_back(val_loss(0));
  res.record.best_value = res.record.val_curve.back();
  res.best = bundle;
  log_line(ctx, "[dae] epoch 0 val_loss " + fmt(res.record.best_value));

  std::vector<DaeExample> items;
  items.reserve(train.size());
  for (const auto& ex : train.examples) items.push_back(dae_example(ex.tokens, trunc, max_pos));

  for (std::size_t epoch = 1; epoch <= cfg.epochs_dae; ++epoch) {
    const auto order = shuffled_indices(items.size(), cfg.dae_repeat, rng);
    double epoch_total = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size_dae) {
      const auto end = std::min(order.size(), start + cfg.batch_size_dae);
      std::size_t batch_tokens = 0;
      for (std::size_t i = start; i < end; ++i) batch_tokens += items[order[i]].targets.size();
      for (std::size_t i = start; i < end; ++i) {
        const auto loss = dae_example_loss(bundle, decoder, items[order[i]], corruption, trunc, rng);
        epoch_total += loss.scalar();
        ag::backward(loss, 1.0 / static_cast<double>(batch_tokens));
      }
      epoch_tokens += batch_tokens;
      opt.step();
    }
    const double train_loss = epoch_total / static_cast<double>(std::max<std::size_t>(epoch_tokens, 1));
    check_finite(train_loss, "dae");
    const double v = val_loss(epoch);
    check_finite(v, "dae validation");
    res.record.train_curve.push_back(train_loss);
    res.record.val_curve.push_back(v);
    res.record.epochs_run = epoch;
    if (v < res.record.best_value) {
      res.record.best_value = v;
      res.record.best_epoch = epoch;
      res.best = bundle;
    }
    log_line(ctx, "[dae] epoch " + std::to_string(epoch) + " train_loss " + fmt(train_loss) + " val_loss " + fmt(v));
  }
  attach_checkpoint(res.record, ctx, res.best.config(), encoder_meta("dae"), res.best.parameters());
  return res;
}

// ---------------------------------------------------------------------------
// Phase 2

PairSets build_pairs(const TrainConfig& cfg, const corpus::Dataset& train, const corpus::Dataset& val,
                     const PairingOptions& opts, std::uint64_t seed) {
  if (train.class_index.size() < 2) throw std::invalid_argument("contrastive training needs at least two classes");
  PairSets out;
  Rng rng(derive_seed(seed, "pairs"));
  if (opts.balance) {
    out.plan = balance::plan_balance(balance::class_sizes(train), opts.min_ratio, opts.max_ratio);
    out.train_examples = balance::apply_plan(train, *out.plan, cfg.stopword_noise(), rng);
  } else {
    out.train_examples = train.examples;
  }

  auto pair_cfg = [&](std::size_t n) {
    balance::PairConfig pc;
    pc.target_pairs = static_cast<std::size_t>(std::ceil(cfg.pair_factor * static_cast<double>(n)));
    if (cfg.max_pairs > 0) pc.max_pairs = cfg.max_pairs;
    pc.max_passes = cfg.pair_passes;
    return pc;
  };
  out.train_pairs =
      balance::make_pairs(out.train_examples, train.levels, rng, pair_cfg(out.train_examples.size()));
  Rng val_rng(derive_seed(seed, "val-pairs"));
  out.val_pairs = balance::make_pairs(val.examples, val.levels == 0 ? train.levels : val.levels, val_rng,
                                      pair_cfg(val.examples.size()));
  return out;
}

RepresentationResult train_cl(const TrainConfig& cfg, const corpus::Dataset& train, const corpus::Dataset& val,
                              model::EncoderBundle bundle, const PairingOptions& opts, const PhaseContext& ctx) {
  require_validation(val, "cl");
  Rng rng(derive_seed(ctx.seed, "cl"));
  if (!bundle.has_projection()) bundle.attach_projection(rng);
  const auto trunc = ctx.truncation_length;
  const auto pairs = build_pairs(cfg, train, val, opts, ctx.seed);
  if (pairs.val_pairs.empty()) throw ConfigError("validation split too small to form pairs");

  optim::AdamW opt(bundle.parameters(), adam(cfg, cfg.learning_rate_cl, cfg.eps_cl));
  auto val_loss = [&] { return validation_cl_loss(bundle, val.examples, pairs.val_pairs, trunc); };

  RepresentationResult res;
  res.record.phase = "cl";
  res.record.metric = "val_cl_loss";
  res.record.extra["train_examples"] = pairs.train_examples.size();
  res.record.extra["train_pairs"] = pairs.train_pairs.size();
  res.record.extra["val_pairs"] = pairs.val_pairs.size();
  res.record.extra["balanced"] = opts.balance;
  if (pairs.plan) res.record.extra["balance"] = pairs.plan->to_json();
  res.record.val_curve.push_back(val_loss());
  res.record.best_value = res.record.val_curve.back();
  res.best = bundle;
  log_line(ctx, "[cl] epoch 0 val_loss " + fmt(res.record.best_value) + " (" +
                    std::to_string(pairs.train_pairs.size()) + " training pairs)");

  for (std::size_t epoch = 1; epoch <= cfg.epochs_cl; ++epoch) {
    const auto order = shuffled_indices(pairs.train_pairs.size(), 1, rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size_cl) {
      const auto end = std::min(order.size(), start + cfg.batch_size_cl);
      const double w = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto loss = pair_loss(bundle, pairs.train_examples, pairs.train_pairs[order[i]], trunc);
        total += loss.scalar();
        ag::backward(loss, w);
      }
      opt.step();
    }
    const double train_loss = total / static_cast<double>(std::max<std::size_t>(order.size(), 1));
    check_finite(train_loss, "cl");
    const double v = val_loss();
    check_finite(v, "cl validation");
    res.record.train_curve.push_back(train_loss);
    res.record.val_curve.push_back(v);
    res.record.epochs_run = epoch;
    if (v < res.record.best_value) {
      res.record.best_value = v;
      res.record.best_epoch = epoch;
      res.best = bundle;
    }
    log_line(ctx, "[cl] epoch " + std::to_string(epoch) + " train_loss " + fmt(train_loss) + " val_loss " + fmt(v));
  }
  attach_checkpoint(res.record, ctx, res.best.config(), encoder_meta("cl"), res.best.parameters());
  return res;
}

// ---------------------------------------------------------------------------
// Joint phases 1 + 2

RepresentationResult train_joint(const TrainConfig& cfg, const corpus::Dataset& train, const corpus::Dataset& val,
                                 model::EncoderBundle bundle, model::DecoderBundle decoder,
                                 const PairingOptions& opts, const PhaseContext& ctx) {
  require_validation(val, "joint");
  Rng rng(derive_seed(ctx.seed, "joint"));
  if (!bundle.has_projection()) bundle.attach_projection(rng);
  const auto trunc = ctx.truncation_length;
  const auto max_pos = bundle.config().max_positions;
  const auto corruption = cfg.corruption();
  const auto pairs = build_pairs(cfg, train, val, opts, ctx.seed);
  if (pairs.val_pairs.empty()) throw ConfigError("validation split too small to form pairs");

  std::vector<DaeExample> items;
  for (const auto& ex : train.examples) items.push_back(dae_example(ex.tokens, trunc, max_pos));

  optim::AdamW opt(concat(bundle.parameters(), decoder.parameters()), adam(cfg, cfg.learning_rate_dae, cfg.eps_dae));
  auto val_loss = [&](std::size_t epoch) {
    const double d = validation_dae_loss(bundle, decoder, val, corruption, trunc,
                                         derive_seed(ctx.seed + epoch, "dae-validation"));
    const double c = validation_cl_loss(bundle, val.examples, pairs.val_pairs, trunc);
    return losses::joint_loss({d, 1, 0}, {c, 1, 0}, cfg.joint_weight_dae, cfg.joint_weight_cl).value;
  };

  RepresentationResult res;
  res.record.phase = "joint";
  res.record.metric = "val_joint_loss";
  res.record.extra["train_pairs"] = pairs.train_pairs.size();
  res.record.extra["balanced"] = opts.balance;
  if (pairs.plan) res.record.extra["balance"] = pairs.plan->to_json();
  res.record.val_curve.push_back(val_loss(0));
  res.record.best_value = res.record.val_curve.back();
  res.best = bundle;
  log_line(ctx, "[joint] epoch 0 val_loss " + fmt(res.record.best_value));

  std::vector<std::size_t> dae_order;
  std::size_t dae_pos = 0;
  auto next_dae = [&]() -> const DaeExample& {
    if (dae_pos >= dae_order.size()) {
      dae_order = shuffled_indices(items.size(), 1, rng);
      dae_pos = 0;
    }
    return items[dae_order[dae_pos++]];
  };

  for (std::size_t epoch = 1; epoch <= cfg.epochs_joint; ++epoch) {
    const auto order = shuffled_indices(pairs.train_pairs.size(), 1, rng);
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size_cl) {
      const auto end = std::min(order.size(), start + cfg.batch_size_cl);
      // One reconstruction batch and one pair batch per update; the gradients of both terms add up.
      std::vector<const DaeExample*> dae_batch;
      std::size_t batch_tokens = 0;
      for (std::size_t i = 0; i < cfg.batch_size_dae; ++i) {
        dae_batch.push_back(&next_dae());
        batch_tokens += dae_batch.back()->targets.size();
      }
      double dae_sum = 0.0;
      for (const auto* d : dae_batch) {
        const auto loss = dae_example_loss(bundle, decoder, *d, corruption, trunc, rng);
        dae_sum += loss.scalar();
        ag::backward(loss, cfg.joint_weight_dae / static_cast<double>(batch_tokens));
      }
      double cl_sum = 0.0;
      const double w = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto loss = pair_loss(bundle, pairs.train_examples, pairs.train_pairs[order[i]], trunc);
        cl_sum += loss.scalar();
        ag::backward(loss, cfg.joint_weight_cl * w);
      }
      opt.step();
      total += losses::joint_loss({dae_sum / static_cast<double>(batch_tokens), 1, 0}, {cl_sum * w, 1, 0},
                                  cfg.joint_weight_dae, cfg.joint_weight_cl)
                   .value;
      ++steps;
    }
    const double train_loss = total / static_cast<double>(std::max<std::size_t>(steps, 1));
    check_finite(train_loss, "joint");
    const double v = val_loss(epoch);
    check_finite(v, "joint validation");
    res.record.train_curve.push_back(train_loss);
    res.record.val_curve.push_back(v);
    res.record.epochs_run = epoch;
    if (v < res.record.best_value) {
      res.record.best_value = v;
      res.record.best_epoch = epoch;
      res.best = bundle;
    }
    log_line(ctx, "[joint] epoch " + std::to_string(epoch) + " train_loss " + fmt(train_loss) + " val_loss " + fmt(v));
  }
  attach_checkpoint(res.record, ctx, res.best.config(), encoder_meta("joint"), res.best.parameters());
  return res;
}

// ---------------------------------------------------------------------------
// Phase 3

metrics::MetricsReport evaluate_classifier(const model::Classifier& clf, const corpus::Dataset& ds,
                                           const corpus::LabelSpace& labels, std::size_t truncation_length) {
  std::vector<std::size_t> preds;
  std::vector<std::size_t> targets;
  preds.reserve(ds.size());
  targets.reserve(ds.size());
  for (const auto& ex : ds.examples) {
    preds.push_back(clf.predict(ex.tokens, truncation_length));
    targets.push_back(labels.class_of(ex.label_path));
  }
  return metrics::evaluate(preds, targets, labels.size());
}

FineTuneResult train_ft(const TrainConfig& cfg, const corpus::Dataset& train, const corpus::Dataset& val,
                        GuardedSplit& test, const corpus::LabelSpace& labels, model::EncoderBundle bundle,
                        const PhaseContext& ctx) {
  if (cfg.patience_ft >= cfg.max_epochs_ft) throw ConfigError("patience_ft must be smaller than max_epochs_ft");
  require_validation(val, "ft");
  if (labels.size() < 2) throw std::invalid_argument("classification needs at least two classes");
  const auto trunc = ctx.truncation_length;
  Rng rng(derive_seed(ctx.seed, "ft"));

  model::Classifier clf;
  bundle.set_frozen(cfg.freeze_encoder);
  clf.encoder = std::move(bundle);
  clf.head = model::ClassifierHead(clf.encoder.dim(), labels.size(), cfg.model.head_activation, rng);

  std::vector<int> train_targets;
  for (const auto& ex : train.examples) train_targets.push_back(static_cast<int>(labels.class_of(ex.label_path)));

  optim::AdamW opt(clf.parameters(), adam(cfg, cfg.learning_rate_ft, cfg.eps_ft));

  FineTuneResult res;
  res.record.phase = "ft";
  res.record.metric = "val_accuracy";
  res.record.higher_is_better = true;
  res.record.extra["frozen_encoder"] = cfg.freeze_encoder;
  res.best = clf;
  double best_acc = -1.0;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs_ft; ++epoch) {
    const auto order = shuffled_indices(train.size(), 1, rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size_ft) {
      const auto end = std::min(order.size(), start + cfg.batch_size_ft);
      const double w = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = train.examples[order[i]];
        const auto logits = clf.head.logits(clf.encoder.forward(ex.tokens, trunc).output);
        const int target = train_targets[order[i]];
        const auto loss = ag::cross_entropy_sum(logits, std::span<const int>(&target, 1));
        total += loss.scalar();
        ag::backward(loss, w);
      }
      opt.step();
    }
    const double train_loss = total / static_cast<double>(std::max<std::size_t>(order.size(), 1));
    check_finite(train_loss, "ft");
    const double acc = evaluate_classifier(clf, val, labels, trunc).accuracy;
    res.record.train_curve.push_back(train_loss);
    res.record.val_curve.push_back(acc);
    res.record.epochs_run = epoch;
    if (acc > best_acc) {
      best_acc = acc;
      res.record.best_epoch = epoch;
      res.record.best_value = acc;
      res.best = clf;
      since_best = 0;
    } else {
      ++since_best;
    }
    log_line(ctx, "[ft] epoch " + std::to_string(epoch) + " train_loss " + fmt(train_loss) + " val_acc " + fmt(acc));
    if (since_best >= cfg.patience_ft) {
      res.record.stopped_early = epoch < cfg.max_epochs_ft;
      break;
    }
  }

  res.val_metrics = evaluate_classifier(res.best, val, labels, trunc);
  test.unlock();
  const auto& held_out = test.read("ft");
  if (!held_out.empty()) res.test_metrics = evaluate_classifier(res.best, held_out, labels, trunc);

  nlohmann::json meta{{"kind", "classifier"},
                      {"phase", "ft"},
                      {"classes", labels.size()},
                      {"labels", labels.to_json()},
                      {"truncation_length", trunc}};
  attach_checkpoint(res.record, ctx, res.best.encoder.config(), meta, res.best.parameters());
  return res;
}

HeadResult train_head_on_encoder(const TrainConfig& cfg, const model::TextEncoder& encoder,
                                 const corpus::Dataset& train, const corpus::Dataset& val, GuardedSplit& test,
                                 const corpus::LabelSpace& labels, const PhaseContext& ctx) {
  if (cfg.patience_ft >= cfg.max_epochs_ft) throw ConfigError("patience_ft must be smaller than max_epochs_ft");
  require_validation(val, "ft");
  Rng rng(derive_seed(ctx.seed, "ft-external"));
  auto features = [&](const corpus::Dataset& ds) {
    std::vector<ag::RowVector> f;
    for (const auto& ex : ds.examples) f.push_back(encoder.encode(ex.tokens));
    return f;
  };
  auto predict_all = [&](const model::ClassifierHead& head, const std::vector<ag::RowVector>& feats,
                         const corpus::Dataset& ds) {
    std::vector<std::size_t> preds, targets;
    for (std::size_t i = 0; i < feats.size(); ++i) {
      preds.push_back(model::argmax(head.probabilities(feats[i])));
      targets.push_back(labels.class_of(ds.examples[i].label_path));
    }
    return metrics::evaluate(preds, targets, labels.size());
  };

  const auto train_f = features(train);
  const auto val_f = features(val);
  model::ClassifierHead head(encoder.dim(), labels.size(), cfg.model.head_activation, rng);
  optim::AdamW opt(head.parameters(), adam(cfg, cfg.learning_rate_ft, cfg.eps_ft));

  HeadResult res;
  res.record.phase = "ft";
  res.record.metric = "val_accuracy";
  res.record.higher_is_better = true;
  res.record.extra["external_encoder"] = true;
  res.head = head;
  double best_acc = -1.0;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs_ft; ++epoch) {
    const auto order = shuffled_indices(train.size(), 1, rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size_ft) {
      const auto end = std::min(order.size(), start + cfg.batch_size_ft);
      for (std::size_t i = start; i < end; ++i) {
        const int target = static_cast<int>(labels.class_of(train.examples[order[i]].label_path));
        const auto loss = ag::cross_entropy_sum(head.logits(ag::constant(train_f[order[i]])),
                                                std::span<const int>(&target, 1));
        total += loss.scalar();
        ag::backward(loss, 1.0 / static_cast<double>(end - start));
      }
      opt.step();
    }
    const double acc = predict_all(head, val_f, val).accuracy;
    res.record.train_curve.push_back(total / static_cast<double>(std::max<std::size_t>(order.size(), 1)));
    res.record.val_curve.push_back(acc);
    res.record.epochs_run = epoch;
    if (acc > best_acc) {
      best_acc = acc;
      res.record.best_epoch = epoch;
      res.record.best_value = acc;
      res.head = head;
      since_best = 0;
    } else if (++since_best >= cfg.patience_ft) {
      res.record.stopped_early = epoch < cfg.max_epochs_ft;
      break;
    }
  }
  test.unlock();
  const auto& held_out = test.read("ft");
  if (!held_out.empty()) res.test_metrics = predict_all(res.head, features(held_out), held_out);
  return res;
}

// ---------------------------------------------------------------------------
// Manifest

nlohmann::json RunManifest::content_json() const {
  nlohmann::json phases_json = nlohmann::json::array();
  for (const auto& p : phases) phases_json.push_back(p.to_json());
  return {{"variant", variant},
          {"seed", seed},
          {"status", status},
          {"note", note},
          {"config", config},
          {"phases", phases_json},
          {"val_metrics", val_metrics ? val_metrics->to_json(class_names) : nlohmann::json(nullptr)},
          {"test_metrics", test_metrics ? test_metrics->to_json(class_names) : nlohmann::json(nullptr)},
          {"class_names", class_names},
          {"balance", balance},
          {"truncation_length", truncation_length},
          {"test_split_guard", {{"reads", test_reads}, {"reads_before_ft", test_reads_before_ft}}},
          {"data_stats", data_stats},
          {"warnings", warnings}};
}

std::string RunManifest::content_hash() const { return checkpoint::hex64(checkpoint::fnv1a(content_json().dump())); }

nlohmann::json RunManifest::to_json() const {
  auto j = content_json();
  j["content_hash"] = content_hash();
  j["timestamps"] = timestamps;
  return j;
}

RunManifest RunManifest::from_json(const nlohmann::json& j) {
  RunManifest m;
  m.variant = j.at("variant").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.status = j.at("status").get<std::string>();
  m.note = j.value("note", "");
  m.config = j.value("config", nlohmann::json::object());
  for (const auto& p : j.value("phases", nlohmann::json::array())) {
    PhaseRecord r;
    r.phase = p.at("phase").get<std::string>();
    r.metric = p.at("metric").get<std::string>();
    r.higher_is_better = p.value("higher_is_better", false);
    r.val_curve = p.value("val_curve", std::vector<double>{});
    r.train_curve = p.value("train_curve", std::vector<double>{});
    r.best_epoch = p.value("best_epoch", std::size_t{0});
    r.best_value = p.value("best_value", 0.0);
    r.epochs_run = p.value("epochs_run", std::size_t{0});
    r.stopped_early = p.value("stopped_early", false);
    if (p.contains("checkpoint")) {
      r.checkpoint_path = p["checkpoint"].value("path", "");
      r.checkpoint_hash = p["checkpoint"].value("hash", "");
    }
    r.extra = p.value("extra", nlohmann::json::object());
    m.phases.push_back(std::move(r));
  }
  if (j.contains("val_metrics") && !j["val_metrics"].is_null()) {
    m.val_metrics = metrics::MetricsReport::from_json(j["val_metrics"]);
  }
  if (j.contains("test_metrics") && !j["test_metrics"].is_null()) {
    m.test_metrics = metrics::MetricsReport::from_json(j["test_metrics"]);
  }
  m.class_names = j.value("class_names", std::vector<std::string>{});
  m.balance = j.value("balance", nlohmann::json(nullptr));
  m.truncation_length = j.value("truncation_length", std::size_t{0});
  if (j.contains("test_split_guard")) {
    m.test_reads = j["test_split_guard"].value("reads", std::size_t{0});
    m.test_reads_before_ft = j["test_split_guard"].value("reads_before_ft", std::size_t{0});
  }
  m.data_stats = j.value("data_stats", nlohmann::json(nullptr));
  m.warnings = j.value("warnings", std::vector<std::string>{});
  m.timestamps = j.value("timestamps", nlohmann::json::object());
  return m;
}

// ---------------------------------------------------------------------------
// Variant runner

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

RunManifest run_variant(Variant v, const TrainConfig& cfg, const corpus::Dataset& raw, std::uint64_t seed,
                        const RunOptions& opts) {
  cfg.validate();
  RunManifest m;
  m.variant = variant_name(v);
  m.seed = seed;
  m.config = cfg.to_json();
  m.timestamps["started"] = utc_now();

  auto data = prepare_data(raw, cfg, opts.unlabelled);
  m.truncation_length = data.truncation_length;
  m.data_stats = data.stats;
  m.warnings = data.warnings;
  for (std::size_t k = 0; k < data.labels.size(); ++k) m.class_names.push_back(data.labels.name(k));

  auto progress = [&] {
    m.test_reads = data.test.reads();
    m.test_reads_before_ft = data.test.premature_reads();
    if (opts.on_progress) opts.on_progress(m);
  };
  progress();

  model::ModelConfig mc = cfg.model;
  mc.vocab_size = data.vocab.size();
  if (opts.output_dir) std::filesystem::create_directories(*opts.output_dir);
  PhaseContext ctx{seed, data.truncation_length, opts.log, opts.output_dir};

  const auto t0 = std::chrono::steady_clock::now();
  try {
    Rng init_rng(derive_seed(seed, "encoder-init"));
    model::EncoderBundle bundle(mc, init_rng);
    auto make_decoder = [&] {
      Rng dec_rng(derive_seed(seed, "decoder-init"));
      return model::DecoderBundle(mc, dec_rng);
    };
    PairingOptions pairing{true, cfg.min_ratio, cfg.max_ratio};
    if (v == Variant::kNoImb) pairing.balance = false;
    if (v == Variant::kExtraImb) {
      pairing.min_ratio = 1.5;
      pairing.max_ratio = 20.0;
    }

    const bool run_dae = v == Variant::kThreePhase || v == Variant::kDaeFt || v == Variant::kNoImb ||
                         v == Variant::kExtraImb;
    const bool run_cl = v == Variant::kThreePhase || v == Variant::kClFt || v == Variant::kNoImb ||
                        v == Variant::kExtraImb;

    if (v == Variant::kJoint) {
      auto r = train_joint(cfg, data.train, data.val, std::move(bundle), make_decoder(), pairing, ctx);
      bundle = std::move(r.best);
      if (r.record.extra.contains("balance")) m.balance = r.record.extra["balance"];
      m.phases.push_back(std::move(r.record));
      progress();
    }
    if (run_dae) {
      corpus::Dataset dae_train = data.train;
      dae_train.examples.insert(dae_train.examples.end(), data.unlabelled.examples.begin(),
                                data.unlabelled.examples.end());
      auto r = train_dae(cfg, dae_train, data.val, std::move(bundle), make_decoder(), ctx);
      bundle = std::move(r.best);
      m.phases.push_back(std::move(r.record));
      progress();
    }
    if (run_cl) {
      auto r = train_cl(cfg, data.train, data.val, std::move(bundle), pairing, ctx);
      bundle = std::move(r.best);
      if (r.record.extra.contains("balance")) m.balance = r.record.extra["balance"];
      m.phases.push_back(std::move(r.record));
      progress();
    }
    auto ft = train_ft(cfg, data.train, data.val, data.test, data.labels, std::move(bundle), ctx);
    m.phases.push_back(std::move(ft.record));
    m.val_metrics = ft.val_metrics;
    if (ft.test_metrics.total > 0) m.test_metrics = ft.test_metrics;
    m.status = "complete";
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    m.status = "failed";
    m.note = e.what();
  }
  m.test_reads = data.test.reads();
  m.test_reads_before_ft = data.test.premature_reads();
  m.timestamps["finished"] = utc_now();
  m.timestamps["wall_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

}  // namespace triphase::train
