#include "triphase/model.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "triphase/errors.hpp"

namespace triphase::model {

namespace {

ag::Matrix random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  ag::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

double xavier(std::size_t in, std::size_t out) { return std::sqrt(2.0 / static_cast<double>(in + out)); }

std::vector<int> positions(std::size_t n) {
  std::vector<int> p(n);
  std::iota(p.begin(), p.end(), 0);
  return p;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(corpus::special::kCount)) throw ConfigError("vocab_size too small");
  if (hidden == 0 || n_heads == 0 || hidden % n_heads != 0) throw ConfigError("hidden must be divisible by n_heads");
  if (n_blocks == 0) throw ConfigError("n_blocks must be >= 1");
  if (max_positions < 2) throw ConfigError("max_positions must be >= 2");
  if (head_activation != "gelu" && head_activation != "tanh") throw ConfigError("head_activation must be gelu or tanh");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"hidden", hidden},
          {"n_blocks", n_blocks},     {"n_heads", n_heads},
          {"ffn_dim", ffn_width()},   {"max_positions", max_positions},
          {"head_activation", head_activation}, {"init_std", init_std}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.hidden = j.value("hidden", c.hidden);
  c.n_blocks = j.value("n_blocks", c.n_blocks);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.head_activation = j.value("head_activation", c.head_activation);
  c.init_std = j.value("init_std", c.init_std);
  return c;
}

// ---------------------------------------------------------------------------
// Building blocks

Dense::Dense(std::size_t in, std::size_t out, double stddev, Rng& rng)
    : weight(random_normal(in, out, stddev, rng)), bias(ag::Matrix::Zero(1, static_cast<Eigen::Index>(out))) {}

ag::Var Dense::operator()(const ag::Var& x) const { return ag::linear(x, weight.var(), bias.var()); }

void Dense::collect(const std::string& prefix, Group g, std::vector<NamedParameter>& out) {
  out.push_back({prefix + ".weight", &weight, g});
  out.push_back({prefix + ".bias", &bias, g});
}

Norm::Norm(std::size_t width)
    : gain(ag::Matrix::Ones(1, static_cast<Eigen::Index>(width))),
      bias(ag::Matrix::Zero(1, static_cast<Eigen::Index>(width))) {}

ag::Var Norm::operator()(const ag::Var& x) const { return ag::layer_norm(x, gain.var(), bias.var()); }

void Norm::collect(const std::string& prefix, Group g, std::vector<NamedParameter>& out) {
  out.push_back({prefix + ".gain", &gain, g});
  out.push_back({prefix + ".bias", &bias, g});
}

SelfAttentionBlock::SelfAttentionBlock(const ModelConfig& cfg, Rng& rng)
    : ln_attn(cfg.hidden),
      query(cfg.hidden, cfg.hidden, xavier(cfg.hidden, cfg.hidden), rng),
      key(cfg.hidden, cfg.hidden, xavier(cfg.hidden, cfg.hidden), rng),
      value(cfg.hidden, cfg.hidden, xavier(cfg.hidden, cfg.hidden), rng),
      out(cfg.hidden, cfg.hidden, xavier(cfg.hidden, cfg.hidden), rng),
      ln_ffn(cfg.hidden),
      ffn_in(cfg.hidden, cfg.ffn_width(), xavier(cfg.hidden, cfg.ffn_width()), rng),
      ffn_out(cfg.ffn_width(), cfg.hidden, xavier(cfg.ffn_width(), cfg.hidden), rng) {}

void SelfAttentionBlock::collect(const std::string& prefix, Group g, std::vector<NamedParameter>& out_params) {
  ln_attn.collect(prefix + ".ln_attn", g, out_params);
  query.collect(prefix + ".query", g, out_params);
  key.collect(prefix + ".key", g, out_params);
  value.collect(prefix + ".value", g, out_params);
  out.collect(prefix + ".out", g, out_params);
  ln_ffn.collect(prefix + ".ln_ffn", g, out_params);
  ffn_in.collect(prefix + ".ffn_in", g, out_params);
  ffn_out.collect(prefix + ".ffn_out", g, out_params);
}

std::vector<TokenId> truncate(std::span<const TokenId> ids, std::size_t truncation_length,
                              std::size_t max_positions) {
  if (truncation_length == 0) throw std::invalid_argument("truncation_length must be >= 1");
  const auto n = std::min({ids.size(), truncation_length, max_positions});
  return {ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n)};
}

// ---------------------------------------------------------------------------
// Encoder

EncoderBundle::EncoderBundle(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  token_embedding_ = ag::Parameter(random_normal(cfg.vocab_size, cfg.hidden, cfg.init_std, rng));
  position_embedding_ = ag::Parameter(random_normal(cfg.max_positions, cfg.hidden, cfg.init_std, rng));
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) blocks_.emplace_back(cfg, rng);
  final_norm_ = Norm(cfg.hidden);
  bottleneck_ = Dense(cfg.hidden, cfg.hidden, xavier(cfg.hidden, cfg.hidden), rng);
}

EncoderBundle::Output EncoderBundle::forward(std::span<const TokenId> ids, std::size_t truncation_length) const {
  const auto tokens = truncate(ids, truncation_length, cfg_.max_positions);
  std::vector<bool> mask(tokens.size());
  bool any = false;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    mask[i] = tokens[i] != corpus::special::kPad;
    any = any || mask[i];
  }
  if (!any) throw std::invalid_argument("cannot encode a sequence without non-pad tokens");

  const auto pos = positions(tokens.size());
  ag::Var x = ag::add(ag::embedding(token_embedding_.var(), tokens), ag::embedding(position_embedding_.var(), pos));
  const int heads = static_cast<int>(cfg_.n_heads);
  for (const auto& blk : blocks_) {
    const ag::Var h = blk.ln_attn(x);
    const ag::Var att = ag::attention(blk.query(h), blk.key(h), blk.value(h), heads, mask, false);
    x = ag::add(x, blk.out(att));
    const ag::Var f = blk.ln_ffn(x);
    x = ag::add(x, blk.ffn_out(ag::gelu(blk.ffn_in(f))));
  }
  x = final_norm_(x);
  Output out;
  out.bottleneck = bottleneck_(ag::masked_mean_rows(x, mask));
  out.output = projection_ ? (*projection_)(out.bottleneck) : out.bottleneck;
  return out;
}

ag::RowVector EncoderBundle::encode(std::span<const TokenId> ids, std::size_t truncation_length) const {
  ag::NoGradGuard no_grad;
  return forward(ids, truncation_length).output.value().row(0);
}

void EncoderBundle::attach_projection(Rng& rng) {
  projection_ = Dense(cfg_.hidden, cfg_.hidden, xavier(cfg_.hidden, cfg_.hidden), rng);
}

void EncoderBundle::set_frozen(bool frozen) {
  frozen_ = frozen;
  for (auto& p : parameters()) {
    if (p.group == Group::kEncoder) p.param->set_trainable(!frozen);
  }
}

std::vector<NamedParameter> EncoderBundle::parameters() {
  std::vector<NamedParameter> out;
  out.push_back({"encoder.token_embedding", &token_embedding_, Group::kEncoder});
  out.push_back({"encoder.position_embedding", &position_embedding_, Group::kEncoder});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    blocks_[b].collect("encoder.block" + std::to_string(b), Group::kEncoder, out);
  }
  final_norm_.collect("encoder.final_norm", Group::kEncoder, out);
  bottleneck_.collect("encoder.bottleneck", Group::kEncoder, out);
  if (projection_) projection_->collect("encoder.projection", Group::kProjection, out);
  return out;
}

// ---------------------------------------------------------------------------
// Decoder

DecoderBundle::DecoderBundle(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const auto h = cfg.hidden;
  const double s = xavier(h, h);
  token_embedding_ = ag::Parameter(random_normal(cfg.vocab_size, h, cfg.init_std, rng));
  position_embedding_ = ag::Parameter(random_normal(cfg.max_positions, h, cfg.init_std, rng));
  for (std::size_t b = 0; b < cfg.n_blocks; ++b) {
    Block blk;
    blk.ln_self = Norm(h);
    blk.self_q = Dense(h, h, s, rng);
    blk.self_k = Dense(h, h, s, rng);
    blk.self_v = Dense(h, h, s, rng);
    blk.self_o = Dense(h, h, s, rng);
    blk.ln_cross = Norm(h);
    blk.cross_q = Dense(h, h, s, rng);
    blk.cross_k = Dense(h, h, s, rng);
    blk.cross_v = Dense(h, h, s, rng);
    blk.cross_o = Dense(h, h, s, rng);
    blk.ln_ffn = Norm(h);
    blk.ffn_in = Dense(h, cfg.ffn_width(), xavier(h, cfg.ffn_width()), rng);
    blk.ffn_out = Dense(cfg.ffn_width(), h, xavier(cfg.ffn_width(), h), rng);
    blocks_.push_back(std::move(blk));
  }
  final_norm_ = Norm(h);
  vocab_out_ = Dense(h, cfg.vocab_size, cfg.init_std, rng);
}

ag::Var DecoderBundle::decode_logits(const ag::Var& bottleneck, std::span<const TokenId> prefix) const {
  if (bottleneck.rows() != 1 || bottleneck.cols() != static_cast<Eigen::Index>(cfg_.hidden)) {
    throw std::invalid_argument("decoder expects a 1 x " + std::to_string(cfg_.hidden) + " bottleneck vector");
  }
  if (prefix.empty()) throw std::invalid_argument("decoder prefix must be non-empty");
  if (prefix.size() > cfg_.max_positions) throw std::invalid_argument("decoder prefix exceeds max_positions");

  const std::vector<int> ids(prefix.begin(), prefix.end());
  const auto pos = positions(ids.size());
  const std::vector<bool> all_visible(ids.size(), true);
  const std::vector<bool> memory_visible(1, true);
  const int heads = static_cast<int>(cfg_.n_heads);

  ag::Var y = ag::add(ag::embedding(token_embedding_.var(), ids), ag::embedding(position_embedding_.var(), pos));
  for (const auto& blk : blocks_) {
    const ag::Var h = blk.ln_self(y);
    y = ag::add(y, blk.self_o(ag::attention(blk.self_q(h), blk.self_k(h), blk.self_v(h), heads, all_visible, true)));
    const ag::Var c = blk.ln_cross(y);
    y = ag::add(y, blk.cross_o(ag::attention(blk.cross_q(c), blk.cross_k(bottleneck), blk.cross_v(bottleneck), heads,
                                             memory_visible, false)));
    const ag::Var f = blk.ln_ffn(y);
    y = ag::add(y, blk.ffn_out(ag::gelu(blk.ffn_in(f))));
  }
  return vocab_out_(final_norm_(y));
}

std::vector<NamedParameter> DecoderBundle::parameters() {
  std::vector<NamedParameter> out;
  out.push_back({"decoder.token_embedding", &token_embedding_, Group::kDecoder});
  out.push_back({"decoder.position_embedding", &position_embedding_, Group::kDecoder});
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto p = "decoder.block" + std::to_string(b);
    auto& blk = blocks_[b];
    blk.ln_self.collect(p + ".ln_self", Group::kDecoder, out);
    blk.self_q.collect(p + ".self_q", Group::kDecoder, out);
    blk.self_k.collect(p + ".self_k", Group::kDecoder, out);
    blk.self_v.collect(p + ".self_v", Group::kDecoder, out);
    blk.self_o.collect(p + ".self_o", Group::kDecoder, out);
    blk.ln_cross.collect(p + ".ln_cross", Group::kDecoder, out);
    blk.cross_q.collect(p + ".cross_q", Group::kDecoder, out);
    blk.cross_k.collect(p + ".cross_k", Group::kDecoder, out);
    blk.cross_v.collect(p + ".cross_v", Group::kDecoder, out);
    blk.cross_o.collect(p + ".cross_o", Group::kDecoder, out);
    blk.ln_ffn.collect(p + ".ln_ffn", Group::kDecoder, out);
    blk.ffn_in.collect(p + ".ffn_in", Group::kDecoder, out);
    blk.ffn_out.collect(p + ".ffn_out", Group::kDecoder, out);
  }
  final_norm_.collect("decoder.final_norm", Group::kDecoder, out);
  vocab_out_.collect("decoder.vocab_out", Group::kDecoder, out);
  return out;
}

// ---------------------------------------------------------------------------
// Classifier head

ClassifierHead::ClassifierHead(std::size_t hidden, std::size_t classes, const std::string& activation, Rng& rng)
    : hidden_(hidden, hidden, xavier(hidden, hidden), rng),
      out_(hidden, classes, xavier(hidden, classes), rng),
      activation_(activation),
      classes_(classes) {
  if (classes < 2) throw std::invalid_argument("classifier needs at least two classes");
  if (activation != "gelu" && activation != "tanh") throw ConfigError("unknown head activation " + activation);
}

ag::Var ClassifierHead::logits(const ag::Var& features) const {
  const ag::Var h = hidden_(features);
  return out_(activation_ == "tanh" ? ag::tanh(h) : ag::gelu(h));
}

ag::RowVector ClassifierHead::probabilities(const ag::RowVector& features) const {
  ag::NoGradGuard no_grad;
  return softmax(logits(ag::constant(features)).value().row(0));
}

std::vector<NamedParameter> ClassifierHead::parameters() {
  std::vector<NamedParameter> out;
  hidden_.collect("head.hidden", Group::kHead, out);
  out_.collect("head.out", Group::kHead, out);
  return out;
}

ag::RowVector softmax(const ag::RowVector& logits) {
  const double mx = logits.maxCoeff();
  ag::RowVector e = (logits.array() - mx).exp();
  return e / e.sum();
}

std::size_t argmax(const ag::RowVector& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return static_cast<std::size_t>(best);
}

ag::RowVector Classifier::probabilities(std::span<const TokenId> ids, std::size_t truncation_length) const {
  return head.probabilities(encoder.encode(ids, truncation_length));
}

std::size_t Classifier::predict(std::span<const TokenId> ids, std::size_t truncation_length) const {
  return argmax(probabilities(ids, truncation_length));
}

std::vector<NamedParameter> Classifier::parameters() {
  auto out = encoder.parameters();
  auto h = head.parameters();
  out.insert(out.end(), h.begin(), h.end());
  return out;
}

}  // namespace triphase::model
