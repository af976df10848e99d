#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "triphase/autograd.hpp"
#include "triphase/corpus.hpp"

namespace triphase::model {

using Rng = std::mt19937_64;
using corpus::TokenId;

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden = 64;
  std::size_t n_blocks = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 0;  // 0 means 4 * hidden
  std::size_t max_positions = 64;
  std::string head_activation = "gelu";  // gelu | tanh
  double init_std = 0.02;

  std::size_t ffn_width() const { return ffn_dim == 0 ? 4 * hidden : ffn_dim; }
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Parameter groups decide what freezing affects.
enum class Group { kEncoder, kProjection, kDecoder, kHead };

struct NamedParameter {
  std::string name;
  ag::Parameter* param;
  Group group;
};

struct Dense {
  ag::Parameter weight;  // in x out
  ag::Parameter bias;    // 1 x out

  Dense() = default;
  Dense(std::size_t in, std::size_t out, double stddev, Rng& rng);
  ag::Var operator()(const ag::Var& x) const;
  void collect(const std::string& prefix, Group g, std::vector<NamedParameter>& out);
};

struct Norm {
  ag::Parameter gain;
  ag::Parameter bias;

  Norm() = default;
  explicit Norm(std::size_t width);
  ag::Var operator()(const ag::Var& x) const;
  void collect(const std::string& prefix, Group g, std::vector<NamedParameter>& out);
};

struct SelfAttentionBlock {
  Norm ln_attn;
  Dense query, key, value, out;
  Norm ln_ffn;
  Dense ffn_in, ffn_out;

  SelfAttentionBlock() = default;
  SelfAttentionBlock(const ModelConfig& cfg, Rng& rng);
  void collect(const std::string& prefix, Group g, std::vector<NamedParameter>& out);
};

/// Embedding, pre-norm transformer blocks, mean pooling over non-pad positions, a bottleneck layer
/// and, once attached, a projection layer on top of the bottleneck.
class EncoderBundle {
 public:
  struct Output {
    ag::Var bottleneck;
    ag::Var output;  // projection(bottleneck) when attached, otherwise the bottleneck
  };

  EncoderBundle() = default;
  EncoderBundle(const ModelConfig& cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  std::size_t dim() const { return cfg_.hidden; }

  /// Throws when the truncated sequence has no non-pad token.
  Output forward(std::span<const TokenId> ids, std::size_t truncation_length) const;
  ag::RowVector encode(std::span<const TokenId> ids, std::size_t truncation_length) const;

  void attach_projection(Rng& rng);
  bool has_projection() const { return projection_.has_value(); }

  /// Freezing marks embedding, blocks and bottleneck as non-updatable; the projection stays trainable.
  void set_frozen(bool frozen);
  bool frozen() const { return frozen_; }

  std::vector<NamedParameter> parameters();

 private:
  ModelConfig cfg_;
  ag::Parameter token_embedding_;
  ag::Parameter position_embedding_;
  std::vector<SelfAttentionBlock> blocks_;
  Norm final_norm_;
  Dense bottleneck_;
  std::optional<Dense> projection_;
  bool frozen_ = false;
};

/// Truncated sequence as fed to the encoder.
std::vector<TokenId> truncate(std::span<const TokenId> ids, std::size_t truncation_length,
                              std::size_t max_positions);

/// Causal transformer decoder that sees the source only through the bottleneck vector.
class DecoderBundle {
 public:
  DecoderBundle() = default;
  DecoderBundle(const ModelConfig& cfg, Rng& rng);

  /// Teacher-forced logits, one row per prefix position (prefix.size() x vocab_size).
  ag::Var decode_logits(const ag::Var& bottleneck, std::span<const TokenId> prefix) const;
  std::vector<NamedParameter> parameters();
  const ModelConfig& config() const { return cfg_; }

 private:
  struct Block {
    Norm ln_self;
    Dense self_q, self_k, self_v, self_o;
    Norm ln_cross;
    Dense cross_q, cross_k, cross_v, cross_o;
    Norm ln_ffn;
    Dense ffn_in, ffn_out;
  };

  ModelConfig cfg_;
  ag::Parameter token_embedding_;
  ag::Parameter position_embedding_;
  std::vector<Block> blocks_;
  Norm final_norm_;
  Dense vocab_out_;
};

/// Two dense layers H -> H -> K with a smooth nonlinearity between them.
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(std::size_t hidden, std::size_t classes, const std::string& activation, Rng& rng);

  ag::Var logits(const ag::Var& features) const;
  ag::RowVector probabilities(const ag::RowVector& features) const;
  std::size_t classes() const { return classes_; }
  std::vector<NamedParameter> parameters();

 private:
  Dense hidden_;
  Dense out_;
  std::string activation_ = "gelu";
  std::size_t classes_ = 0;
};

ag::RowVector softmax(const ag::RowVector& logits);
/// Index of the largest entry, first one on ties.
std::size_t argmax(const ag::RowVector& v);

/// Any model that maps token ids to a fixed-size vector.
class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual std::size_t dim() const = 0;
  virtual ag::RowVector encode(std::span<const TokenId> ids) const = 0;
};

class BundleTextEncoder final : public TextEncoder {
 public:
  BundleTextEncoder(const EncoderBundle& bundle, std::size_t truncation_length)
      : bundle_(bundle), truncation_length_(truncation_length) {}
  std::size_t dim() const override { return bundle_.dim(); }
  ag::RowVector encode(std::span<const TokenId> ids) const override { return bundle_.encode(ids, truncation_length_); }

 private:
  const EncoderBundle& bundle_;
  std::size_t truncation_length_;
};

/// Encoder plus head: the fine-tuned classifier.
struct Classifier {
  EncoderBundle encoder;
  ClassifierHead head;

  ag::RowVector probabilities(std::span<const TokenId> ids, std::size_t truncation_length) const;
  std::size_t predict(std::span<const TokenId> ids, std::size_t truncation_length) const;
  std::vector<NamedParameter> parameters();
};

}  // namespace triphase::model
