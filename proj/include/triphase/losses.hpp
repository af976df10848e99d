#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "triphase/autograd.hpp"
#include "triphase/corpus.hpp"

namespace triphase::losses {

struct LossValue {
  double value = 0.0;
  std::size_t batch_size = 0;
  std::size_t clamped = 0;  // probabilities raised to the epsilon floor
};

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean token-level cross-entropy of `targets` under row-wise softmax(logits).
LossValue dae_loss(const ag::Matrix& logits, std::span<const corpus::TokenId> targets);

struct Reconstruction {
  ag::Matrix logits;
  std::vector<corpus::TokenId> targets;
};
/// Token-level mean over every position of the batch.
LossValue dae_loss(std::span<const Reconstruction> batch);

/// (label - cos(u, v))^2.
LossValue cl_loss(const ag::RowVector& u, const ag::RowVector& v, double label);

struct ScoredPair {
  ag::RowVector u;
  ag::RowVector v;
  double label = 0.0;
};
LossValue cl_loss(std::span<const ScoredPair> batch);

/// -log p[target], with p floored at kProbabilityFloor.
LossValue ce_loss(const ag::RowVector& probabilities, std::size_t target);
/// -sum_k y_k log p_k for a (soft or one-hot) target distribution.
LossValue ce_loss(const ag::RowVector& probabilities, const ag::RowVector& target_distribution);
/// Binary form: -(y log p + (1 - y) log(1 - p)).
LossValue binary_ce_loss(double p, double y);

struct Classified {
  ag::RowVector probabilities;
  std::size_t target = 0;
};
LossValue ce_loss(std::span<const Classified> batch);

/// w_dae * dae + w_cl * cl; unit weights by default.
LossValue joint_loss(const LossValue& dae, const LossValue& cl, double w_dae = 1.0, double w_cl = 1.0);

double cosine_similarity(const ag::RowVector& u, const ag::RowVector& v);

}  // namespace triphase::losses
