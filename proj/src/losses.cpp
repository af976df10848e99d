#include "triphase/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace triphase::losses {

namespace {

double row_nll(const ag::Matrix& logits, Eigen::Index row, corpus::TokenId target) {
  if (target < 0 || target >= logits.cols()) throw std::invalid_argument("target id outside the logit width");
  const double mx = logits.row(row).maxCoeff();
  const double lse = mx + std::log((logits.row(row).array() - mx).exp().sum());
  return lse - logits(row, target);
}

double floored_log(double p, std::size_t& clamped) {
  if (p < kProbabilityFloor) {
    ++clamped;
    p = kProbabilityFloor;
  }
  return std::log(p);
}

}  // namespace

LossValue dae_loss(const ag::Matrix& logits, std::span<const corpus::TokenId> targets) {
  if (static_cast<std::size_t>(logits.rows()) != targets.size()) {
    throw std::invalid_argument("dae_loss: logit rows must equal target length");
  }
  if (targets.empty()) throw std::invalid_argument("dae_loss: empty target");
  double total = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) total += row_nll(logits, i, targets[static_cast<std::size_t>(i)]);
  return {total / static_cast<double>(targets.size()), 1, 0};
}

LossValue dae_loss(std::span<const Reconstruction> batch) {
  if (batch.empty()) throw std::invalid_argument("dae_loss: empty batch");
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& r : batch) {
    const auto one = dae_loss(r.logits, r.targets);
    total += one.value * static_cast<double>(r.targets.size());
    tokens += r.targets.size();
  }
  return {total / static_cast<double>(tokens), batch.size(), 0};
}

double cosine_similarity(const ag::RowVector& u, const ag::RowVector& v) {
  if (u.size() != v.size()) throw std::invalid_argument("cosine: vectors differ in length");
  const double nu = u.norm();
  const double nv = v.norm();
  if (nu == 0.0 || nv == 0.0) throw std::domain_error("cosine: zero vector");
  return u.dot(v) / (nu * nv);
}

LossValue cl_loss(const ag::RowVector& u, const ag::RowVector& v, double label) {
  const double r = label - cosine_similarity(u, v);
  return {r * r, 1, 0};
}

LossValue cl_loss(std::span<const ScoredPair> batch) {
  if (batch.empty()) throw std::invalid_argument("cl_loss: empty batch");
  double total = 0.0;
  for (const auto& p : batch) total += cl_loss(p.u, p.v, p.label).value;
  return {total / static_cast<double>(batch.size()), batch.size(), 0};
}

LossValue ce_loss(const ag::RowVector& probabilities, std::size_t target) {
  if (target >= static_cast<std::size_t>(probabilities.size())) throw std::invalid_argument("ce_loss: bad target");
  LossValue out{0.0, 1, 0};
  out.value = -floored_log(probabilities(static_cast<Eigen::Index>(target)), out.clamped);
  return out;
}

LossValue ce_loss(const ag::RowVector& probabilities, const ag::RowVector& target_distribution) {
  if (probabilities.size() != target_distribution.size()) throw std::invalid_argument("ce_loss: width mismatch");
  LossValue out{0.0, 1, 0};
  for (Eigen::Index k = 0; k < probabilities.size(); ++k) {
    if (target_distribution(k) == 0.0) continue;
    out.value -= target_distribution(k) * floored_log(probabilities(k), out.clamped);
  }
  return out;
}

LossValue binary_ce_loss(double p, double y) {
  LossValue out{0.0, 1, 0};
  if (y != 0.0) out.value -= y * floored_log(p, out.clamped);
  if (y != 1.0) out.value -= (1.0 - y) * floored_log(1.0 - p, out.clamped);
  return out;
}

LossValue ce_loss(std::span<const Classified> batch) {
  if (batch.empty()) throw std::invalid_argument("ce_loss: empty batch");
  LossValue out{0.0, batch.size(), 0};
  for (const auto& c : batch) {
    const auto one = ce_loss(c.probabilities, c.target);
    out.value += one.value;
    out.clamped += one.clamped;
  }
  out.value /= static_cast<double>(batch.size());
  return out;
}

LossValue joint_loss(const LossValue& dae, const LossValue& cl, double w_dae, double w_cl) {
  return {w_dae * dae.value + w_cl * cl.value, std::max(dae.batch_size, cl.batch_size), dae.clamped + cl.clamped};
}

}  // namespace triphase::losses
