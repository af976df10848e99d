#include "triphase/optim.hpp"

#include <cmath>

namespace triphase::optim {

AdamW::AdamW(std::vector<model::NamedParameter> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  state_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& v = params_[i].param->value();
    state_[i].m = ag::Matrix::Zero(v.rows(), v.cols());
    state_[i].v = ag::Matrix::Zero(v.rows(), v.cols());
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.param->zero_grad();
}

void AdamW::step() {
  ++t_;
  double scale = 1.0;
  if (cfg_.max_grad_norm > 0.0) {
    double sq = 0.0;
    for (auto& p : params_) {
      if (p.param->trainable() && p.param->has_grad()) sq += p.param->grad().squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > cfg_.max_grad_norm) scale = cfg_.max_grad_norm / norm;
  }

  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i].param;
    if (!p.trainable() || !p.has_grad()) continue;
    auto& st = state_[i];
    const ag::Matrix g = p.grad() * scale;
    st.m = cfg_.beta1 * st.m + (1.0 - cfg_.beta1) * g;
    st.v = cfg_.beta2 * st.v + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    auto& w = p.value();
    if (cfg_.weight_decay > 0.0) w *= 1.0 - cfg_.learning_rate * cfg_.weight_decay;
    w.array() -= cfg_.learning_rate * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + cfg_.eps);
  }
  zero_grad();
}

}  // namespace triphase::optim
