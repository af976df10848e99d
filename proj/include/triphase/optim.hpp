#pragma once

#include <vector>

#include "triphase/model.hpp"

namespace triphase::optim {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-6;
  double weight_decay = 0.0;
  double max_grad_norm = 1.0;  // <= 0 disables clipping
};

/// AdamW with decoupled weight decay. Parameters that are not trainable are skipped entirely.
class AdamW {
 public:
  AdamW(std::vector<model::NamedParameter> params, AdamWConfig cfg);

  void zero_grad();
  /// Applies one update from the accumulated gradients, then clears them.
  void step();
  std::size_t steps() const { return t_; }

 private:
  struct State {
    ag::Matrix m;
    ag::Matrix v;
  };

  std::vector<model::NamedParameter> params_;
  std::vector<State> state_;
  AdamWConfig cfg_;
  std::size_t t_ = 0;
};

}  // namespace triphase::optim
