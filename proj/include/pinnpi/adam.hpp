#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>

#include "pinnpi/common.hpp"

namespace pinnpi {

struct AdamConfig {
  double lr = 1e-3;
  double lr_final = 1e-4;  // cosine decay target at the last step
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with a cosine learning-rate schedule over a fixed step budget.
class Adam {
 public:
  Adam(Eigen::Index n, AdamConfig cfg, int total_steps)
      : cfg_(cfg), total_(total_steps), m_(Vec::Zero(n)), v_(Vec::Zero(n)) {
    if (total_steps < 1) throw std::invalid_argument("Adam: total_steps must be >= 1");
    if (!(cfg.lr > 0) || !(cfg.lr_final > 0)) throw std::invalid_argument("Adam: learning rates must be > 0");
  }

  double learning_rate(int step) const {
    const double frac = std::min(1.0, static_cast<double>(step) / total_);
    return cfg_.lr_final + 0.5 * (cfg_.lr - cfg_.lr_final) * (1.0 + std::cos(std::numbers::pi * frac));
  }

  void step(Vec& params, const Vec& grad) {
    const double lr = learning_rate(t_);
    ++t_;
    m_ = cfg_.beta1 * m_ + (1.0 - cfg_.beta1) * grad;
    v_ = cfg_.beta2 * v_ + (1.0 - cfg_.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    params.array() -= lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + cfg_.eps);
  }

  int steps_done() const { return t_; }

 private:
  AdamConfig cfg_;
  int total_;
  int t_ = 0;
  Vec m_, v_;
};

}  // namespace pinnpi
