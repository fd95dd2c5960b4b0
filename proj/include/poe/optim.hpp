#pragma once

#include "poe/common.hpp"

namespace poe {

/// Adam moments for a flat parameter vector. `step` returns the update to
/// subtract for minimization.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  VectorXd step(const VectorXd& grad) {
    if (m_.size() != grad.size()) reset(grad.size());
    ++t_;
    m_ = b1_ * m_ + (1.0 - b1_) * grad;
    v_ = b2_ * v_ + (1.0 - b2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    return lr_ * (m_ / c1).array() / ((v_ / c2).array().sqrt() + eps_);
  }

  void reset(Eigen::Index n) {
    m_ = VectorXd::Zero(n);
    v_ = VectorXd::Zero(n);
    t_ = 0;
  }

  /// Forget the moments of a slice (used when a block is re-initialized).
  void reset_slice(Eigen::Index start, Eigen::Index size) {
    if (m_.size() == 0) return;
    m_.segment(start, size).setZero();
    v_.segment(start, size).setZero();
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_, b1_, b2_, eps_;
  VectorXd m_, v_;
  int t_ = 0;
};

}  // namespace poe
