#pragma once

#include <vector>

#include "stda/nn.hpp"

namespace stda {

/// lr0 * decay^epoch
double exponential_lr(double lr0, double decay, int epoch);

template <typename T>
class Sgd {
 public:
  Sgd(const nn::ParamSet<T>& params, double lr, double momentum);

  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  nn::ParamSet<T> params_;
  double lr_, momentum_;
  std::vector<std::vector<T>> velocity_;
};

template <typename T>
class Adam {
 public:
  Adam(const nn::ParamSet<T>& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step();
  double lr() const { return lr_; }

 private:
  nn::ParamSet<T> params_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

}  // namespace stda
