#include "stda/optim.hpp"

#include <cmath>

namespace stda {

double exponential_lr(double lr0, double decay, int epoch) { return lr0 * std::pow(decay, epoch); }

template <typename T>
Sgd<T>::Sgd(const nn::ParamSet<T>& params, double lr, double momentum)
    : params_(params), lr_(lr), momentum_(momentum) {
  for (const auto& p : params_.params()) velocity_.emplace_back(p.var->numel(), T(0));
}

template <typename T>
void Sgd<T>::step() {
  const auto& ps = params_.params();
  for (size_t i = 0; i < ps.size(); ++i) {
    auto* var = ps[i].var;
    if (!var->has_grad()) continue;
    auto w = var->mutable_value().span();
    const auto& g = var->grad();
    auto& v = velocity_[i];
    for (size_t k = 0; k < v.size(); ++k) {
      v[k] = static_cast<T>(momentum_) * v[k] + g[k];
      w[k] -= static_cast<T>(lr_) * v[k];
    }
  }
}

template <typename T>
Adam<T>::Adam(const nn::ParamSet<T>& params, double lr, double beta1, double beta2, double eps)
    : params_(params), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_.params()) {
    m_.emplace_back(p.var->numel(), T(0));
    v_.emplace_back(p.var->numel(), T(0));
  }
}

template <typename T>
void Adam<T>::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto& ps = params_.params();
  for (size_t i = 0; i < ps.size(); ++i) {
    auto* var = ps[i].var;
    if (!var->has_grad()) continue;
    auto w = var->mutable_value().span();
    const auto& g = var->grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t k = 0; k < m.size(); ++k) {
      const double gk = static_cast<double>(g[k]);
      m[k] = static_cast<T>(beta1_ * m[k] + (1 - beta1_) * gk);
      v[k] = static_cast<T>(beta2_ * v[k] + (1 - beta2_) * gk * gk);
      const double mh = m[k] / c1, vh = v[k] / c2;
      w[k] -= static_cast<T>(lr_ * mh / (std::sqrt(vh) + eps_));
    }
  }
}

template class Sgd<float>;
template class Sgd<double>;
template class Adam<float>;
template class Adam<double>;

}  // namespace stda
