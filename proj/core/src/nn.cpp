#include "stda/nn.hpp"

#include <cmath>

namespace stda::nn {

template <typename T>
Var<T> make_param(Shape shape, T fill) {
  return Var<T>(Tensor<T>(std::move(shape), fill), true);
}

template <typename T>
Var<T> he_normal(Shape shape, int64_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return Var<T>(std::move(t), true);
}

template <typename T>
Var<T> uniform_param(Shape shape, T bound, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(-static_cast<double>(bound), static_cast<double>(bound));
  for (auto& v : t.storage()) v = static_cast<T>(dist(rng));
  return Var<T>(std::move(t), true);
}

template <typename T>
Conv2d<T>::Conv2d(int in_ch, int out_ch, int kernel, Rng& rng, ops::Conv2dSpec s, bool bias) : spec(s), has_bias(bias) {
  const int per_group = spec.groups == 1 ? in_ch : 1;
  weight = he_normal<T>({out_ch, per_group, kernel, kernel}, static_cast<int64_t>(per_group) * kernel * kernel, rng);
  if (has_bias) this->bias = make_param<T>({out_ch});
}

template <typename T>
Var<T> Conv2d<T>::forward(const Var<T>& x) const {
  auto y = ops::conv2d(x, weight, spec);
  return has_bias ? ops::add_channel_bias(y, bias) : y;
}

template <typename T>
void Conv2d<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  set.param(join(prefix, "weight"), weight);
  if (has_bias) set.param(join(prefix, "bias"), bias);
}

template <typename T>
BatchNorm<T>::BatchNorm(int channels)
    : gamma(make_param<T>({channels}, T(1))),
      beta(make_param<T>({channels})),
      running_mean({channels}, T(0)),
      running_var({channels}, T(1)) {}

template <typename T>
Var<T> BatchNorm<T>::forward(const Var<T>& x, NormMode mode) {
  return ops::batch_norm(x, gamma, beta, running_mean, running_var, mode);
}

template <typename T>
void BatchNorm<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  set.param(join(prefix, "gamma"), gamma);
  set.param(join(prefix, "beta"), beta);
  set.buffer(join(prefix, "running_mean"), running_mean);
  set.buffer(join(prefix, "running_var"), running_var);
}

template <typename T>
Linear<T>::Linear(int in_features, int out_features, Rng& rng, bool bias) : has_bias(bias) {
  const T bound = T(1) / std::sqrt(static_cast<T>(in_features));
  weight = uniform_param<T>({out_features, in_features}, bound, rng);
  if (has_bias) this->bias = uniform_param<T>({out_features}, bound, rng);
}

template <typename T>
Var<T> Linear<T>::forward(const Var<T>& x) const {
  auto y = ops::linear(x, weight);
  return has_bias ? ops::add_channel_bias(y, bias) : y;
}

template <typename T>
void Linear<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  set.param(join(prefix, "weight"), weight);
  if (has_bias) set.param(join(prefix, "bias"), bias);
}

template <typename T>
LayerNorm<T>::LayerNorm(int features) : gamma(make_param<T>({features}, T(1))), beta(make_param<T>({features})) {}

template <typename T>
Var<T> LayerNorm<T>::forward(const Var<T>& x) const {
  return ops::layer_norm_lastdim(x, gamma, beta);
}

template <typename T>
void LayerNorm<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  set.param(join(prefix, "gamma"), gamma);
  set.param(join(prefix, "beta"), beta);
}

template <typename T>
Var<T> activate(const Var<T>& x, Act act) {
  switch (act) {
    case Act::kRelu: return ops::relu(x);
    case Act::kRelu6: return ops::relu6(x);
    case Act::kNone: break;
  }
  return x;
}

template <typename T>
ConvBnAct<T>::ConvBnAct(int in_ch, int out_ch, int kernel, int stride, Act a, Rng& rng, bool depthwise)
    : conv(in_ch, out_ch, kernel, rng, ops::Conv2dSpec{stride, kernel / 2, depthwise ? in_ch : 1}),
      bn(out_ch),
      act(a) {}

template <typename T>
Var<T> ConvBnAct<T>::forward(const Var<T>& x, NormMode mode) {
  return activate(bn.forward(conv.forward(x), mode), act);
}

template <typename T>
void ConvBnAct<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  conv.collect(set, join(prefix, "conv"));
  bn.collect(set, join(prefix, "bn"));
}

template <typename T>
InvertedResidual<T>::InvertedResidual(int in_ch, int out_ch, int stride, int expand_ratio, Rng& rng, bool with_bn)
    : has_expand(expand_ratio != 1), use_skip(stride == 1 && in_ch == out_ch), project_bn(with_bn) {
  const int hidden = in_ch * expand_ratio;
  if (has_expand) expand = ConvBnAct<T>(in_ch, hidden, 1, 1, Act::kRelu6, rng);
  depthwise = ConvBnAct<T>(hidden, hidden, 3, stride, Act::kRelu6, rng, true);
  project = Conv2d<T>(hidden, out_ch, 1, rng, {}, !project_bn);
  if (project_bn) project_norm = BatchNorm<T>(out_ch);
}

template <typename T>
Var<T> InvertedResidual<T>::forward(const Var<T>& x, NormMode mode) {
  Var<T> h = has_expand ? expand.forward(x, mode) : x;
  h = depthwise.forward(h, mode);
  h = project.forward(h);
  if (project_bn) h = project_norm.forward(h, mode);
  return use_skip ? ops::add(h, x) : h;
}

template <typename T>
void InvertedResidual<T>::collect(ParamSet<T>& set, const std::string& prefix) {
  if (has_expand) expand.collect(set, join(prefix, "expand"));
  depthwise.collect(set, join(prefix, "depthwise"));
  project.collect(set, join(prefix, "project"));
  if (project_bn) project_norm.collect(set, join(prefix, "project_bn"));
}

#define STDA_INSTANTIATE_NN(T)                                            \
  template Var<T> make_param<T>(Shape, T);                                \
  template Var<T> he_normal<T>(Shape, int64_t, Rng&);                     \
  template Var<T> uniform_param<T>(Shape, T, Rng&);                       \
  template Var<T> activate<T>(const Var<T>&, Act);                        \
  template class Conv2d<T>;                                               \
  template class BatchNorm<T>;                                            \
  template class Linear<T>;                                               \
  template class LayerNorm<T>;                                            \
  template class ConvBnAct<T>;                                            \
  template class InvertedResidual<T>;

STDA_INSTANTIATE_NN(float)
STDA_INSTANTIATE_NN(double)

}  // namespace stda::nn
