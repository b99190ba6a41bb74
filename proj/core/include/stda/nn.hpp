#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "stda/ops.hpp"

namespace stda::nn {

using ops::NormMode;
using Rng = std::mt19937_64;

template <typename T>
struct NamedParam {
  std::string name;
  Var<T>* var;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T>* tensor;
};

/// Flat, ordered view of a module tree's learnable parameters and state buffers.
template <typename T>
class ParamSet {
 public:
  void param(const std::string& name, Var<T>& v) { params_.push_back({name, &v}); }
  void buffer(const std::string& name, Tensor<T>& t) { buffers_.push_back({name, &t}); }

  const std::vector<NamedParam<T>>& params() const { return params_; }
  const std::vector<NamedBuffer<T>>& buffers() const { return buffers_; }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& p : params_) n += p.var->numel();
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) p.var->zero_grad();
  }

 private:
  std::vector<NamedParam<T>> params_;
  std::vector<NamedBuffer<T>> buffers_;
};

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

template <typename T>
class Module {
 public:
  virtual ~Module() = default;
  virtual void collect(ParamSet<T>& set, const std::string& prefix) = 0;

  ParamSet<T> parameters() {
    ParamSet<T> set;
    collect(set, "");
    return set;
  }
};

template <typename T> Var<T> make_param(Shape shape, T fill = T(0));
// He-normal initialization for a weight with the given fan-in.
template <typename T> Var<T> he_normal(Shape shape, int64_t fan_in, Rng& rng);
template <typename T> Var<T> uniform_param(Shape shape, T bound, Rng& rng);

template <typename T>
class Conv2d : public Module<T> {
 public:
  Conv2d() = default;
  Conv2d(int in_ch, int out_ch, int kernel, Rng& rng, ops::Conv2dSpec spec = {}, bool bias = false);

  Var<T> forward(const Var<T>& x) const;
  void collect(ParamSet<T>& set, const std::string& prefix) override;

  Var<T> weight;
  Var<T> bias;
  ops::Conv2dSpec spec;
  bool has_bias = false;
};

template <typename T>
class BatchNorm : public Module<T> {
 public:
  BatchNorm() = default;
  explicit BatchNorm(int channels);

  Var<T> forward(const Var<T>& x, NormMode mode);
  void collect(ParamSet<T>& set, const std::string& prefix) override;

  Var<T> gamma, beta;
  Tensor<T> running_mean, running_var;
};

template <typename T>
class Linear : public Module<T> {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, Rng& rng, bool bias = true);

  // x: M x in -> M x out
  Var<T> forward(const Var<T>& x) const;
  void collect(ParamSet<T>& set, const std::string& prefix) override;

  Var<T> weight, bias;
  bool has_bias = true;
};

template <typename T>
class LayerNorm : public Module<T> {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int features);

  Var<T> forward(const Var<T>& x) const;
  void collect(ParamSet<T>& set, const std::string& prefix) override;

  Var<T> gamma, beta;
};

enum class Act { kNone, kRelu, kRelu6 };

template <typename T> Var<T> activate(const Var<T>& x, Act act);

// conv -> batch-norm -> activation
template <typename T>
class ConvBnAct : public Module<T> {
 public:
  ConvBnAct() = default;
  ConvBnAct(int in_ch, int out_ch, int kernel, int stride, Act act, Rng& rng, bool depthwise = false);

  Var<T> forward(const Var<T>& x, NormMode mode);
  void collect(ParamSet<T>& set, const std::string& prefix) override;

  Conv2d<T> conv;
  BatchNorm<T> bn;
  Act act = Act::kRelu;
};

// MobileNet-V2 block: 1x1 expand -> 3x3 depthwise -> 1x1 linear projection,
// with an identity skip when stride is 1 and channel counts match.
template <typename T>
class InvertedResidual : public Module<T> {
 public:
  InvertedResidual() = default;
  // With project_bn = false the projection carries a bias instead of a
  // batch-norm, used where the block emits logits.
  InvertedResidual(int in_ch, int out_ch, int stride, int expand, Rng& rng, bool project_bn = true);

  Var<T> forward(const Var<T>& x, NormMode mode);
  void collect(ParamSet<T>& set, const std::string& prefix) override;

  bool has_expand = false;
  bool use_skip = false;
  bool project_bn = true;
  ConvBnAct<T> expand;
  ConvBnAct<T> depthwise;
  Conv2d<T> project;
  BatchNorm<T> project_norm;
};

}  // namespace stda::nn
