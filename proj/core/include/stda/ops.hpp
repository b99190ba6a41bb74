#pragma once

#include <cstdint>
#include <vector>

#include "stda/autograd.hpp"

// Differentiable array operations. Layouts follow the NCHW convention; every
// op validates shapes and throws stda::Error(kShape) on mismatch.
namespace stda::ops {

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, T s);
template <typename T> Var<T> add_scalar(const Var<T>& a, T s);
// s holds exactly one element (e.g. a learnable gain).
template <typename T> Var<T> mul_scalar_var(const Var<T>& a, const Var<T>& s);
// 1 - a
template <typename T> Var<T> one_minus(const Var<T>& a);

template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> tanh(const Var<T>& a);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> relu6(const Var<T>& a);

// Adds bias[c] along axis 1 of x (shape N x C x ...).
template <typename T> Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias);

struct Conv2dSpec {
  int stride = 1;
  int padding = 0;
  // 1 (dense) or equal to the input channel count (depthwise).
  int groups = 1;
};

// x: N x C x H x W, w: O x (C/groups) x k x k.
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, Conv2dSpec spec = {});

enum class NormMode {
  kTrain,     // batch statistics, running estimates updated
  kEval,      // running estimates
  kIdentity,  // statistics and affine bypassed: y = x
};

// Normalizes per channel (axis 1) over every other axis.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Tensor<T>& running_mean,
                  Tensor<T>& running_var, NormMode mode, T momentum = T(0.1), T eps = T(1e-5));

template <typename T> Var<T> max_pool2d(const Var<T>& x, int kernel, int stride, int padding);
// N x C x H x W -> N x C
template <typename T> Var<T> global_avg_pool(const Var<T>& x);
template <typename T> Var<T> upsample_nearest(const Var<T>& x, int factor);
template <typename T> Var<T> avg_pool(const Var<T>& x, int factor);

// x: M x K, w: O x K -> M x O
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w);
// a: B x M x K (or B x K x M when trans_a), b: B x K x N (or B x N x K when trans_b)
template <typename T> Var<T> bmm(const Var<T>& a, const Var<T>& b, bool trans_a = false, bool trans_b = false);

template <typename T> Var<T> softmax_lastdim(const Var<T>& x);
template <typename T> Var<T> layer_norm_lastdim(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                                                T eps = T(1e-5));

template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T> Var<T> permute(const Var<T>& x, const std::vector<int>& perm);
// x: N x T x ... -> N x ... (the slice at index along axis 1)
template <typename T> Var<T> select_axis1(const Var<T>& x, int64_t index);
// parts: each N x ... -> N x parts.size() x ...
template <typename T> Var<T> stack_axis1(const std::vector<Var<T>>& parts);
// x: N x 1 x ... -> N x c x ...
template <typename T> Var<T> repeat_channels(const Var<T>& x, int64_t channels);

template <typename T> Var<T> sum_all(const Var<T>& x);
template <typename T> Var<T> mean_all(const Var<T>& x);

// Mean binary cross-entropy of sigmoid(logits) against targets in [0,1].
template <typename T> Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets);

// probs: B x N rows on the simplex. Returns mean_b weights[b] * -ln probs[b, labels[b]].
template <typename T>
Var<T> weighted_nll(const Var<T>& probs, const std::vector<int>& labels, const std::vector<T>& weights);

// Forward-only multiply-accumulate counter fed by conv2d, linear and bmm.
struct MacCounter {
  static int64_t value();
  static void reset();
  static void add(int64_t macs);
};

}  // namespace stda::ops
