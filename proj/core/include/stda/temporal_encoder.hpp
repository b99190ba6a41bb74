#pragma once

#include <string>

#include "stda/nn.hpp"

namespace stda {

struct TemporalConfig {
  int t_len = 4;
  int hidden_factor = 4;  // D_hidden = hidden_factor * t_len
  // Replaces the FFN with the identity; used for the pass-through check.
  bool ffn_identity = false;
};

/// Collapses the time axis of an N x T x 3 x H x W sequence into N x 3 x H x W.
/// Each (channel, pixel) history of length T goes through FFN (T -> D -> T,
/// rectifier between), batch-norm over the T features, then a learned T -> 1
/// combination that starts as the uniform average.
template <typename T>
class TemporalEncoder : public nn::Module<T> {
 public:
  TemporalEncoder() = default;
  TemporalEncoder(const TemporalConfig& cfg, nn::Rng& rng);

  Var<T> forward(const Var<T>& fused, nn::NormMode mode);
  void collect(nn::ParamSet<T>& set, const std::string& prefix) override;

  TemporalConfig cfg;
  nn::Linear<T> ffn_in, ffn_out;
  nn::BatchNorm<T> norm;
  Var<T> squeeze;  // 1 x T
};

}  // namespace stda
