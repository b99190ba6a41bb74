#pragma once

#include <string>

#include "stda/nn.hpp"

namespace stda {

enum class FusionMode { kBlend, kCrossAttention };

FusionMode parse_fusion_mode(const std::string& s);
std::string to_string(FusionMode mode);

/// N x T x 1 x H x W attention -> N x T x 3 x H x W (channel replicated).
template <typename T>
Var<T> channel_extend(const Var<T>& attention);

/// Per-pixel convex blend (1 - alpha) * frames + alpha * attention.
/// alpha is configuration, not a learned parameter.
template <typename T>
Var<T> blend_fuse(const Var<T>& frames, const Var<T>& attention3, double alpha);

struct CrossAttentionConfig {
  int token_dim = 64;
  // Spatial average-pool factor applied before tokenization, undone by
  // nearest-neighbor upsampling after back-projection.
  int downsample = 1;
};

/// Cross-attention fusion: queries from attention tokens, keys and values from
/// frame tokens, LN(A + softmax(A S^T / sqrt(d)) S), projected back to RGB.
template <typename T>
class CrossAttentionFusion : public nn::Module<T> {
 public:
  CrossAttentionFusion() = default;
  CrossAttentionFusion(const CrossAttentionConfig& cfg, nn::Rng& rng);

  // frames, attention3: N x T x 3 x H x W -> N x T x 3 x H x W
  Var<T> forward(const Var<T>& frames, const Var<T>& attention3) const;
  // Attention weights for N*T images: (N*T) x HW' x HW'
  Var<T> weights(const Var<T>& frames, const Var<T>& attention3) const;
  void collect(nn::ParamSet<T>& set, const std::string& prefix) override;

  CrossAttentionConfig cfg;
  nn::Linear<T> query_proj;  // attention tokens 3 -> d
  nn::Linear<T> frame_proj;  // frame tokens 3 -> d
  nn::LayerNorm<T> norm;
  nn::Linear<T> back_proj;   // d -> 3

 private:
  struct Tokens {
    Var<T> query, frame;
    int64_t images, h, w;
  };
  Tokens tokenize(const Var<T>& frames, const Var<T>& attention3) const;
};

}  // namespace stda
