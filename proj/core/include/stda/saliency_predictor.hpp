#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stda/nn.hpp"

namespace stda {

/// One MobileNet-V2 stage: expansion t, output channels c, repeats n, first stride s.
struct IrStageSpec {
  int expand;
  int channels;
  int repeats;
  int stride;
};

struct SaliencyConfig {
  int stem_channels = 8;
  std::vector<IrStageSpec> stages;
  int enc_channels = 64;     // C_enc
  int post_channels = 16;    // C_post
  int hidden_channels = 8;   // C_h
  int gru_kernel = 3;
  int bottleneck_expand = 2;  // inverted residual between attention and GRU
  int decoder_expand = 2;

  // Decoder channel taper: C_h -> 2*C_post -> C_post -> 1.
  int decoder_wide() const { return 2 * post_channels; }
  int decoder_narrow() const { return post_channels; }

  static SaliencyConfig tiny();
  static SaliencyConfig paper();
};

/// Frames batch N x T x 3 x H x W with H, W multiples of 32 and values in [0,1].
void validate_frames(const Shape& shape, const std::string& what = "frames");

template <typename T>
void validate_frame_values(const Tensor<T>& frames);

/// Encoder outputs for N*T frames, folded into the leading axis.
template <typename T>
struct EncoderFeatures {
  Var<T> m;         // (N*T) x C_enc x H/32 x W/32
  Var<T> p;         // (N*T) x C_post x H/32 x W/32
  Var<T> skip_s16;  // stride-16 features for the decoder residual path
  Var<T> skip_s8;   // stride-8 features for the decoder residual path
};

/// Scaled dot-product self-attention over spatial positions with a learnable
/// residual gain: out = eps * softmax(Q K^T / sqrt(C)) V + X, per image.
template <typename T>
class SpatialAttention : public nn::Module<T> {
 public:
  SpatialAttention() = default;
  SpatialAttention(int channels, nn::Rng& rng);

  Var<T> forward(const Var<T>& x) const;
  // Attention weights, B x SP x SP (rows = queries).
  Var<T> weights(const Var<T>& x) const;
  void collect(nn::ParamSet<T>& set, const std::string& prefix) override;

  int channels = 0;
  Var<T> w_q, w_k, w_v;  // C x C x 1 x 1
  Var<T> epsilon;        // scalar, starts at 0

 private:
  void check(const Var<T>& x) const;
};

/// Channel self-attention: out = gamma * softmax(X X^T) X + X over C x (h*w).
template <typename T>
class ChannelAttention : public nn::Module<T> {
 public:
  ChannelAttention() : gamma(nn::make_param<T>({1})) {}

  Var<T> forward(const Var<T>& x) const;
  void collect(nn::ParamSet<T>& set, const std::string& prefix) override;

  Var<T> gamma;
};

template <typename T>
struct GruStepTrace {
  Var<T> reset;      // R_t
  Var<T> update;     // Z_t
  Var<T> candidate;  // H~_t
  Var<T> hidden;     // H_t
};

/// Conv-GRU with batch-normalized gate convolutions.
template <typename T>
class ConvGru : public nn::Module<T> {
 public:
  ConvGru() = default;
  ConvGru(int in_channels, int hidden_channels, int kernel, nn::Rng& rng);

  // a: B x C_in x h x w, h_prev: B x C_h x h x w. force_update pins Z_t to a constant.
  GruStepTrace<T> step(const Var<T>& a, const Var<T>& h_prev, nn::NormMode mode,
                       std::optional<T> force_update = std::nullopt);
  // a_seq: B x T x C_in x h x w -> B x T x C_h x h x w. Empty h0 means zeros.
  Var<T> forward(const Var<T>& a_seq, const Var<T>* h0, nn::NormMode mode);
  void collect(nn::ParamSet<T>& set, const std::string& prefix) override;

  int in_channels = 0;
  int hidden_channels = 0;
  nn::Conv2d<T> w_ar, w_hr, w_az, w_hz, w_ah, w_hh;
  nn::BatchNorm<T> bn_ar, bn_hr, bn_az, bn_hz, bn_ah, bn_hh;
  Var<T> b_r, b_z, b_h;
};

template <typename T>
class SaliencyEncoder : public nn::Module<T> {
 public:
  SaliencyEncoder() = default;
  SaliencyEncoder(const SaliencyConfig& cfg, nn::Rng& rng);

  // frames: B x 3 x H x W
  EncoderFeatures<T> forward(const Var<T>& frames, nn::NormMode mode);
  void collect(nn::ParamSet<T>& set, const std::string& prefix) override;

  int skip_s16_channels = 0;
  int skip_s8_channels = 0;

 private:
  nn::ConvBnAct<T> stem_;
  std::vector<nn::InvertedResidual<T>> blocks_;
  std::vector<int> block_stride_;  // cumulative stride after each block
  nn::ConvBnAct<T> head_;
  nn::ConvBnAct<T> post_;
};

template <typename T>
class SaliencyDecoder : public nn::Module<T> {
 public:
  SaliencyDecoder() = default;
  SaliencyDecoder(const SaliencyConfig& cfg, int skip_s16_channels, int skip_s8_channels, nn::Rng& rng);

  // hidden: (N*T) x C_h x H/32 x W/32 -> (N*T) x 1 x H x W logits.
  Var<T> logits(const Var<T>& hidden, const EncoderFeatures<T>& skip, nn::NormMode mode);
  // Same, squashed to [0,1].
  Var<T> forward(const Var<T>& hidden, const EncoderFeatures<T>& skip, nn::NormMode mode);
  void collect(nn::ParamSet<T>& set, const std::string& prefix) override;

  nn::ConvBnAct<T> enrich;
  nn::ConvBnAct<T> skip16_proj;
  SpatialAttention<T> attention;
  nn::InvertedResidual<T> reduce;
  nn::ConvBnAct<T> skip8_proj;
  nn::InvertedResidual<T> refine_a, refine_b;
  ChannelAttention<T> channel_attention;
  nn::InvertedResidual<T> to_map;
};

/// Driver-attention predictor: frames N x T x 3 x H x W -> maps N x T x 1 x H x W.
template <typename T>
class SaliencyPredictor : public nn::Module<T> {
 public:
  SaliencyPredictor() = default;
  SaliencyPredictor(const SaliencyConfig& cfg, nn::Rng& rng);

  EncoderFeatures<T> encode(const Var<T>& frames, nn::NormMode mode);
  Var<T> predict_logits(const Var<T>& frames, nn::NormMode mode);
  Var<T> predict(const Var<T>& frames, nn::NormMode mode);
  void collect(nn::ParamSet<T>& set, const std::string& prefix) override;

  const SaliencyConfig& config() const { return cfg_; }

  SaliencyEncoder<T> encoder;
  SpatialAttention<T> attention;
  nn::InvertedResidual<T> bottleneck;
  ConvGru<T> gru;
  SaliencyDecoder<T> decoder;

 private:
  SaliencyConfig cfg_;
};

}  // namespace stda
