#include "stda/saliency_predictor.hpp"

#include <cmath>

namespace stda {

using nn::join;
using nn::NormMode;

SaliencyConfig SaliencyConfig::tiny() {
  SaliencyConfig cfg;
  cfg.stem_channels = 8;
  cfg.stages = {{1, 8, 1, 1}, {4, 12, 1, 2}, {4, 16, 1, 2}, {4, 24, 1, 2}, {4, 32, 1, 2}};
  cfg.enc_channels = 64;
  cfg.post_channels = 16;
  cfg.hidden_channels = 8;
  cfg.bottleneck_expand = 2;
  cfg.decoder_expand = 2;
  return cfg;
}

SaliencyConfig SaliencyConfig::paper() {
  SaliencyConfig cfg;
  cfg.stem_channels = 32;
  cfg.stages = {{1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2},
                {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
  cfg.enc_channels = 1280;
  cfg.post_channels = 256;
  cfg.hidden_channels = 128;
  cfg.bottleneck_expand = 6;
  cfg.decoder_expand = 6;
  return cfg;
}

void validate_frames(const Shape& shape, const std::string& what) {
  require(shape.size() == 5 && shape[2] == 3, ErrorCode::kShape,
          what + ": expected N x T x 3 x H x W, got " + shape_str(shape));
  require(shape[0] >= 1 && shape[1] >= 1, ErrorCode::kShape, what + ": batch and history length must be >= 1");
  require(shape[3] > 0 && shape[4] > 0 && shape[3] % 32 == 0 && shape[4] % 32 == 0, ErrorCode::kShape,
          what + ": H and W must be positive multiples of 32, got " + shape_str(shape));
}

template <typename T>
void validate_frame_values(const Tensor<T>& frames) {
  for (T v : frames.span()) {
    require(std::isfinite(v), ErrorCode::kNonFinite, "frames contain a non-finite value");
    require(v >= T(0) && v <= T(1), ErrorCode::kValue, "frame values must lie in [0,1]");
  }
}

// ---------------------------------------------------------------------------

template <typename T>
SpatialAttention<T>::SpatialAttention(int c, nn::Rng& rng)
    : channels(c),
      w_q(nn::he_normal<T>({c, c, 1, 1}, c, rng)),
      w_k(nn::he_normal<T>({c, c, 1, 1}, c, rng)),
      w_v(nn::he_normal<T>({c, c, 1, 1}, c, rng)),
      epsilon(nn::make_param<T>({1}, T(0))) {}

template <typename T>
void SpatialAttention<T>::check(const Var<T>& x) const {
  require(x.value().rank() == 4 && x.dim(1) == channels, ErrorCode::kShape,
          "spatial_attention: expected B x " + std::to_string(channels) + " x h x w, got " + shape_str(x.shape()));
}

template <typename T>
Var<T> SpatialAttention<T>::weights(const Var<T>& x) const {
  check(x);
  const int64_t b = x.dim(0), c = x.dim(1), sp = x.dim(2) * x.dim(3);
  auto q = ops::reshape(ops::conv2d(x, w_q), {b, c, sp});
  auto k = ops::reshape(ops::conv2d(x, w_k), {b, c, sp});
  // (SP x C) (C x SP)
  auto scores = ops::scale(ops::bmm(q, k, true, false), T(1) / std::sqrt(static_cast<T>(c)));
  return ops::softmax_lastdim(scores);
}

template <typename T>
Var<T> SpatialAttention<T>::forward(const Var<T>& x) const {
  check(x);
  const int64_t b = x.dim(0), c = x.dim(1), sp = x.dim(2) * x.dim(3);
  auto attn = weights(x);
  auto v = ops::reshape(ops::conv2d(x, w_v), {b, c, sp});
  // (attn V^T)^T = V attn^T : C x SP
  auto attended = ops::reshape(ops::bmm(v, attn, false, true), x.shape());
  return ops::add(ops::mul_scalar_var(attended, epsilon), x);
}

template <typename T>
void SpatialAttention<T>::collect(nn::ParamSet<T>& set, const std::string& prefix) {
  set.param(join(prefix, "w_q"), w_q);
  set.param(join(prefix, "w_k"), w_k);
  set.param(join(prefix, "w_v"), w_v);
  set.param(join(prefix, "epsilon"), epsilon);
}

template <typename T>
Var<T> ChannelAttention<T>::forward(const Var<T>& x) const {
  require(x.value().rank() == 4, ErrorCode::kShape, "channel_attention: expected 4-d input");
  const int64_t b = x.dim(0), c = x.dim(1), sp = x.dim(2) * x.dim(3);
  auto flat = ops::reshape(x, {b, c, sp});
  auto attn = ops::softmax_lastdim(ops::bmm(flat, flat, false, true));
  auto out = ops::reshape(ops::bmm(attn, flat), x.shape());
  return ops::add(ops::mul_scalar_var(out, gamma), x);
}

template <typename T>
void ChannelAttention<T>::collect(nn::ParamSet<T>& set, const std::string& prefix) {
  set.param(join(prefix, "gamma"), gamma);
}

// ---------------------------------------------------------------------------

template <typename T>
ConvGru<T>::ConvGru(int in_ch, int hid, int kernel, nn::Rng& rng)
    : in_channels(in_ch),
      hidden_channels(hid),
      w_ar(in_ch, hid, kernel, rng, {1, kernel / 2, 1}),
      w_hr(hid, hid, kernel, rng, {1, kernel / 2, 1}),
      w_az(in_ch, hid, kernel, rng, {1, kernel / 2, 1}),
      w_hz(hid, hid, kernel, rng, {1, kernel / 2, 1}),
      w_ah(in_ch, hid, kernel, rng, {1, kernel / 2, 1}),
      w_hh(hid, hid, kernel, rng, {1, kernel / 2, 1}),
      bn_ar(hid), bn_hr(hid), bn_az(hid), bn_hz(hid), bn_ah(hid), bn_hh(hid),
      b_r(nn::make_param<T>({hid})),
      b_z(nn::make_param<T>({hid})),
      b_h(nn::make_param<T>({hid})) {}

template <typename T>
GruStepTrace<T> ConvGru<T>::step(const Var<T>& a, const Var<T>& h_prev, NormMode mode, std::optional<T> force_update) {
  require(a.value().rank() == 4 && a.dim(1) == in_channels, ErrorCode::kShape,
          "conv_gru_step: input " + shape_str(a.shape()) + " does not have " + std::to_string(in_channels) +
              " channels");
  const Shape expect{a.dim(0), hidden_channels, a.dim(2), a.dim(3)};
  require(h_prev.shape() == expect, ErrorCode::kShape,
          "conv_gru_step: hidden state " + shape_str(h_prev.shape()) + ", expected " + shape_str(expect));
  GruStepTrace<T> tr;
  tr.reset = ops::sigmoid(ops::add_channel_bias(
      ops::add(bn_ar.forward(w_ar.forward(a), mode), bn_hr.forward(w_hr.forward(h_prev), mode)), b_r));
  if (force_update) {
    tr.update = Var<T>(Tensor<T>(expect, *force_update));
  } else {
    tr.update = ops::sigmoid(ops::add_channel_bias(
        ops::add(bn_az.forward(w_az.forward(a), mode), bn_hz.forward(w_hz.forward(h_prev), mode)), b_z));
  }
  auto gated = ops::mul(tr.reset, h_prev);
  tr.candidate = ops::tanh(ops::add_channel_bias(
      ops::add(bn_ah.forward(w_ah.forward(a), mode), bn_hh.forward(w_hh.forward(gated), mode)), b_h));
  tr.hidden = ops::add(ops::mul(ops::one_minus(tr.update), h_prev), ops::mul(tr.update, tr.candidate));
  return tr;
}

template <typename T>
Var<T> ConvGru<T>::forward(const Var<T>& a_seq, const Var<T>* h0, NormMode mode) {
  require(a_seq.value().rank() == 5, ErrorCode::kShape,
          "conv_gru_forward: expected B x T x C x h x w, got " + shape_str(a_seq.shape()));
  const int64_t steps = a_seq.dim(1);
  require(steps >= 1, ErrorCode::kShape, "conv_gru_forward: sequence is empty (T = 0)");
  Var<T> h = h0 ? *h0 : Var<T>(Tensor<T>({a_seq.dim(0), hidden_channels, a_seq.dim(3), a_seq.dim(4)}));
  std::vector<Var<T>> states;
  states.reserve(static_cast<size_t>(steps));
  for (int64_t t = 0; t < steps; ++t) {
    h = step(ops::select_axis1(a_seq, t), h, mode).hidden;
    states.push_back(h);
  }
  return ops::stack_axis1(states);
}

template <typename T>
void ConvGru<T>::collect(nn::ParamSet<T>& set, const std::string& prefix) {
  w_ar.collect(set, join(prefix, "w_ar"));
  w_hr.collect(set, join(prefix, "w_hr"));
  w_az.collect(set, join(prefix, "w_az"));
  w_hz.collect(set, join(prefix, "w_hz"));
  w_ah.collect(set, join(prefix, "w_ah"));
  w_hh.collect(set, join(prefix, "w_hh"));
  bn_ar.collect(set, join(prefix, "bn_ar"));
  bn_hr.collect(set, join(prefix, "bn_hr"));
  bn_az.collect(set, join(prefix, "bn_az"));
  bn_hz.collect(set, join(prefix, "bn_hz"));
  bn_ah.collect(set, join(prefix, "bn_ah"));
  bn_hh.collect(set, join(prefix, "bn_hh"));
  set.param(join(prefix, "b_r"), b_r);
  set.param(join(prefix, "b_z"), b_z);
  set.param(join(prefix, "b_h"), b_h);
}

// ---------------------------------------------------------------------------

template <typename T>
SaliencyEncoder<T>::SaliencyEncoder(const SaliencyConfig& cfg, nn::Rng& rng)
    : stem_(3, cfg.stem_channels, 3, 2, nn::Act::kRelu6, rng) {
  int in_ch = cfg.stem_channels;
  int stride = 2;
  for (const auto& st : cfg.stages) {
    for (int i = 0; i < st.repeats; ++i) {
      const int s = i == 0 ? st.stride : 1;
      blocks_.emplace_back(in_ch, st.channels, s, st.expand, rng);
      stride *= s;
      block_stride_.push_back(stride);
      in_ch = st.channels;
      if (stride == 8) skip_s8_channels = in_ch;
      if (stride == 16) skip_s16_channels = in_ch;
    }
  }
  require(stride == 32 && skip_s8_channels > 0 && skip_s16_channels > 0, ErrorCode::kConfig,
          "saliency encoder stages must reach stride 32 through strides 8 and 16");
  head_ = nn::ConvBnAct<T>(in_ch, cfg.enc_channels, 1, 1, nn::Act::kRelu6, rng);
  post_ = nn::ConvBnAct<T>(cfg.enc_channels, cfg.post_channels, 1, 1, nn::Act::kRelu, rng);
}

template <typename T>
EncoderFeatures<T> SaliencyEncoder<T>::forward(const Var<T>& frames, NormMode mode) {
  EncoderFeatures<T> f;
  Var<T> h = stem_.forward(frames, mode);
  for (size_t i = 0; i < blocks_.size(); ++i) {
    h = blocks_[i].forward(h, mode);
    // Keep the last block at each resolution.
    const bool last_at_stride = i + 1 == blocks_.size() || block_stride_[i + 1] != block_stride_[i];
    if (last_at_stride && block_stride_[i] == 8) f.skip_s8 = h;
    if (last_at_stride && block_stride_[i] == 16) f.skip_s16 = h;
  }
  f.m = head_.forward(h, mode);
  f.p = post_.forward(f.m, mode);
  return f;
}

template <typename T>
void SaliencyEncoder<T>::collect(nn::ParamSet<T>& set, const std::string& prefix) {
  stem_.collect(set, join(prefix, "stem"));
  for (size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(set, join(prefix, "block" + std::to_string(i)));
  head_.collect(set, join(prefix, "head"));
  post_.collect(set, join(prefix, "post"));
}

// ---------------------------------------------------------------------------

template <typename T>
SaliencyDecoder<T>::SaliencyDecoder(const SaliencyConfig& cfg, int s16, int s8, nn::Rng& rng)
    : enrich(cfg.hidden_channels, cfg.decoder_wide(), 1, 1, nn::Act::kRelu, rng),
      skip16_proj(s16, cfg.decoder_wide(), 1, 1, nn::Act::kNone, rng),
      attention(cfg.decoder_wide(), rng),
      reduce(cfg.decoder_wide(), cfg.decoder_narrow(), 1, cfg.decoder_expand, rng),
      skip8_proj(s8, cfg.decoder_narrow(), 1, 1, nn::Act::kNone, rng),
      refine_a(cfg.decoder_narrow(), cfg.decoder_narrow(), 1, cfg.decoder_expand, rng),
      refine_b(cfg.decoder_narrow(), cfg.decoder_narrow(), 1, cfg.decoder_expand, rng),
      to_map(cfg.decoder_narrow(), 1, 1, cfg.decoder_expand, rng, false) {}

template <typename T>
Var<T> SaliencyDecoder<T>::logits(const Var<T>& hidden, const EncoderFeatures<T>& skip, NormMode mode) {
  require(hidden.value().rank() == 4, ErrorCode::kShape, "decode_saliency: expected 4-d hidden sequence");
  const auto& s16 = skip.skip_s16.shape();
  const auto& s8 = skip.skip_s8.shape();
  require(s16.size() == 4 && s16[0] == hidden.dim(0) && s16[2] == 2 * hidden.dim(2) && s16[3] == 2 * hidden.dim(3),
          ErrorCode::kShape,
          "decode_saliency: hidden " + shape_str(hidden.shape()) + " does not align with stride-16 skip " +
              shape_str(s16));
  require(s8.size() == 4 && s8[0] == hidden.dim(0) && s8[2] == 4 * hidden.dim(2) && s8[3] == 4 * hidden.dim(3),
          ErrorCode::kShape,
          "decode_saliency: hidden " + shape_str(hidden.shape()) + " does not align with stride-8 skip " +
              shape_str(s8));
  Var<T> h = enrich.forward(hidden, mode);
  h = ops::add(ops::upsample_nearest(h, 2), skip16_proj.forward(skip.skip_s16, mode));
  h = attention.forward(h);
  h = reduce.forward(h, mode);
  h = ops::add(ops::upsample_nearest(h, 2), skip8_proj.forward(skip.skip_s8, mode));
  h = refine_a.forward(h, mode);
  h = refine_b.forward(h, mode);
  h = channel_attention.forward(h);
  h = to_map.forward(h, mode);
  return ops::upsample_nearest(h, 8);
}

template <typename T>
Var<T> SaliencyDecoder<T>::forward(const Var<T>& hidden, const EncoderFeatures<T>& skip, NormMode mode) {
  return ops::sigmoid(logits(hidden, skip, mode));
}

template <typename T>
void SaliencyDecoder<T>::collect(nn::ParamSet<T>& set, const std::string& prefix) {
  enrich.collect(set, join(prefix, "enrich"));
  skip16_proj.collect(set, join(prefix, "skip16_proj"));
  attention.collect(set, join(prefix, "attention"));
  reduce.collect(set, join(prefix, "reduce"));
  skip8_proj.collect(set, join(prefix, "skip8_proj"));
  refine_a.collect(set, join(prefix, "refine_a"));
  refine_b.collect(set, join(prefix, "refine_b"));
  channel_attention.collect(set, join(prefix, "channel_attention"));
  to_map.collect(set, join(prefix, "to_map"));
}

// ---------------------------------------------------------------------------

template <typename T>
SaliencyPredictor<T>::SaliencyPredictor(const SaliencyConfig& cfg, nn::Rng& rng)
    : encoder(cfg, rng),
      attention(cfg.post_channels, rng),
      bottleneck(cfg.post_channels, cfg.post_channels, 1, cfg.bottleneck_expand, rng),
      gru(cfg.post_channels, cfg.hidden_channels, cfg.gru_kernel, rng),
      decoder(cfg, encoder.skip_s16_channels, encoder.skip_s8_channels, rng),
      cfg_(cfg) {}

template <typename T>
EncoderFeatures<T> SaliencyPredictor<T>::encode(const Var<T>& frames, NormMode mode) {
  validate_frames(frames.shape());
  validate_frame_values(frames.value());
  const auto& s = frames.shape();
  return encoder.forward(ops::reshape(frames, {s[0] * s[1], 3, s[3], s[4]}), mode);
}

template <typename T>
Var<T> SaliencyPredictor<T>::predict_logits(const Var<T>& frames, NormMode mode) {
  const Shape s = frames.shape();
  auto feats = encode(frames, mode);
  auto a = bottleneck.forward(attention.forward(feats.p), mode);
  const Shape seq{s[0], s[1], a.dim(1), a.dim(2), a.dim(3)};
  auto hidden = gru.forward(ops::reshape(a, seq), nullptr, mode);
  auto folded = ops::reshape(hidden, {s[0] * s[1], hidden.dim(2), hidden.dim(3), hidden.dim(4)});
  auto out = decoder.logits(folded, feats, mode);
  return ops::reshape(out, {s[0], s[1], 1, s[3], s[4]});
}

template <typename T>
Var<T> SaliencyPredictor<T>::predict(const Var<T>& frames, NormMode mode) {
  return ops::sigmoid(predict_logits(frames, mode));
}

template <typename T>
void SaliencyPredictor<T>::collect(nn::ParamSet<T>& set, const std::string& prefix) {
  encoder.collect(set, join(prefix, "encoder"));
  attention.collect(set, join(prefix, "attention"));
  bottleneck.collect(set, join(prefix, "bottleneck"));
  gru.collect(set, join(prefix, "gru"));
  decoder.collect(set, join(prefix, "decoder"));
}

template void validate_frame_values<float>(const Tensor<float>&);
template void validate_frame_values<double>(const Tensor<double>&);

#define STDA_INSTANTIATE_SALIENCY(T)      \
  template struct EncoderFeatures<T>;     \
  template class SpatialAttention<T>;     \
  template class ChannelAttention<T>;     \
  template class ConvGru<T>;              \
  template class SaliencyEncoder<T>;      \
  template class SaliencyDecoder<T>;      \
  template class SaliencyPredictor<T>;

STDA_INSTANTIATE_SALIENCY(float)
STDA_INSTANTIATE_SALIENCY(double)

}  // namespace stda
