#include "stda/attention_fusion.hpp"

#include <cmath>

namespace stda {

FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "blend") return FusionMode::kBlend;
  if (s == "cross_attention") return FusionMode::kCrossAttention;
  fail(ErrorCode::kConfig, "fusion.mode must be blend or cross_attention, got '" + s + "'");
}

std::string to_string(FusionMode mode) {
  return mode == FusionMode::kBlend ? "blend" : "cross_attention";
}

template <typename T>
Var<T> channel_extend(const Var<T>& attention) {
  const Shape& s = attention.shape();
  require(s.size() == 5 && s[2] == 1, ErrorCode::kShape,
          "channel_extend: expected N x T x 1 x H x W, got " + shape_str(s));
  auto flat = ops::reshape(attention, {s[0] * s[1], 1, s[3], s[4]});
  return ops::reshape(ops::repeat_channels(flat, 3), {s[0], s[1], 3, s[3], s[4]});
}

template <typename T>
Var<T> blend_fuse(const Var<T>& frames, const Var<T>& attention3, double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, ErrorCode::kValue,
          "blend_fuse: alpha must lie in [0,1], got " + std::to_string(alpha));
  require(frames.shape() == attention3.shape(), ErrorCode::kShape,
          "blend_fuse: frames " + shape_str(frames.shape()) + " vs attention " + shape_str(attention3.shape()));
  const T a = static_cast<T>(alpha);
  return ops::add(ops::scale(frames, T(1) - a), ops::scale(attention3, a));
}

template <typename T>
CrossAttentionFusion<T>::CrossAttentionFusion(const CrossAttentionConfig& c, nn::Rng& rng)
    : cfg(c),
      query_proj(3, c.token_dim, rng),
      frame_proj(3, c.token_dim, rng),
      norm(c.token_dim),
      back_proj(c.token_dim, 3, rng) {
  require(c.token_dim >= 1 && c.downsample >= 1, ErrorCode::kConfig, "cross attention: bad token_dim/downsample");
}

template <typename T>
typename CrossAttentionFusion<T>::Tokens CrossAttentionFusion<T>::tokenize(const Var<T>& frames,
                                                                           const Var<T>& attention3) const {
  const Shape& s = frames.shape();
  require(s.size() == 5 && s[2] == 3, ErrorCode::kShape,
          "cross_attention_fuse: expected N x T x 3 x H x W frames, got " + shape_str(s));
  require(attention3.shape() == s, ErrorCode::kShape,
          "cross_attention_fuse: token count mismatch between frames " + shape_str(s) + " and attention " +
              shape_str(attention3.shape()));
  const int64_t images = s[0] * s[1];
  auto to_tokens = [&](const Var<T>& x, const nn::Linear<T>& proj, int64_t& h, int64_t& w) {
    Var<T> img = ops::reshape(x, {images, 3, s[3], s[4]});
    if (cfg.downsample > 1) img = ops::avg_pool(img, cfg.downsample);
    h = img.dim(2);
    w = img.dim(3);
    auto tok = ops::permute(ops::reshape(img, {images, 3, h * w}), {0, 2, 1});
    auto projected = proj.forward(ops::reshape(tok, {images * h * w, 3}));
    return ops::reshape(projected, {images, h * w, static_cast<int64_t>(cfg.token_dim)});
  };
  Tokens t;
  t.images = images;
  t.query = to_tokens(attention3, query_proj, t.h, t.w);
  t.frame = to_tokens(frames, frame_proj, t.h, t.w);
  return t;
}

template <typename T>
Var<T> CrossAttentionFusion<T>::weights(const Var<T>& frames, const Var<T>& attention3) const {
  auto t = tokenize(frames, attention3);
  const T inv = T(1) / std::sqrt(static_cast<T>(cfg.token_dim));
  return ops::softmax_lastdim(ops::scale(ops::bmm(t.query, t.frame, false, true), inv));
}

template <typename T>
Var<T> CrossAttentionFusion<T>::forward(const Var<T>& frames, const Var<T>& attention3) const {
  auto t = tokenize(frames, attention3);
  const T inv = T(1) / std::sqrt(static_cast<T>(cfg.token_dim));
  auto attn = ops::softmax_lastdim(ops::scale(ops::bmm(t.query, t.frame, false, true), inv));
  auto mixed = norm.forward(ops::add(t.query, ops::bmm(attn, t.frame)));
  const int64_t hw = t.h * t.w;
  auto rgb = back_proj.forward(ops::reshape(mixed, {t.images * hw, static_cast<int64_t>(cfg.token_dim)}));
  auto img = ops::reshape(ops::permute(ops::reshape(rgb, {t.images, hw, 3}), {0, 2, 1}), {t.images, 3, t.h, t.w});
  if (cfg.downsample > 1) img = ops::upsample_nearest(img, cfg.downsample);
  return ops::reshape(img, frames.shape());
}

template <typename T>
void CrossAttentionFusion<T>::collect(nn::ParamSet<T>& set, const std::string& prefix) {
  query_proj.collect(set, nn::join(prefix, "query_proj"));
  frame_proj.collect(set, nn::join(prefix, "frame_proj"));
  norm.collect(set, nn::join(prefix, "norm"));
  back_proj.collect(set, nn::join(prefix, "back_proj"));
}

template Var<float> channel_extend<float>(const Var<float>&);
template Var<double> channel_extend<double>(const Var<double>&);
template Var<float> blend_fuse<float>(const Var<float>&, const Var<float>&, double);
template Var<double> blend_fuse<double>(const Var<double>&, const Var<double>&, double);
template class CrossAttentionFusion<float>;
template class CrossAttentionFusion<double>;

}  // namespace stda
