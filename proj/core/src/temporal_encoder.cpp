#include "stda/temporal_encoder.hpp"

namespace stda {

template <typename T>
TemporalEncoder<T>::TemporalEncoder(const TemporalConfig& c, nn::Rng& rng)
    : cfg(c),
      ffn_in(c.t_len, c.hidden_factor * c.t_len, rng),
      ffn_out(c.hidden_factor * c.t_len, c.t_len, rng),
      norm(c.t_len),
      squeeze(nn::make_param<T>({1, c.t_len}, T(1) / static_cast<T>(c.t_len))) {
  require(c.t_len >= 1 && c.hidden_factor >= 1, ErrorCode::kConfig,
          "temporal encoder: t_len and hidden_factor must be >= 1 (D_hidden >= T)");
}

template <typename T>
Var<T> TemporalEncoder<T>::forward(const Var<T>& fused, nn::NormMode mode) {
  const Shape& s = fused.shape();
  require(s.size() == 5, ErrorCode::kShape, "temporal_encode: expected N x T x C x H x W, got " + shape_str(s));
  require(s[1] == cfg.t_len, ErrorCode::kShape,
          "temporal_encode: sequence has T = " + std::to_string(s[1]) + " but the encoder was built for T = " +
              std::to_string(cfg.t_len));
  const int64_t n = s[0], t = s[1], c = s[2], h = s[3], w = s[4];
  const int64_t rows = n * c * h * w;
  // N x T x C x H x W -> (N*C*H*W) x T
  auto hist = ops::reshape(ops::permute(fused, {0, 2, 3, 4, 1}), {rows, t});
  Var<T> z = hist;
  if (!cfg.ffn_identity) z = ffn_out.forward(ops::relu(ffn_in.forward(hist)));
  z = norm.forward(z, mode);
  auto out = ops::linear(z, squeeze);
  return ops::reshape(out, {n, c, h, w});
}

template <typename T>
void TemporalEncoder<T>::collect(nn::ParamSet<T>& set, const std::string& prefix) {
  ffn_in.collect(set, nn::join(prefix, "ffn_in"));
  ffn_out.collect(set, nn::join(prefix, "ffn_out"));
  norm.collect(set, nn::join(prefix, "bn"));
  set.param(nn::join(prefix, "squeeze"), squeeze);
}

template class TemporalEncoder<float>;
template class TemporalEncoder<double>;

}  // namespace stda
