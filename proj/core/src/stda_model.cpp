#include "stda/stda_model.hpp"

namespace stda {

std::string StdaConfig::backbone_name() const {
  if (!backbone.empty()) return backbone;
  return preset == "paper" ? "stda_resnet_paper" : "stda_resnet_tiny";
}

SaliencyConfig saliency_preset(const std::string& preset) {
  if (preset == "tiny") return SaliencyConfig::tiny();
  if (preset == "paper") return SaliencyConfig::paper();
  fail(ErrorCode::kConfig, "model.preset must be tiny or paper, got '" + preset + "'");
}

template <typename T>
StdaModel<T>::StdaModel(const StdaConfig& cfg, nn::Rng& rng)
    : da(saliency_preset(cfg.preset), rng),
      cross(cfg.cross, rng),
      temporal(TemporalConfig{cfg.t_len, cfg.temporal_hidden_factor, false}, rng),
      cfg_(cfg) {
  require(cfg.alpha >= 0.0 && cfg.alpha <= 1.0, ErrorCode::kConfig, "fusion.alpha must lie in [0,1]");
  require(cfg.t_len >= 1, ErrorCode::kConfig, "T must be at least 1");
  BackboneSpec spec{3, cfg.image_size, cfg.image_size, kNumBehaviors};
  classifier = BackboneRegistry<T>::instance().create(cfg.backbone_name(), spec, rng);
}

template <typename T>
Var<T> StdaModel<T>::attention_maps(const Var<T>& frames, nn::NormMode mode) {
  if (cfg_.da_enabled) return da.predict(frames, mode);
  const Shape& s = frames.shape();
  return Var<T>(Tensor<T>({s[0], s[1], 1, s[3], s[4]}, T(0.5)));
}

template <typename T>
Var<T> StdaModel<T>::fuse(const Var<T>& frames, const Var<T>& attention) const {
  auto att3 = channel_extend(attention);
  if (cfg_.fusion == FusionMode::kBlend) return blend_fuse(frames, att3, cfg_.alpha);
  return cross.forward(frames, att3);
}

template <typename T>
StdaOutput<T> StdaModel<T>::forward(const Var<T>& frames, nn::NormMode mode, const Var<T>* attention) {
  validate_frames(frames.shape());
  require(frames.dim(1) == cfg_.t_len, ErrorCode::kShape,
          "model built for T = " + std::to_string(cfg_.t_len) + " got frames " + shape_str(frames.shape()));
  StdaOutput<T> out;
  if (attention != nullptr && cfg_.da_enabled) {
    const Shape& s = frames.shape();
    require(attention->shape() == Shape({s[0], s[1], 1, s[3], s[4]}), ErrorCode::kShape,
            "cached attention " + shape_str(attention->shape()) + " does not match frames " + shape_str(s));
    out.attention = *attention;
  } else {
    out.attention = attention_maps(frames, mode);
  }
  auto fused = fuse(frames, out.attention);
  Var<T> image = cfg_.temporal_enabled ? temporal.forward(fused, mode) : ops::select_axis1(fused, cfg_.t_len - 1);
  out.logits = classifier->forward(image, mode);
  return out;
}

template <typename T>
void StdaModel<T>::collect_da(nn::ParamSet<T>& set, const std::string& prefix) {
  da.collect(set, nn::join(prefix, "da"));
}

template <typename T>
void StdaModel<T>::collect(nn::ParamSet<T>& set, const std::string& prefix) {
  if (cfg_.da_enabled) collect_da(set, prefix);
  if (cfg_.fusion == FusionMode::kCrossAttention) cross.collect(set, nn::join(prefix, "fusion"));
  if (cfg_.temporal_enabled) temporal.collect(set, nn::join(prefix, "temporal"));
  classifier->collect(set, nn::join(prefix, "classifier"));
}

template class StdaModel<float>;
template class StdaModel<double>;

}  // namespace stda
