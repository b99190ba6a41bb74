#pragma once

#include <memory>
#include <string>

#include "stda/attention_fusion.hpp"
#include "stda/behavior_classifier.hpp"
#include "stda/saliency_predictor.hpp"
#include "stda/temporal_encoder.hpp"

namespace stda {

SaliencyConfig saliency_preset(const std::string& preset);

struct StdaConfig {
  std::string preset = "tiny";  // tiny | paper
  std::string backbone;         // empty: the preset's residual classifier
  FusionMode fusion = FusionMode::kBlend;
  double alpha = 0.5;
  CrossAttentionConfig cross;
  int t_len = 4;
  int image_size = 32;
  int temporal_hidden_factor = 4;
  bool da_enabled = true;
  bool temporal_enabled = true;

  std::string backbone_name() const;
};

template <typename T>
struct StdaOutput {
  Var<T> logits;     // N x 3
  Var<T> attention;  // N x T x 1 x H x W
};

/// Full pipeline: attention prediction, fusion, temporal collapse, classifier.
/// With the attention branch disabled the fusion sees a uniform 0.5 map; with
/// the temporal branch disabled the classifier sees the last fused frame.
template <typename T>
class StdaModel : public nn::Module<T> {
 public:
  StdaModel(const StdaConfig& cfg, nn::Rng& rng);

  // attention, when given, replaces the predictor output (cached maps).
  StdaOutput<T> forward(const Var<T>& frames, nn::NormMode mode, const Var<T>* attention = nullptr);
  Var<T> attention_maps(const Var<T>& frames, nn::NormMode mode);
  Var<T> fuse(const Var<T>& frames, const Var<T>& attention) const;

  // Only the active branches are collected.
  void collect(nn::ParamSet<T>& set, const std::string& prefix) override;
  void collect_da(nn::ParamSet<T>& set, const std::string& prefix);

  const StdaConfig& config() const { return cfg_; }

  SaliencyPredictor<T> da;
  CrossAttentionFusion<T> cross;
  TemporalEncoder<T> temporal;
  std::unique_ptr<Classifier<T>> classifier;

 private:
  StdaConfig cfg_;
};

}  // namespace stda
