#pragma once

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "stda/nn.hpp"

namespace stda {

enum class BehaviorLabel : int { kBrake = 0, kTurnRight = 1, kTurnLeft = 2 };

inline constexpr int kNumBehaviors = 3;

std::string to_string(BehaviorLabel label);
BehaviorLabel parse_behavior(const std::string& s);

/// Argmax over logits; ties resolve to the lowest class index.
BehaviorLabel predict_label(std::span<const double> logits);

template <typename T>
BehaviorLabel predict_label(std::span<const T> logits) {
  std::vector<double> tmp(logits.begin(), logits.end());
  return predict_label(std::span<const double>(tmp));
}

/// Image classifier contract shared by the behavior head and every backbone
/// plug-in: N x 3 x H x W -> N x n_classes logits.
template <typename T>
class Classifier : public nn::Module<T> {
 public:
  virtual Var<T> forward(const Var<T>& image, nn::NormMode mode) = 0;
};

struct ResStageSpec {
  int channels;
  int blocks;
  int stride;
};

struct ClassifierConfig {
  int in_channels = 3;
  int n_classes = kNumBehaviors;
  int stem_channels = 8;
  int stem_kernel = 3;
  int stem_stride = 1;
  bool bottleneck = false;
  std::vector<ResStageSpec> stages;
  int mlp_hidden = 32;

  static ClassifierConfig tiny();
  // 101-layer bottleneck residual network with a 256-wide MLP head.
  static ClassifierConfig paper();
};

/// Residual CNN: conv/BN/ReLU stem, max-pool, stages that open with a
/// projection ("convolutional") block followed by identity blocks, global
/// average pool, then an MLP.
template <typename T>
class BehaviorClassifier : public Classifier<T> {
 public:
  BehaviorClassifier() = default;
  BehaviorClassifier(const ClassifierConfig& cfg, nn::Rng& rng);

  Var<T> forward(const Var<T>& image, nn::NormMode mode) override;
  // Pooled N x C features before the MLP.
  Var<T> features(const Var<T>& image, nn::NormMode mode);
  void collect(nn::ParamSet<T>& set, const std::string& prefix) override;

  const ClassifierConfig& config() const { return cfg_; }

  struct Block {
    std::vector<nn::ConvBnAct<T>> path;  // last entry has no activation
    bool project = false;
    nn::ConvBnAct<T> shortcut;
  };

  nn::ConvBnAct<T> stem;
  std::vector<Block> blocks;
  nn::Linear<T> fc1, fc2;

 private:
  ClassifierConfig cfg_;
};

/// Construction input for a backbone plug-in.
struct BackboneSpec {
  int64_t channels = 3;
  int64_t height = 32;
  int64_t width = 32;
  int n_classes = kNumBehaviors;
};

template <typename T>
using BackboneFactory = std::function<std::unique_ptr<Classifier<T>>(const BackboneSpec&, nn::Rng&)>;

/// Name -> factory table. Names are unique; registering a duplicate throws.
template <typename T>
class BackboneRegistry {
 public:
  static BackboneRegistry& instance();

  void add(const std::string& name, BackboneFactory<T> factory);
  bool contains(const std::string& name) const { return factories_.count(name) > 0; }
  std::unique_ptr<Classifier<T>> create(const std::string& name, const BackboneSpec& spec, nn::Rng& rng) const;
  std::vector<std::string> names() const;

 private:
  BackboneRegistry();
  std::map<std::string, BackboneFactory<T>> factories_;
};

// The tiny backbones used by the ablation grid.
std::vector<std::string> tiny_backbone_names();

}  // namespace stda
