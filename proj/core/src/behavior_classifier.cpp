#include "stda/behavior_classifier.hpp"

namespace stda {

using nn::join;
using nn::NormMode;

std::string to_string(BehaviorLabel label) {
  switch (label) {
    case BehaviorLabel::kBrake: return "brake";
    case BehaviorLabel::kTurnRight: return "turn_right";
    case BehaviorLabel::kTurnLeft: return "turn_left";
  }
  return "unknown";
}

BehaviorLabel parse_behavior(const std::string& s) {
  if (s == "brake" || s == "0") return BehaviorLabel::kBrake;
  if (s == "turn_right" || s == "1") return BehaviorLabel::kTurnRight;
  if (s == "turn_left" || s == "2") return BehaviorLabel::kTurnLeft;
  fail(ErrorCode::kValue, "unknown behavior label '" + s + "'");
}

BehaviorLabel predict_label(std::span<const double> logits) {
  require(logits.size() == kNumBehaviors, ErrorCode::kShape, "predict_label: expected 3 logits");
  size_t best = 0;
  for (size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<BehaviorLabel>(best);
}

ClassifierConfig ClassifierConfig::tiny() {
  ClassifierConfig cfg;
  cfg.stem_channels = 8;
  cfg.stem_kernel = 3;
  cfg.stem_stride = 1;
  cfg.bottleneck = false;
  cfg.stages = {{16, 1, 1}, {32, 1, 2}};
  cfg.mlp_hidden = 32;
  return cfg;
}

ClassifierConfig ClassifierConfig::paper() {
  ClassifierConfig cfg;
  cfg.stem_channels = 64;
  cfg.stem_kernel = 7;
  cfg.stem_stride = 2;
  cfg.bottleneck = true;
  cfg.stages = {{256, 3, 1}, {512, 4, 2}, {1024, 23, 2}, {2048, 3, 2}};
  cfg.mlp_hidden = 256;
  return cfg;
}

template <typename T>
BehaviorClassifier<T>::BehaviorClassifier(const ClassifierConfig& cfg, nn::Rng& rng)
    : stem(cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, nn::Act::kRelu, rng), cfg_(cfg) {
  int in_ch = cfg.stem_channels;
  for (const auto& st : cfg.stages) {
    for (int i = 0; i < st.blocks; ++i) {
      const int stride = i == 0 ? st.stride : 1;
      Block b;
      if (cfg.bottleneck) {
        const int mid = st.channels / 4;
        b.path.emplace_back(in_ch, mid, 1, 1, nn::Act::kRelu, rng);
        b.path.emplace_back(mid, mid, 3, stride, nn::Act::kRelu, rng);
        b.path.emplace_back(mid, st.channels, 1, 1, nn::Act::kNone, rng);
      } else {
        b.path.emplace_back(in_ch, st.channels, 3, stride, nn::Act::kRelu, rng);
        b.path.emplace_back(st.channels, st.channels, 3, 1, nn::Act::kNone, rng);
      }
      b.project = stride != 1 || in_ch != st.channels;
      if (b.project) b.shortcut = nn::ConvBnAct<T>(in_ch, st.channels, 1, stride, nn::Act::kNone, rng);
      blocks.push_back(std::move(b));
      in_ch = st.channels;
    }
  }
  fc1 = nn::Linear<T>(in_ch, cfg.mlp_hidden, rng);
  fc2 = nn::Linear<T>(cfg.mlp_hidden, cfg.n_classes, rng);
}

template <typename T>
Var<T> BehaviorClassifier<T>::features(const Var<T>& image, NormMode mode) {
  require(image.value().rank() == 4 && image.dim(1) == cfg_.in_channels, ErrorCode::kShape,
          "classify: expected N x " + std::to_string(cfg_.in_channels) + " x H x W, got " +
              shape_str(image.shape()));
  require(image.value().all_finite(), ErrorCode::kNonFinite, "classify: input contains a non-finite value");
  Var<T> h = ops::max_pool2d(stem.forward(image, mode), 3, 2, 1);
  for (auto& b : blocks) {
    Var<T> y = h;
    for (auto& layer : b.path) y = layer.forward(y, mode);
    Var<T> skip = b.project ? b.shortcut.forward(h, mode) : h;
    h = ops::relu(ops::add(y, skip));
  }
  return ops::global_avg_pool(h);
}

template <typename T>
Var<T> BehaviorClassifier<T>::forward(const Var<T>& image, NormMode mode) {
  return fc2.forward(ops::relu(fc1.forward(features(image, mode))));
}

template <typename T>
void BehaviorClassifier<T>::collect(nn::ParamSet<T>& set, const std::string& prefix) {
  stem.collect(set, join(prefix, "stem"));
  for (size_t i = 0; i < blocks.size(); ++i) {
    const std::string bp = join(prefix, "block" + std::to_string(i));
    for (size_t j = 0; j < blocks[i].path.size(); ++j) blocks[i].path[j].collect(set, join(bp, "conv" + std::to_string(j)));
    if (blocks[i].project) blocks[i].shortcut.collect(set, join(bp, "shortcut"));
  }
  fc1.collect(set, join(prefix, "fc1"));
  fc2.collect(set, join(prefix, "fc2"));
}

namespace {

// VGG-style stack: (conv-BN-ReLU, max-pool) x 3, global pool, linear.
template <typename T>
class PlainCnn : public Classifier<T> {
 public:
  PlainCnn(const BackboneSpec& spec, nn::Rng& rng)
      : c1_(static_cast<int>(spec.channels), 8, 3, 1, nn::Act::kRelu, rng),
        c2_(8, 16, 3, 1, nn::Act::kRelu, rng),
        c3_(16, 32, 3, 1, nn::Act::kRelu, rng),
        fc_(32, spec.n_classes, rng) {}

  Var<T> forward(const Var<T>& x, NormMode mode) override {
    auto h = ops::max_pool2d(c1_.forward(x, mode), 2, 2, 0);
    h = ops::max_pool2d(c2_.forward(h, mode), 2, 2, 0);
    h = c3_.forward(h, mode);
    return fc_.forward(ops::global_avg_pool(h));
  }

  void collect(nn::ParamSet<T>& set, const std::string& prefix) override {
    c1_.collect(set, join(prefix, "conv1"));
    c2_.collect(set, join(prefix, "conv2"));
    c3_.collect(set, join(prefix, "conv3"));
    fc_.collect(set, join(prefix, "fc"));
  }

 private:
  nn::ConvBnAct<T> c1_, c2_, c3_;
  nn::Linear<T> fc_;
};

// Inverted-residual stack with a linear head.
template <typename T>
class MobileNetTiny : public Classifier<T> {
 public:
  MobileNetTiny(const BackboneSpec& spec, nn::Rng& rng)
      : stem_(static_cast<int>(spec.channels), 8, 3, 1, nn::Act::kRelu6, rng),
        b1_(8, 12, 2, 4, rng),
        b2_(12, 12, 1, 4, rng),
        b3_(12, 24, 2, 4, rng),
        head_(24, 48, 1, 1, nn::Act::kRelu6, rng),
        fc_(48, spec.n_classes, rng) {}

  Var<T> forward(const Var<T>& x, NormMode mode) override {
    auto h = stem_.forward(x, mode);
    h = b3_.forward(b2_.forward(b1_.forward(h, mode), mode), mode);
    return fc_.forward(ops::global_avg_pool(head_.forward(h, mode)));
  }

  void collect(nn::ParamSet<T>& set, const std::string& prefix) override {
    stem_.collect(set, join(prefix, "stem"));
    b1_.collect(set, join(prefix, "block1"));
    b2_.collect(set, join(prefix, "block2"));
    b3_.collect(set, join(prefix, "block3"));
    head_.collect(set, join(prefix, "head"));
    fc_.collect(set, join(prefix, "fc"));
  }

 private:
  nn::ConvBnAct<T> stem_;
  nn::InvertedResidual<T> b1_, b2_, b3_;
  nn::ConvBnAct<T> head_;
  nn::Linear<T> fc_;
};

template <typename T>
ClassifierConfig with_spec(ClassifierConfig cfg, const BackboneSpec& spec) {
  cfg.in_channels = static_cast<int>(spec.channels);
  cfg.n_classes = spec.n_classes;
  return cfg;
}

}  // namespace

std::vector<std::string> tiny_backbone_names() { return {"stda_resnet_tiny", "plain_cnn_tiny", "mobilenet_tiny"}; }

template <typename T>
BackboneRegistry<T>::BackboneRegistry() {
  add("stda_resnet_tiny", [](const BackboneSpec& s, nn::Rng& rng) -> std::unique_ptr<Classifier<T>> {
    return std::make_unique<BehaviorClassifier<T>>(with_spec<T>(ClassifierConfig::tiny(), s), rng);
  });
  add("stda_resnet_paper", [](const BackboneSpec& s, nn::Rng& rng) -> std::unique_ptr<Classifier<T>> {
    return std::make_unique<BehaviorClassifier<T>>(with_spec<T>(ClassifierConfig::paper(), s), rng);
  });
  add("plain_cnn_tiny", [](const BackboneSpec& s, nn::Rng& rng) -> std::unique_ptr<Classifier<T>> {
    return std::make_unique<PlainCnn<T>>(s, rng);
  });
  add("mobilenet_tiny", [](const BackboneSpec& s, nn::Rng& rng) -> std::unique_ptr<Classifier<T>> {
    return std::make_unique<MobileNetTiny<T>>(s, rng);
  });
}

template <typename T>
BackboneRegistry<T>& BackboneRegistry<T>::instance() {
  static BackboneRegistry registry;
  return registry;
}

template <typename T>
void BackboneRegistry<T>::add(const std::string& name, BackboneFactory<T> factory) {
  require(!contains(name), ErrorCode::kConfig, "backbone '" + name + "' is already registered");
  factories_.emplace(name, std::move(factory));
}

template <typename T>
std::unique_ptr<Classifier<T>> BackboneRegistry<T>::create(const std::string& name, const BackboneSpec& spec,
                                                           nn::Rng& rng) const {
  auto it = factories_.find(name);
  if (it == factories_.end()) fail(ErrorCode::kNotFound, "unknown backbone '" + name + "'");
  return it->second(spec, rng);
}

template <typename T>
std::vector<std::string> BackboneRegistry<T>::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : factories_) out.push_back(k);
  return out;
}

template class BehaviorClassifier<float>;
template class BehaviorClassifier<double>;
template class BackboneRegistry<float>;
template class BackboneRegistry<double>;

}  // namespace stda
