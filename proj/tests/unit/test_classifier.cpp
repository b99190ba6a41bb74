#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "stda/behavior_classifier.hpp"
#include "stda/stda_model.hpp"
#include "test_util.hpp"

using namespace stda;
using stda::testing::error_code_of;
using stda::testing::values_of;
using stda::testing::random_tensor;
using stda::testing::random_var;
using nn::NormMode;

namespace {

// Parameter counts from layer shapes alone.
int64_t conv(int64_t in, int64_t out, int64_t k, bool depthwise = false) { return out * (depthwise ? 1 : in) * k * k; }
int64_t bn(int64_t c) { return 2 * c; }
int64_t conv_bn(int64_t in, int64_t out, int64_t k, bool depthwise = false) { return conv(in, out, k, depthwise) + bn(out); }
int64_t linear(int64_t in, int64_t out) { return in * out + out; }

int64_t inverted_residual(int64_t in, int64_t out, int64_t expand, bool project_bn = true) {
  const int64_t hidden = in * expand;
  int64_t n = expand != 1 ? conv_bn(in, hidden, 1) : 0;
  n += conv_bn(hidden, hidden, 3, true);
  n += conv(hidden, out, 1) + (project_bn ? bn(out) : out);
  return n;
}

int64_t saliency_params(const SaliencyConfig& c) {
  int64_t n = conv_bn(3, c.stem_channels, 3);
  int64_t in = c.stem_channels, stride = 2, s8 = 0, s16 = 0;
  for (const auto& st : c.stages) {
    for (int i = 0; i < st.repeats; ++i) {
      n += inverted_residual(in, st.channels, st.expand);
      stride *= i == 0 ? st.stride : 1;
      in = st.channels;
      if (stride == 8) s8 = in;
      if (stride == 16) s16 = in;
    }
  }
  n += conv_bn(in, c.enc_channels, 1) + conv_bn(c.enc_channels, c.post_channels, 1);
  const int64_t post = c.post_channels, hid = c.hidden_channels, k = c.gru_kernel;
  n += 3 * post * post + 1;                                   // spatial attention
  n += inverted_residual(post, post, c.bottleneck_expand);    // before the GRU
  n += 3 * (conv(post, hid, k) + conv(hid, hid, k)) + 6 * bn(hid) + 3 * hid;
  const int64_t wide = 2 * post, narrow = post, e = c.decoder_expand;
  n += conv_bn(hid, wide, 1) + conv_bn(s16, wide, 1) + 3 * wide * wide + 1;
  n += inverted_residual(wide, narrow, e) + conv_bn(s8, narrow, 1);
  n += 2 * inverted_residual(narrow, narrow, e) + 1;
  n += inverted_residual(narrow, 1, e, false);
  return n;
}

int64_t classifier_params(const ClassifierConfig& c) {
  int64_t n = conv_bn(3, c.stem_channels, c.stem_kernel);
  int64_t in = c.stem_channels;
  for (const auto& st : c.stages) {
    for (int i = 0; i < st.blocks; ++i) {
      const int stride = i == 0 ? st.stride : 1;
      if (c.bottleneck) {
        const int64_t mid = st.channels / 4;
        n += conv_bn(in, mid, 1) + conv_bn(mid, mid, 3) + conv_bn(mid, st.channels, 1);
      } else {
        n += conv_bn(in, st.channels, 3) + conv_bn(st.channels, st.channels, 3);
      }
      if (stride != 1 || in != st.channels) n += conv_bn(in, st.channels, 1);
      in = st.channels;
    }
  }
  return n + linear(in, c.mlp_hidden) + linear(c.mlp_hidden, c.n_classes);
}

int64_t temporal_params(int64_t t, int64_t factor) {
  return linear(t, factor * t) + linear(factor * t, t) + bn(t) + t;
}

}  // namespace

TEST(Classify, TinyBackbonesProduceThreeFiniteLogits) {
  for (const auto& name : BackboneRegistry<float>::instance().names()) {
    if (name == "stda_resnet_paper") continue;
    nn::Rng rng(1);
    auto net = BackboneRegistry<float>::instance().create(name, {3, 64, 64, 3}, rng);
    auto x = Var<float>(random_tensor<float>({2, 3, 64, 64}, 2, 0, 1));
    for (auto mode : {NormMode::kTrain, NormMode::kEval}) {
      auto logits = net->forward(x, mode);
      ASSERT_EQ(logits.shape(), (Shape{2, 3})) << name;
      for (float v : logits.value().span()) EXPECT_TRUE(std::isfinite(v)) << name;
    }
  }
}

TEST(Classify, RejectsNonFiniteInput) {
  nn::Rng rng(3);
  BehaviorClassifier<double> net(ClassifierConfig::tiny(), rng);
  auto x = random_var<double>({1, 3, 32, 32}, 4, 0, 1);
  x.mutable_value()[5] = INFINITY;
  EXPECT_EQ(error_code_of([&] { net.forward(x, NormMode::kEval); }), ErrorCode::kNonFinite);
}

TEST(Classify, SoftmaxOfLogitsSumsToOne) {
  nn::Rng rng(3);
  BehaviorClassifier<double> net(ClassifierConfig::tiny(), rng);
  auto probs = ops::softmax_lastdim(net.forward(random_var<double>({4, 3, 32, 32}, 5, 0, 1), NormMode::kTrain));
  for (int r = 0; r < 4; ++r) EXPECT_NEAR(probs.value()[r * 3] + probs.value()[r * 3 + 1] + probs.value()[r * 3 + 2], 1.0, 1e-6);
}

TEST(GlobalPool, ConstantMapPoolsToTheConstant) {
  auto x = Var<double>(Tensor<double>({2, 4, 5, 7}, 0.625));
  for (double v : values_of(ops::global_avg_pool(x))) EXPECT_DOUBLE_EQ(v, 0.625);
}

TEST(GlobalPool, InvariantToSpatialPermutation) {
  auto x = random_tensor<double>({1, 3, 6, 6}, 6, -2, 2);
  auto shuffled = x;
  std::vector<int> perm(36);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(7));
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 36; ++p) shuffled[c * 36 + p] = x[c * 36 + perm[static_cast<size_t>(p)]];
  auto a = ops::global_avg_pool(Var<double>(x)), b = ops::global_avg_pool(Var<double>(shuffled));
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(a.value()[c], b.value()[c], 1e-14);
}

TEST(PredictLabel, Examples) {
  EXPECT_EQ(predict_label(std::span<const double>(std::vector<double>{2.0, 0.1, 0.1})), BehaviorLabel::kBrake);
  EXPECT_EQ(predict_label(std::span<const double>(std::vector<double>{1.0, 1.0, 0.5})), BehaviorLabel::kBrake);
  EXPECT_EQ(predict_label(std::span<const double>(std::vector<double>{0.0, 0.1, 0.9})), BehaviorLabel::kTurnLeft);
}

TEST(PredictLabel, InvariantToShiftAndPositiveScale) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(-3, 3), pos(0.1, 5);
  for (int i = 0; i < 500; ++i) {
    std::vector<double> l{u(rng), u(rng), u(rng)};
    const double shift = u(rng), scale = pos(rng);
    std::vector<double> m;
    for (double v : l) m.push_back(v * scale + shift);
    EXPECT_EQ(predict_label(std::span<const double>(l)), predict_label(std::span<const double>(m)));
  }
}

TEST(BehaviorLabel, NamesRoundTrip) {
  for (auto l : {BehaviorLabel::kBrake, BehaviorLabel::kTurnRight, BehaviorLabel::kTurnLeft}) {
    EXPECT_EQ(parse_behavior(to_string(l)), l);
  }
  EXPECT_EQ(error_code_of([] { parse_behavior("accelerate"); }), ErrorCode::kValue);
}

TEST(BackboneRegistry, NamesAreUniqueAndLookupsFailLoudly) {
  auto& reg = BackboneRegistry<float>::instance();
  auto names = reg.names();
  EXPECT_EQ(std::set<std::string>(names.begin(), names.end()).size(), names.size());
  for (const auto& n : tiny_backbone_names()) EXPECT_TRUE(reg.contains(n));
  EXPECT_EQ(error_code_of([&] { reg.add("plain_cnn_tiny", nullptr); }), ErrorCode::kConfig);
  nn::Rng rng(1);
  EXPECT_EQ(error_code_of([&] { reg.create("vgg_huge", {}, rng); }), ErrorCode::kNotFound);
}

TEST(ParameterCount, TinyPresetMatchesShapeProductOracle) {
  nn::Rng rng(9);
  StdaConfig cfg;
  StdaModel<float> model(cfg, rng);
  const int64_t expect = saliency_params(SaliencyConfig::tiny()) + temporal_params(cfg.t_len, cfg.temporal_hidden_factor) +
                         classifier_params(ClassifierConfig::tiny());
  EXPECT_EQ(model.parameters().param_count(), expect);

  nn::Rng rng2(9);
  SaliencyPredictor<float> da(SaliencyConfig::tiny(), rng2);
  EXPECT_EQ(da.parameters().param_count(), saliency_params(SaliencyConfig::tiny()));
}

TEST(ParameterCount, PaperPresetMatchesOracleAndResidualTrunkReference) {
  nn::Rng rng(10);
  StdaConfig cfg;
  cfg.preset = "paper";
  StdaModel<float> model(cfg, rng);
  const auto ccfg = ClassifierConfig::paper();
  const int64_t expect =
      saliency_params(SaliencyConfig::paper()) + temporal_params(cfg.t_len, cfg.temporal_hidden_factor) + classifier_params(ccfg);
  EXPECT_EQ(model.parameters().param_count(), expect);
  // 101-layer residual trunk: 44,549,160 with a 2048 -> 1000 linear head.
  const int64_t trunk = 44549160 - linear(2048, 1000);
  EXPECT_EQ(classifier_params(ccfg), trunk + linear(2048, 256) + linear(256, 3));
}
