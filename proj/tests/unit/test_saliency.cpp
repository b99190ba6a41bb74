#include <cmath>
#include <fstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "stda/saliency_predictor.hpp"
#include "test_util.hpp"

using namespace stda;
using stda::testing::error_code_of;
using stda::testing::random_tensor;
using stda::testing::random_var;
using nn::NormMode;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Var<double> frames_in_unit(Shape shape, uint64_t seed) { return random_var<double>(std::move(shape), seed, 0.0, 1.0); }

void set_all(Var<double>& v, double value) { v.mutable_value().fill(value); }

// One input channel, one hidden channel, 1x1 kernel, all weights `w`, zero biases.
ConvGru<double> scalar_gru(double w) {
  nn::Rng rng(1);
  ConvGru<double> gru(1, 1, 1, rng);
  for (auto* conv : {&gru.w_ar, &gru.w_hr, &gru.w_az, &gru.w_hz, &gru.w_ah, &gru.w_hh}) set_all(conv->weight, w);
  return gru;
}

Var<double> scalar(double v) { return Var<double>(Tensor<double>({1, 1, 1, 1}, v)); }

}  // namespace

TEST(EncodeFrames, PaperPresetShapesAt224) {
  nn::Rng rng(3);
  SaliencyPredictor<double> da(SaliencyConfig::paper(), rng);
  NoGradGuard guard;
  auto f = da.encode(frames_in_unit({1, 2, 3, 224, 224}, 1), NormMode::kEval);
  EXPECT_EQ(f.m.shape(), (Shape{2, 1280, 7, 7}));
  EXPECT_EQ(f.p.shape(), (Shape{2, 256, 7, 7}));
}

TEST(EncodeFrames, TinyPresetShapesAt64) {
  nn::Rng rng(3);
  SaliencyPredictor<double> da(SaliencyConfig::tiny(), rng);
  auto f = da.encode(frames_in_unit({1, 1, 3, 64, 64}, 1), NormMode::kEval);
  EXPECT_EQ(f.m.shape(), (Shape{1, 64, 2, 2}));
  EXPECT_EQ(f.p.shape(), (Shape{1, 16, 2, 2}));
  EXPECT_LT(da.config().post_channels, da.config().enc_channels);
}

TEST(EncodeFrames, ZeroInputGivesZeroFeaturesWithIdentityNorm) {
  nn::Rng rng(5);
  SaliencyPredictor<double> da(SaliencyConfig::tiny(), rng);
  auto f = da.encode(Var<double>(Tensor<double>({1, 2, 3, 64, 64})), NormMode::kIdentity);
  for (double v : f.p.value().span()) EXPECT_EQ(v, 0.0);
}

TEST(EncodeFrames, RejectsBadSpatialSizeAndNonFinite) {
  nn::Rng rng(5);
  SaliencyPredictor<double> da(SaliencyConfig::tiny(), rng);
  EXPECT_EQ(error_code_of([&] { da.encode(frames_in_unit({1, 1, 3, 48, 64}, 1), NormMode::kEval); }),
            ErrorCode::kShape);
  auto bad = frames_in_unit({1, 1, 3, 32, 32}, 1);
  bad.mutable_value()[17] = std::nan("");
  EXPECT_EQ(error_code_of([&] { da.encode(bad, NormMode::kEval); }), ErrorCode::kNonFinite);
}

TEST(SpatialAttention, ZeroEpsilonIsExactIdentity) {
  nn::Rng rng(7);
  SpatialAttention<double> att(4, rng);
  auto x = random_var<double>({3, 4, 3, 5}, 11, -3, 3);
  auto y = att.forward(x);
  EXPECT_EQ(y.value().storage(), x.value().storage());
}

TEST(SpatialAttention, SinglePositionAddsScaledValue) {
  nn::Rng rng(7);
  SpatialAttention<double> att(2, rng);
  att.epsilon.mutable_value()[0] = 0.6;
  auto x = Var<double>(Tensor<double>({1, 2, 1, 1}, std::vector<double>{0.3, -1.2}));
  auto y = att.forward(x);
  const auto& wv = att.w_v.value();
  for (int c = 0; c < 2; ++c) {
    const double v = wv[c * 2 + 0] * 0.3 + wv[c * 2 + 1] * -1.2;
    EXPECT_NEAR(y.value()[c], 0.6 * v + x.value()[c], 1e-15);
  }
}

TEST(SpatialAttention, MatchesBruteForceOnTwoByTwo) {
  nn::Rng rng(7);
  SpatialAttention<double> att(2, rng);
  att.w_q.mutable_value() = Tensor<double>({2, 2, 1, 1}, std::vector<double>{0.5, -0.2, 0.1, 0.9});
  att.w_k.mutable_value() = Tensor<double>({2, 2, 1, 1}, std::vector<double>{-0.3, 0.8, 0.7, 0.4});
  att.w_v.mutable_value() = Tensor<double>({2, 2, 1, 1}, std::vector<double>{1.1, 0.2, -0.6, 0.3});
  att.epsilon.mutable_value()[0] = 0.75;
  // x[c][pos], pos = row-major over 2 x 2
  const double x[2][4] = {{0.2, -0.4, 1.0, 0.5}, {-0.7, 0.3, 0.1, 0.9}};
  Tensor<double> xt({1, 2, 2, 2});
  for (int c = 0; c < 2; ++c)
    for (int p = 0; p < 4; ++p) xt[c * 4 + p] = x[c][p];
  auto y = att.forward(Var<double>(xt));

  auto project = [&](const Tensor<double>& w, int c, int p) { return w[c * 2] * x[0][p] + w[c * 2 + 1] * x[1][p]; };
  for (int i = 0; i < 4; ++i) {
    double scores[4], z = 0;
    for (int j = 0; j < 4; ++j) {
      scores[j] = 0;
      for (int c = 0; c < 2; ++c) scores[j] += project(att.w_q.value(), c, i) * project(att.w_k.value(), c, j);
      scores[j] = std::exp(scores[j] / std::sqrt(2.0));
      z += scores[j];
    }
    for (int c = 0; c < 2; ++c) {
      double attended = 0;
      for (int j = 0; j < 4; ++j) attended += scores[j] / z * project(att.w_v.value(), c, j);
      EXPECT_NEAR(y.value()[c * 4 + i], 0.75 * attended + x[c][i], 1e-12);
    }
  }
}

TEST(SpatialAttention, SoftmaxRowsSumToOne) {
  nn::Rng rng(9);
  SpatialAttention<double> att(5, rng);
  auto w = att.weights(random_var<double>({2, 5, 3, 4}, 13, -2, 2));
  const int64_t rows = w.numel() / 12;
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0;
    for (int j = 0; j < 12; ++j) s += w.value()[r * 12 + j];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(SpatialAttention, RejectsChannelMismatch) {
  nn::Rng rng(9);
  SpatialAttention<double> att(4, rng);
  EXPECT_EQ(error_code_of([&] { att.forward(random_var<double>({1, 3, 2, 2}, 1)); }), ErrorCode::kShape);
}

TEST(ConvGruStep, ForcedUpdateGatesSelectPreviousOrCandidate) {
  nn::Rng rng(21);
  ConvGru<double> gru(3, 4, 3, rng);
  auto a = random_var<double>({2, 3, 4, 4}, 1);
  auto h = random_var<double>({2, 4, 4, 4}, 2);
  auto keep = gru.step(a, h, NormMode::kEval, 0.0);
  EXPECT_EQ(keep.hidden.value().storage(), h.value().storage());
  auto take = gru.step(a, h, NormMode::kEval, 1.0);
  EXPECT_EQ(take.hidden.value().storage(), take.candidate.value().storage());
}

TEST(ConvGruStep, ScalarHandEvaluation) {
  auto gru = scalar_gru(1.0);
  auto tr = gru.step(scalar(1.0), scalar(0.0), NormMode::kIdentity);
  EXPECT_NEAR(tr.reset.value()[0], 0.73106, 1e-5);
  EXPECT_NEAR(tr.update.value()[0], 0.73106, 1e-5);
  EXPECT_NEAR(tr.candidate.value()[0], 0.76159, 1e-5);
  EXPECT_NEAR(tr.hidden.value()[0], 0.55677, 1e-5);
  EXPECT_NEAR(tr.hidden.value()[0], sigmoid(1.0) * std::tanh(1.0), 1e-15);
}

TEST(ConvGruStep, RejectsHiddenShapeMismatch) {
  nn::Rng rng(21);
  ConvGru<double> gru(3, 4, 3, rng);
  EXPECT_EQ(error_code_of([&] {
              gru.step(random_var<double>({1, 3, 4, 4}, 1), random_var<double>({1, 4, 2, 2}, 2), NormMode::kEval);
            }),
            ErrorCode::kShape);
}

TEST(ConvGruForward, SingleStepMatchesStep) {
  nn::Rng rng(23);
  ConvGru<double> gru(3, 4, 3, rng);
  auto a = random_var<double>({2, 1, 3, 4, 4}, 3);
  auto h0 = random_var<double>({2, 4, 4, 4}, 4);
  auto seq = gru.forward(a, &h0, NormMode::kEval);
  auto one = gru.step(ops::select_axis1(a, 0), h0, NormMode::kEval);
  EXPECT_EQ(seq.value().storage(), one.hidden.value().storage());
}

TEST(ConvGruForward, ZeroInputStaysAtZero) {
  nn::Rng rng(23);
  ConvGru<double> gru(3, 4, 3, rng);
  auto seq = gru.forward(Var<double>(Tensor<double>({2, 5, 3, 4, 4})), nullptr, NormMode::kIdentity);
  for (double v : seq.value().span()) EXPECT_EQ(v, 0.0);
}

TEST(ConvGruForward, ScalarTwoStepsFollowOracle) {
  auto gru = scalar_gru(1.0);
  auto seq = gru.forward(Var<double>(Tensor<double>({1, 2, 1, 1, 1}, 1.0)), nullptr, NormMode::kIdentity);
  double h = 0;
  for (int t = 0; t < 2; ++t) {
    const double r = sigmoid(1.0 + h), z = sigmoid(1.0 + h);
    const double cand = std::tanh(1.0 + r * h);
    h = (1 - z) * h + z * cand;
    EXPECT_NEAR(seq.value()[t], h, 1e-14);
  }
  EXPECT_NEAR(seq.value()[0], 0.55677, 1e-5);
}

TEST(ConvGruForward, RejectsEmptySequence) {
  nn::Rng rng(23);
  ConvGru<double> gru(3, 4, 3, rng);
  EXPECT_EQ(error_code_of([&] { gru.forward(Var<double>(Tensor<double>({1, 0, 3, 4, 4})), nullptr, NormMode::kEval); }),
            ErrorCode::kShape);
}

TEST(ConvGruForward, HiddenIsConvexCombinationOfPreviousAndCandidate) {
  nn::Rng rng(29);
  ConvGru<double> gru(3, 4, 3, rng);
  auto h = random_var<double>({2, 4, 4, 4}, 6);
  for (uint64_t t = 0; t < 4; ++t) {
    auto tr = gru.step(random_var<double>({2, 3, 4, 4}, 100 + t, -2, 2), h, NormMode::kEval);
    for (int64_t i = 0; i < h.numel(); ++i) {
      const double lo = std::min(h.value()[i], tr.candidate.value()[i]);
      const double hi = std::max(h.value()[i], tr.candidate.value()[i]);
      EXPECT_GE(tr.hidden.value()[i], lo - 1e-15);
      EXPECT_LE(tr.hidden.value()[i], hi + 1e-15);
    }
    h = tr.hidden;
  }
}

TEST(ConvGruForward, HiddenStateIsCausal) {
  nn::Rng rng(31);
  ConvGru<double> gru(3, 4, 3, rng);
  auto a = random_tensor<double>({1, 4, 3, 4, 4}, 7);
  auto base = gru.forward(Var<double>(a), nullptr, NormMode::kEval);
  auto changed = a;
  for (int64_t i = 2 * 48; i < 3 * 48; ++i) changed[i] += 0.5;  // frame t = 2
  auto pert = gru.forward(Var<double>(changed), nullptr, NormMode::kEval);
  const int64_t per_step = 4 * 16;
  for (int64_t i = 0; i < 2 * per_step; ++i) EXPECT_EQ(base.value()[i], pert.value()[i]);
  bool later_changed = false;
  for (int64_t i = 2 * per_step; i < 4 * per_step; ++i) later_changed |= base.value()[i] != pert.value()[i];
  EXPECT_TRUE(later_changed);
}

TEST(DecodeSaliency, NearestUpsampleOfTwoByTwo) {
  auto x = Var<double>(Tensor<double>({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  auto y = ops::upsample_nearest(x, 2);
  const std::vector<double> expect{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  EXPECT_EQ(y.value().storage(), expect);
}

TEST(DecodeSaliency, OutputShapeAndRangeAt64) {
  nn::Rng rng(41);
  SaliencyPredictor<double> da(SaliencyConfig::tiny(), rng);
  NoGradGuard guard;
  auto out = da.predict(frames_in_unit({1, 3, 3, 64, 64}, 2), NormMode::kEval);
  EXPECT_EQ(out.shape(), (Shape{1, 3, 1, 64, 64}));
  for (double v : out.value().span()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(DecodeSaliency, RejectsSkipMismatch) {
  nn::Rng rng(41);
  SaliencyPredictor<double> da(SaliencyConfig::tiny(), rng);
  auto feats = da.encode(frames_in_unit({1, 1, 3, 64, 64}, 2), NormMode::kEval);
  auto hidden = random_var<double>({1, 8, 4, 4}, 3);
  EXPECT_EQ(error_code_of([&] { da.decoder.forward(hidden, feats, NormMode::kEval); }), ErrorCode::kShape);
}

TEST(DecodeSaliency, TinyPresetMatchesRecordedGolden) {
  std::ifstream in(std::string(STDA_TEST_DATA_DIR) + "/saliency_golden.json");
  ASSERT_TRUE(in.good());
  const auto golden = nlohmann::json::parse(in);
  nn::Rng rng(golden["seed"].get<uint64_t>());
  SaliencyPredictor<double> da(SaliencyConfig::tiny(), rng);
  Tensor<double> frames({1, 2, 3, 32, 32});
  for (int64_t i = 0; i < frames.numel(); ++i) frames[i] = 0.5 + 0.5 * std::sin(0.37 * static_cast<double>(i));
  NoGradGuard guard;
  auto out = da.predict(Var<double>(frames), NormMode::kEval);
  const auto& idx = golden["indices"];
  const auto& val = golden["values"];
  ASSERT_EQ(idx.size(), val.size());
  for (size_t k = 0; k < idx.size(); ++k) EXPECT_NEAR(out.value()[idx[k].get<int64_t>()], val[k].get<double>(), 1e-9);
}

TEST(PredictAttention, PaperPresetAt224HasFullResolution) {
  nn::Rng rng(43);
  SaliencyPredictor<float> da(SaliencyConfig::paper(), rng);
  NoGradGuard guard;
  auto out = da.predict(Var<float>(random_tensor<float>({1, 4, 3, 224, 224}, 5, 0, 1)), NormMode::kEval);
  EXPECT_EQ(out.shape(), (Shape{1, 4, 1, 224, 224}));
  for (float v : out.value().span()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(PredictAttention, MinimalSingleFrame) {
  nn::Rng rng(43);
  SaliencyPredictor<double> da(SaliencyConfig::tiny(), rng);
  auto out = da.predict(frames_in_unit({1, 1, 3, 32, 32}, 9), NormMode::kEval);
  EXPECT_EQ(out.shape(), (Shape{1, 1, 1, 32, 32}));
}

TEST(PredictAttention, OutputRangeHoldsForArbitraryFiniteInputs) {
  nn::Rng rng(47);
  SaliencyPredictor<double> da(SaliencyConfig::tiny(), rng);
  for (uint64_t s = 0; s < 4; ++s) {
    auto frames = frames_in_unit({2, 2, 3, 32, 32}, 50 + s);
    for (auto mode : {NormMode::kTrain, NormMode::kEval}) {
      auto out = da.predict(frames, mode);
      for (double v : out.value().span()) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
}

TEST(PredictAttention, FrameHistoryIsCausalInEvalMode) {
  nn::Rng rng(53);
  SaliencyPredictor<double> da(SaliencyConfig::tiny(), rng);
  auto frames = random_tensor<double>({1, 3, 3, 32, 32}, 8, 0, 1);
  auto base = da.predict(Var<double>(frames), NormMode::kEval);
  const int64_t per_frame = 3 * 32 * 32;
  for (int64_t i = 2 * per_frame; i < 3 * per_frame; ++i) frames[i] = 1.0 - frames[i];
  auto pert = da.predict(Var<double>(frames), NormMode::kEval);
  for (int64_t i = 0; i < 2 * 32 * 32; ++i) EXPECT_EQ(base.value()[i], pert.value()[i]);
}

TEST(PredictAttention, EncoderWeightGradientMatchesFiniteDifferences) {
  nn::Rng rng(59);
  SaliencyPredictor<double> da(SaliencyConfig::tiny(), rng);
  auto params = da.parameters();
  Var<double>* weight = nullptr;
  for (const auto& p : params.params()) {
    if (p.name.rfind("encoder.block2", 0) == 0 && p.var->value().rank() == 4) {
      weight = p.var;
      break;
    }
  }
  ASSERT_NE(weight, nullptr);
  const auto frames = frames_in_unit({1, 2, 3, 32, 32}, 10);
  auto loss = [&] { return ops::mean_all(da.predict(frames, NormMode::kEval)); };
  params.zero_grad();
  loss().backward();
  const Tensor<double> analytic = weight->grad();
  double diff2 = 0, ref2 = 0;
  const double h = 1e-5;
  const double centre = loss().value()[0];
  int kinks = 0;
  for (int64_t i = 0; i < weight->numel(); i += std::max<int64_t>(1, weight->numel() / 24)) {
    double& w = weight->mutable_value()[i];
    const double orig = w;
    w = orig + h;
    const double up = loss().value()[0];
    w = orig - h;
    const double down = loss().value()[0];
    w = orig;
    // Unequal one-sided slopes mean the step crossed a clipping kink.
    const double right = (up - centre) / h, left = (centre - down) / h;
    if (std::abs(right - left) > 1e-3 * std::max(std::abs(right), std::abs(left)) + 1e-9) {
      ++kinks;
      continue;
    }
    const double numeric = (up - down) / (2 * h);
    diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
    ref2 += numeric * numeric;
  }
  EXPECT_LE(kinks, 2);
  ASSERT_GT(ref2, 0.0);
  EXPECT_LT(std::sqrt(diff2 / ref2), 1e-3);
}
