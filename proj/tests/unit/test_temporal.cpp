#include <gtest/gtest.h>

#include "stda/temporal_encoder.hpp"
#include "test_util.hpp"

using namespace stda;
using stda::testing::error_code_of;
using stda::testing::random_tensor;
using stda::testing::random_var;
using nn::NormMode;

TEST(TemporalEncode, CollapsesTimeAxis) {
  nn::Rng rng(1);
  TemporalEncoder<double> enc({4, 4, false}, rng);
  auto out = enc.forward(random_var<double>({1, 4, 3, 64, 64}, 2, 0, 1), NormMode::kTrain);
  EXPECT_EQ(out.shape(), (Shape{1, 3, 64, 64}));
  for (int64_t t : {1, 2, 3, 6}) {
    TemporalEncoder<double> e({static_cast<int>(t), 4, false}, rng);
    EXPECT_EQ(e.forward(random_var<double>({2, t, 3, 8, 8}, 3, 0, 1), NormMode::kEval).shape(), (Shape{2, 3, 8, 8}));
  }
}

TEST(TemporalEncode, BypassOfConstantSequenceReturnsTheFrame) {
  nn::Rng rng(4);
  TemporalEncoder<double> enc({4, 4, true}, rng);
  auto frame = random_tensor<double>({1, 1, 3, 16, 16}, 5, 0, 1);
  Tensor<double> seq({1, 4, 3, 16, 16});
  for (int t = 0; t < 4; ++t)
    for (int64_t i = 0; i < frame.numel(); ++i) seq[t * frame.numel() + i] = frame[i];
  auto out = enc.forward(Var<double>(seq), NormMode::kIdentity);
  EXPECT_EQ(out.value().storage(), frame.storage());
}

TEST(TemporalEncode, TwoStepPixelHandComputation) {
  nn::Rng rng(6);
  TemporalEncoder<double> enc({2, 1, false}, rng);
  enc.ffn_in.weight.mutable_value() = Tensor<double>({2, 2}, std::vector<double>{0.5, -1.0, 2.0, 0.25});
  enc.ffn_in.bias.mutable_value() = Tensor<double>({2}, std::vector<double>{0.1, -0.3});
  enc.ffn_out.weight.mutable_value() = Tensor<double>({2, 2}, std::vector<double>{1.0, 0.5, -0.5, 2.0});
  enc.ffn_out.bias.mutable_value() = Tensor<double>({2}, std::vector<double>{0.0, 0.2});
  enc.squeeze.mutable_value() = Tensor<double>({1, 2}, std::vector<double>{0.3, 0.7});
  // One pixel, one channel: history (0.6, 0.2).
  Tensor<double> x({1, 2, 1, 1, 1}, std::vector<double>{0.6, 0.2});
  auto out = enc.forward(Var<double>(x), NormMode::kIdentity);
  const double h0 = std::max(0.0, 0.5 * 0.6 - 1.0 * 0.2 + 0.1);   // 0.2
  const double h1 = std::max(0.0, 2.0 * 0.6 + 0.25 * 0.2 - 0.3);  // 0.95
  const double z0 = 1.0 * h0 + 0.5 * h1;
  const double z1 = -0.5 * h0 + 2.0 * h1 + 0.2;
  ASSERT_EQ(out.numel(), 1);
  EXPECT_NEAR(out.value()[0], 0.3 * z0 + 0.7 * z1, 1e-15);
  EXPECT_NEAR(out.value()[0], 0.3 * 0.675 + 0.7 * 2.0, 1e-12);
}

TEST(TemporalEncode, NonUniformSqueezeIsOrderSensitive) {
  nn::Rng rng(7);
  TemporalEncoder<double> enc({3, 4, false}, rng);
  enc.squeeze.mutable_value() = Tensor<double>({1, 3}, std::vector<double>{0.1, 0.3, 0.6});
  auto x = random_tensor<double>({1, 3, 3, 4, 4}, 8, 0, 1);
  Tensor<double> swapped = x;
  const int64_t frame = 3 * 16;
  for (int64_t i = 0; i < frame; ++i) std::swap(swapped[i], swapped[2 * frame + i]);
  auto a = enc.forward(Var<double>(x), NormMode::kEval);
  auto b = enc.forward(Var<double>(swapped), NormMode::kEval);
  double diff = 0;
  for (int64_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.value()[i] - b.value()[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(TemporalEncode, RejectsSequenceLengthMismatch) {
  nn::Rng rng(9);
  TemporalEncoder<double> enc({4, 4, false}, rng);
  EXPECT_EQ(error_code_of([&] { enc.forward(random_var<double>({1, 3, 3, 8, 8}, 1, 0, 1), NormMode::kEval); }),
            ErrorCode::kShape);
}

TEST(TemporalEncode, HiddenWidthNeverBelowSequenceLength) {
  nn::Rng rng(10);
  EXPECT_EQ(error_code_of([&] { TemporalEncoder<double>({4, 0, false}, rng); }), ErrorCode::kConfig);
  TemporalEncoder<double> enc({5, 3, false}, rng);
  EXPECT_GE(enc.ffn_in.weight.dim(0), 5);
  for (double v : enc.squeeze.value().span()) EXPECT_TRUE(std::isfinite(v));
}
