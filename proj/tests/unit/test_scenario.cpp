#include <cmath>
#include <fstream>
#include <numbers>

#include <gtest/gtest.h>

#include "stda/scenario_data.hpp"
#include "test_util.hpp"

using namespace stda;
using stda::testing::error_code_of;
using stda::testing::error_message_of;
using stda::testing::TempDir;

namespace {

Image gradient_image(int w, int h, int channels) {
  Image img{w, h, channels, std::vector<uint8_t>(static_cast<size_t>(w) * h * channels)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.pixels[(static_cast<size_t>(y) * w + x) * channels + c] = static_cast<uint8_t>((3 * x + 5 * y + 70 * c) % 256);
  return img;
}

double pixel(const Image& img, int x, int y, int c) {
  return img.pixels[(static_cast<size_t>(y) * img.width + x) * img.channels + c];
}

// Lateral motion of the hazard decides the manoeuvre; no motion means brake.
BehaviorLabel label_from_track(const std::vector<HazardState>& track) {
  const double dx = track.back().cx - track.front().cx;
  if (std::abs(dx) < 1e-9) return BehaviorLabel::kBrake;
  return dx > 0 ? BehaviorLabel::kTurnRight : BehaviorLabel::kTurnLeft;
}

void write_lines(const std::filesystem::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << "\n";
}

}  // namespace

TEST(Generate, ClassCountsFollowRatios) {
  const auto seqs = generate_dataset(1000, default_class_ratios(), 32, 2, 3);
  std::array<int, 3> counts{};
  for (const auto& s : seqs) ++counts[static_cast<size_t>(s.label)];
  EXPECT_NEAR(counts[0], 748, 20);
  EXPECT_NEAR(counts[1], 138, 20);
  EXPECT_NEAR(counts[2], 114, 20);
  EXPECT_EQ(counts[0] + counts[1] + counts[2], 1000);
}

TEST(Generate, SingleClassRatios) {
  for (const auto& s : generate_dataset(20, {1, 0, 0}, 32, 2, 4)) EXPECT_EQ(s.label, BehaviorLabel::kBrake);
}

TEST(Generate, DeterministicInSeed) {
  const auto a = generate_dataset(6, default_class_ratios(), 32, 3, 11);
  const auto b = generate_dataset(6, default_class_ratios(), 32, 3, 11);
  const auto c = generate_dataset(6, default_class_ratios(), 32, 3, 12);
  bool any_diff = false;
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].frames, b[i].frames);
    EXPECT_EQ(a[i].attention, b[i].attention);
    EXPECT_EQ(a[i].label, b[i].label);
    any_diff = any_diff || a[i].frames != c[i].frames;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Generate, LabelFollowsHazardMotion) {
  const auto seqs = generate_dataset(90, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 32, 4, 21);
  for (const auto& s : seqs) {
    EXPECT_EQ(label_from_track(s.hazard_track), s.label) << s.id;
    EXPECT_EQ(label_for(s.meta.hazard_kind), s.label);
  }
}

TEST(Generate, FramesAndAttentionStayInUnitRange) {
  for (const auto& s : generate_dataset(12, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 32, 4, 22)) {
    ASSERT_EQ(s.frames.size(), 4u * 3 * 32 * 32);
    ASSERT_EQ(s.attention.size(), 4u * 32 * 32);
    for (float v : s.frames) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
    for (float v : s.attention) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
}

TEST(Generate, AttentionPeaksOnTheHazard) {
  const int size = 64;
  for (const auto& s : generate_dataset(30, {1.0 / 3, 1.0 / 3, 1.0 / 3}, size, 4, 23)) {
    for (int t = 0; t < s.t_len; ++t) {
      const float* att = s.attention.data() + static_cast<size_t>(t) * size * size;
      int best = 0;
      for (int p = 1; p < size * size; ++p) best = att[p] > att[best] ? p : best;
      const auto& h = s.hazard_track[static_cast<size_t>(t)];
      EXPECT_LE(std::abs(best % size + 0.5 - h.cx), 1.0) << s.id;
      EXPECT_LE(std::abs(best / size + 0.5 - h.cy), 1.0) << s.id;
      // A unit-peak Gaussian of spread w/2 holds 2 pi sigma^2.
      const double sigma = s.meta.hazard_size * size / 2;
      double mass = 0;
      for (int p = 0; p < size * size; ++p) mass += att[p];
      EXPECT_NEAR(mass / (2 * std::numbers::pi * sigma * sigma), 1.0, 0.01) << s.id;
    }
  }
}

TEST(Generate, RejectsBadArguments) {
  EXPECT_EQ(error_code_of([] { generate_dataset(4, {0.5, 0.5, 0.5}, 32, 4, 1); }), ErrorCode::kValue);
  EXPECT_EQ(error_code_of([] { generate_dataset(4, {0.5, 0.5}, 32, 4, 1); }), ErrorCode::kValue);
  EXPECT_EQ(error_code_of([] { generate_dataset(4, default_class_ratios(), 32, 1, 1); }), ErrorCode::kValue);
  SceneStyle big;
  big.hazard_size = 0.4;
  EXPECT_EQ(error_code_of([&] { generate_dataset(4, default_class_ratios(), 32, 4, 1, big); }), ErrorCode::kValue);
}

TEST(Splits, StratifiedAndComplete) {
  auto seqs = generate_dataset(200, default_class_ratios(), 32, 2, 5);
  assign_splits(seqs, 0.2, 0.1, 6);
  const auto tr = indices_of_split(seqs, "train"), va = indices_of_split(seqs, "val"), te = indices_of_split(seqs, "test");
  EXPECT_EQ(tr.size() + va.size() + te.size(), 200u);
  std::array<int, 3> val_counts{}, all_counts{};
  for (auto i : va) ++val_counts[static_cast<size_t>(seqs[i].label)];
  for (const auto& s : seqs) ++all_counts[static_cast<size_t>(s.label)];
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(val_counts[c], 0.2 * all_counts[c], 1.0);
}

TEST(Batch, StacksSequencesAndLabels) {
  const auto seqs = generate_dataset(3, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 32, 2, 8);
  const auto b = make_batch(seqs, {2, 0});
  EXPECT_EQ(b.frames.shape(), (Shape{2, 2, 3, 32, 32}));
  EXPECT_EQ(b.attention.shape(), (Shape{2, 2, 1, 32, 32}));
  EXPECT_EQ(b.labels, (std::vector<int>{static_cast<int>(seqs[2].label), static_cast<int>(seqs[0].label)}));
  EXPECT_EQ(b.frames[0], seqs[2].frames[0]);
  EXPECT_EQ(error_code_of([&] { make_batch(seqs, {}); }), ErrorCode::kValue);
}

TEST(Preprocess, HalvingAveragesPixelQuads) {
  const auto img = gradient_image(448, 448, 3);
  const auto out = preprocess(img, 224);
  ASSERT_EQ(out.size(), 3u * 224 * 224);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 224; y += 37)
      for (int x = 0; x < 224; x += 29) {
        const double quad = (pixel(img, 2 * x, 2 * y, c) + pixel(img, 2 * x + 1, 2 * y, c) + pixel(img, 2 * x, 2 * y + 1, c) +
                             pixel(img, 2 * x + 1, 2 * y + 1, c)) / 4;
        EXPECT_NEAR(out[static_cast<size_t>(c) * 224 * 224 + y * 224 + x], quad / 255.0, 1e-6);
      }
}

TEST(Preprocess, SameSizeOnlyRescales) {
  const auto img = gradient_image(224, 224, 3);
  const auto out = preprocess(img, 224);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 224; ++y)
      for (int x = 0; x < 224; ++x)
        ASSERT_FLOAT_EQ(out[static_cast<size_t>(c) * 224 * 224 + y * 224 + x], static_cast<float>(pixel(img, x, y, c) / 255.0));
}

TEST(Preprocess, CentreCropsWideImages) {
  const auto img = gradient_image(300, 200, 1);
  const auto out = preprocess(img, 200);
  for (int y = 0; y < 200; y += 13)
    for (int x = 0; x < 200; x += 17) {
      const float expect = static_cast<float>(pixel(img, x + 50, y, 0) / 255.0);
      for (int c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(out[static_cast<size_t>(c) * 200 * 200 + y * 200 + x], expect);
    }
  EXPECT_EQ(error_code_of([&] { preprocess(img, 0); }), ErrorCode::kValue);
}

TEST(Png, RoundTripsExactly) {
  TempDir dir("png");
  for (int ch : {1, 3}) {
    const auto img = gradient_image(23, 17, ch);
    write_png(dir.path() / "a.png", img);
    const auto back = read_png(dir.path() / "a.png");
    EXPECT_EQ(back.width, 23);
    EXPECT_EQ(back.height, 17);
    EXPECT_EQ(back.channels, ch);
    EXPECT_EQ(back.pixels, img.pixels);
  }
  EXPECT_EQ(error_code_of([&] { read_png(dir.path() / "missing.png"); }), ErrorCode::kIo);
  write_lines(dir.path() / "junk.png", {"not a png"});
  EXPECT_EQ(error_code_of([&] { read_png(dir.path() / "junk.png"); }), ErrorCode::kFormat);
}

TEST(Manifest, SavedDatasetLoadsBack) {
  TempDir dir("manifest");
  auto seqs = generate_dataset(2, {0.5, 0.5, 0.0}, 32, 2, 9);
  seqs[1].split = "val";
  const auto path = save_dataset(seqs, dir.path());
  const auto m = load_manifest(path);
  ASSERT_EQ(m.records.size(), 2u);
  EXPECT_EQ(m.records[1].split, "val");
  EXPECT_EQ(m.records[0].frames.size(), 2u);
  const auto loaded = load_sequences(m, 2, 32);
  for (size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(loaded[i].label, seqs[i].label);
    for (size_t k = 0; k < seqs[i].frames.size(); ++k) ASSERT_NEAR(loaded[i].frames[k], seqs[i].frames[k], 0.5 / 255 + 1e-6);
    for (size_t k = 0; k < seqs[i].attention.size(); ++k)
      ASSERT_NEAR(loaded[i].attention[k], seqs[i].attention[k], 0.5 / 255 + 1e-6);
  }
  EXPECT_EQ(error_code_of([&] { load_sequences(m, 3, 32); }), ErrorCode::kShape);
}

TEST(Manifest, MissingFrameNamesTheRecord) {
  TempDir dir("manifest_missing");
  write_png(dir.path() / "f0.png", gradient_image(8, 8, 3));
  write_lines(dir.path() / "m.jsonl",
              {R"({"sequence_id": "ok", "frames": ["f0.png"], "label": "brake", "split": "train"})",
               R"({"sequence_id": "lost_one", "frames": ["f0.png", "gone.png"], "label": "turn_left", "split": "val"})"});
  EXPECT_EQ(error_code_of([&] { load_manifest(dir.path() / "m.jsonl"); }), ErrorCode::kNotFound);
  EXPECT_NE(error_message_of([&] { load_manifest(dir.path() / "m.jsonl"); }).find("lost_one"), std::string::npos);
}

TEST(Manifest, RejectsMalformedInput) {
  TempDir dir("manifest_bad");
  write_png(dir.path() / "f0.png", gradient_image(8, 8, 3));
  write_lines(dir.path() / "empty.jsonl", {});
  EXPECT_EQ(error_code_of([&] { load_manifest(dir.path() / "empty.jsonl"); }), ErrorCode::kFormat);
  write_lines(dir.path() / "label.jsonl", {R"({"sequence_id": "a", "frames": ["f0.png"], "label": "swerve", "split": "train"})"});
  EXPECT_EQ(error_code_of([&] { load_manifest(dir.path() / "label.jsonl"); }), ErrorCode::kFormat);
  write_lines(dir.path() / "json.jsonl", {R"({"sequence_id": "a", "frames": )"});
  EXPECT_EQ(error_code_of([&] { load_manifest(dir.path() / "json.jsonl"); }), ErrorCode::kFormat);
  write_lines(dir.path() / "short.jsonl", {R"({"sequence_id": "a", "frames": ["f0.png"], "label": "brake", "split": "train"})"});
  EXPECT_EQ(error_code_of([&] { load_manifest(dir.path() / "short.jsonl", 2); }), ErrorCode::kFormat);
  EXPECT_EQ(error_code_of([&] { load_manifest(dir.path() / "nope.jsonl"); }), ErrorCode::kIo);
}
