#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stda/behavior_classifier.hpp"
#include "stda/tensor.hpp"

namespace stda {

enum class HazardKind { kCutInLeft, kCutInRight, kLeadBrake };

std::string to_string(HazardKind kind);
HazardKind parse_hazard_kind(const std::string& s);
// Evade away from the hazard's side; brake for a lead vehicle.
BehaviorLabel label_for(HazardKind kind);

struct ScenarioSpec {
  HazardKind hazard_kind = HazardKind::kLeadBrake;
  double hazard_speed = 2.0;  // pixels per frame
  double hazard_size = 0.15;  // vehicle width as a fraction of the frame
  double noise_level = 0.02;
  uint64_t seed = 0;
};

// Hazard box per frame, in pixels (centre and extent).
struct HazardState {
  double cx, cy, w, h;
};

struct LabeledSequence {
  std::string id;
  int t_len = 0, height = 0, width = 0;
  std::vector<float> frames;     // T x 3 x H x W, values in [0,1]
  std::vector<float> attention;  // T x H x W, Gaussian bump on the hazard
  BehaviorLabel label = BehaviorLabel::kBrake;
  ScenarioSpec meta;
  std::vector<HazardState> hazard_track;
  std::string split = "train";
};

/// Rendering and kinematics knobs for the synthetic scenes.
struct SceneStyle {
  double hazard_size = 0.15;
  double noise_level = 0.03;
  double min_speed = 1.0;  // lateral pixels per frame at a 32-pixel frame
  double max_speed = 3.0;
  double brake_jitter = 0.08;  // lead vehicle horizontal spread, fraction of frame
  int min_decoys = 1;
  int max_decoys = 2;
  // 0: hazard looks exactly like the decoys; 1: hazard fully recoloured.
  double marker_strength = 0.35;
};

inline const std::vector<double>& default_class_ratios() {
  static const std::vector<double> r{1730.0 / 2313.0, 319.0 / 2313.0, 264.0 / 2313.0};
  return r;
}

/// Renders one sequence from its spec. Deterministic in spec.seed.
LabeledSequence render_sequence(const ScenarioSpec& spec, int image_size, int t_len, const SceneStyle& style = {});

/// n sequences with class quotas from ratios (Brake, TurnRight, TurnLeft);
/// sequence i is rendered from seed + i.
std::vector<LabeledSequence> generate_dataset(int64_t n, const std::vector<double>& class_ratios, int image_size,
                                              int t_len, uint64_t seed, const SceneStyle& style = {});

/// Stratified, seeded assignment of the "train"/"val"/"test" split field.
void assign_splits(std::vector<LabeledSequence>& seqs, double val_fraction, double test_fraction, uint64_t seed);

struct Batch {
  Tensor<float> frames;     // N x T x 3 x H x W
  Tensor<float> attention;  // N x T x 1 x H x W (empty if unavailable)
  std::vector<int> labels;
};

Batch make_batch(const std::vector<LabeledSequence>& seqs, const std::vector<size_t>& indices);
std::vector<size_t> indices_of_split(const std::vector<LabeledSequence>& seqs, const std::string& split);

// 8-bit image, interleaved channels.
struct Image {
  int width = 0, height = 0, channels = 0;
  std::vector<uint8_t> pixels;
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);

/// Centre-crop to a square, bilinear resize to size x size, scale to [0,1].
/// Returns 3 x size x size (grayscale inputs are replicated).
std::vector<float> preprocess(const Image& img, int size);

struct ManifestRecord {
  std::string sequence_id;
  std::vector<std::filesystem::path> frames;
  std::vector<std::filesystem::path> attention;
  BehaviorLabel label = BehaviorLabel::kBrake;
  std::string split;
};

/// One JSON object per line:
///   {"sequence_id": str, "frames": [path...], "attention": [path...]?,
///    "label": "brake"|"turn_right"|"turn_left", "split": "train"|"val"|"test"}
/// Paths are relative to the manifest's directory.
struct DatasetManifest {
  std::vector<ManifestRecord> records;
};

DatasetManifest load_manifest(const std::filesystem::path& path, int min_frames = 1);

/// Writes frames/attention PNGs under dir and dir/manifest.jsonl.
std::filesystem::path save_dataset(const std::vector<LabeledSequence>& seqs, const std::filesystem::path& dir);

/// Decodes and preprocesses the first t_len frames of every record.
std::vector<LabeledSequence> load_sequences(const DatasetManifest& manifest, int t_len, int image_size);

}  // namespace stda
