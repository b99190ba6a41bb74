#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stda/checkpoint.hpp"
#include "stda/config.hpp"
#include "stda/imbalance_objectives.hpp"
#include "stda/scenario_data.hpp"
#include "stda/stda_model.hpp"

namespace stda {

/// Synthetic scenes (data.manifest empty) or a manifest on disk, with splits.
std::vector<LabeledSequence> load_data(const ExperimentConfig& cfg);

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double loss = 0;  // mean training loss over the epoch
  std::optional<MetricReport> val;
};

std::string loss_curve_csv(const std::vector<EpochLog>& curve);

struct PretrainResult {
  Checkpoint checkpoint;  // attention predictor only, names prefixed "da."
  std::vector<EpochLog> curve;
  double initial_loss = 0;  // before the first update
};

/// Fits the attention predictor to ground-truth maps with per-pixel binary
/// cross-entropy and SGD with momentum; the rate decays once per epoch.
PretrainResult pretrain_da(const ExperimentConfig& cfg, const std::vector<LabeledSequence>& data);

struct TrainOptions {
  const Checkpoint* da_init = nullptr;  // pretrained attention predictor
  const Checkpoint* resume = nullptr;   // full model, continues from its epoch
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(int epoch, size_t step, double loss)> on_step;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> curve;
  std::optional<MetricReport> final_val;
  double first_step_loss = 0;
};

/// End-to-end training with the cost-sensitive loss and Adam. With
/// da.freeze the predictor's maps are computed once and reused.
TrainResult train(const ExperimentConfig& cfg, const std::vector<LabeledSequence>& data, const TrainOptions& opt = {});

/// Rebuilds a model from a checkpoint's embedded configuration.
std::unique_ptr<StdaModel<float>> model_from_checkpoint(const Checkpoint& ckpt, ExperimentConfig* cfg_out = nullptr);

MetricReport evaluate(StdaModel<float>& model, const std::vector<LabeledSequence>& data, const std::string& split,
                      const ExperimentConfig& cfg);
MetricReport evaluate(const Checkpoint& ckpt, const std::vector<LabeledSequence>& data, const std::string& split);

struct AblationRow {
  std::string backbone;
  bool da = false;
  bool temporal = false;
  MetricReport report;
  std::optional<double> increase;  // relative G-mean change vs the off/off cell
};

/// (cell - base) / base
double g_mean_increase(double base, double cell);
// Signed percent with one decimal, e.g. "+9.1%".
std::string format_increase(double fraction);

/// 2x2 {attention off/on} x {temporal off/on} grid per backbone, every cell
/// trained from the same seed. Rows per backbone: off/off, on/off, off/on, on/on.
std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const std::vector<LabeledSequence>& data,
                                const std::vector<std::string>& backbones, const Checkpoint* da_init,
                                const std::function<void(const AblationRow&)>& on_row = {});

std::string ablation_text(const std::vector<AblationRow>& rows);
std::string ablation_csv(const std::vector<AblationRow>& rows);

inline constexpr double kReferenceParams = 54.92e6;

struct BenchReport {
  std::string preset;
  int batch = 0, iterations = 0;
  int64_t params = 0;
  int64_t macs_per_sequence = 0;
  double mean_images_per_s = 0, stddev_images_per_s = 0;
  double reference_params = kReferenceParams;
  bool within_band = false;  // params within +-20% of the reference
  std::vector<std::string> underspecified;
  std::string error;  // set when the run could not proceed

  std::string to_text() const;
};

// Components whose size the reference leaves open.
const std::vector<std::string>& underspecified_components();

/// Warmup, then n_iter timed forward passes over batch sequences of T frames.
BenchReport bench_throughput(StdaModel<float>& model, int batch, int n_iter, int warmup = 2);

/// round(255 * ((1 - beta) * frame + beta * colormap(minmax(attention))))
Image overlay_frame(const float* frame, const float* attention, int height, int width, double beta = 0.4);

/// Grid PNG with one row per sequence and one column per frame.
std::filesystem::path emit_overlays(StdaModel<float>& model, const std::vector<LabeledSequence>& data,
                                    const std::vector<size_t>& indices, const std::filesystem::path& out_dir,
                                    double beta = 0.4);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace stda
