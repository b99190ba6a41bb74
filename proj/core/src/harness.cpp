#include "stda/harness.hpp"

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <new>
#include <random>
#include <sstream>

#include "stda/optim.hpp"

namespace stda {

namespace fs = std::filesystem;
using nn::NormMode;

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorCode::kIo, "short write to " + path.string());
}

std::vector<LabeledSequence> load_data(const ExperimentConfig& cfg) {
  const int t_len = static_cast<int>(cfg.integer("data.t_len"));
  const int size = static_cast<int>(cfg.integer("data.image_size"));
  const auto& manifest = cfg.get("data.manifest");
  if (!manifest.empty()) return load_sequences(load_manifest(manifest, t_len), t_len, size);
  auto seqs = generate_dataset(cfg.integer("data.n_sequences"), cfg.reals("data.class_ratios"), size, t_len,
                               cfg.seed(), cfg.scene());
  assign_splits(seqs, cfg.real("data.val_fraction"), cfg.real("data.test_fraction"), cfg.seed());
  return seqs;
}

std::string loss_curve_csv(const std::vector<EpochLog>& curve) {
  std::ostringstream os;
  os.precision(9);
  os << "epoch,lr,loss,val_g_mean,val_iba\n";
  for (const auto& e : curve) {
    os << e.epoch << "," << e.lr << "," << e.loss << ",";
    if (e.val) os << e.val->average.g_mean << "," << e.val->average.iba;
    else os << ",";
    os << "\n";
  }
  return os.str();
}

namespace {

std::vector<size_t> shuffled(std::vector<size_t> idx, uint64_t seed, int epoch) {
  std::mt19937_64 rng(seed * 1000003ULL + static_cast<uint64_t>(epoch));
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

std::vector<std::vector<size_t>> batches_of(const std::vector<size_t>& idx, int batch) {
  require(batch >= 1, ErrorCode::kConfig, "batch size must be at least 1");
  std::vector<std::vector<size_t>> out;
  for (size_t i = 0; i < idx.size(); i += batch) {
    out.emplace_back(idx.begin() + static_cast<int64_t>(i),
                     idx.begin() + static_cast<int64_t>(std::min(idx.size(), i + batch)));
  }
  return out;
}

void check_finite(double loss, const std::string& what) {
  require(std::isfinite(loss), ErrorCode::kNonFinite, what + ": loss became non-finite");
}

nn::ParamSet<float> without_da(const nn::ParamSet<float>& all) {
  nn::ParamSet<float> out;
  for (const auto& p : all.params()) {
    if (p.name.rfind("da.", 0) != 0) out.param(p.name, *p.var);
  }
  return out;
}

// Per-sequence attention maps (T x H x W) from the predictor in eval mode.
std::vector<std::vector<float>> cache_attention(StdaModel<float>& model, const std::vector<LabeledSequence>& data) {
  NoGradGuard guard;
  std::vector<size_t> all(data.size());
  for (size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::vector<std::vector<float>> cache(data.size());
  for (const auto& b : batches_of(all, 16)) {
    auto batch = make_batch(data, b);
    auto maps = model.attention_maps(Var<float>(batch.frames), NormMode::kEval);
    const size_t per = static_cast<size_t>(maps.numel()) / b.size();
    for (size_t k = 0; k < b.size(); ++k) {
      cache[b[k]].assign(maps.value().data() + k * per, maps.value().data() + (k + 1) * per);
    }
  }
  return cache;
}

Tensor<float> gather_attention(const std::vector<std::vector<float>>& cache, const std::vector<size_t>& idx,
                               const Shape& frames_shape) {
  Tensor<float> out({frames_shape[0], frames_shape[1], 1, frames_shape[3], frames_shape[4]});
  const size_t per = static_cast<size_t>(out.numel()) / idx.size();
  for (size_t k = 0; k < idx.size(); ++k) std::copy(cache[idx[k]].begin(), cache[idx[k]].end(), out.data() + k * per);
  return out;
}

MetricReport evaluate_impl(StdaModel<float>& model, const std::vector<LabeledSequence>& data,
                           const std::vector<size_t>& idx, const ExperimentConfig& cfg,
                           const std::vector<std::vector<float>>* cache) {
  NoGradGuard guard;
  std::vector<int> truths, preds;
  for (const auto& b : batches_of(idx, 16)) {
    auto batch = make_batch(data, b);
    Var<float> frames(batch.frames);
    StdaOutput<float> out;
    if (cache != nullptr) {
      Var<float> att(gather_attention(*cache, b, batch.frames.shape()));
      out = model.forward(frames, NormMode::kEval, &att);
    } else {
      out = model.forward(frames, NormMode::kEval);
    }
    const auto& lg = out.logits.value();
    for (size_t k = 0; k < b.size(); ++k) {
      const float* row = lg.data() + k * kNumBehaviors;
      preds.push_back(static_cast<int>(predict_label(std::span<const float>(row, kNumBehaviors))));
      truths.push_back(batch.labels[k]);
    }
  }
  const auto averaging = cfg.get("eval.averaging") == "weighted" ? Averaging::kWeighted : Averaging::kMacro;
  return metric_report(confusion(truths, preds, kNumBehaviors), cfg.real("eval.iba_alpha"), averaging);
}

}  // namespace

PretrainResult pretrain_da(const ExperimentConfig& cfg, const std::vector<LabeledSequence>& data) {
  const auto mcfg = cfg.model();
  const auto train_idx = indices_of_split(data, "train");
  require(!train_idx.empty(), ErrorCode::kNotFound, "pretrain-da: no training sequences");
  for (size_t i : train_idx) {
    require(!data[i].attention.empty(), ErrorCode::kValue,
            "pretrain-da: sequence " + data[i].id + " has no attention ground truth");
  }
  nn::Rng rng(cfg.seed());
  SaliencyPredictor<float> da(saliency_preset(mcfg.preset), rng);
  nn::ParamSet<float> params;
  da.collect(params, "da");
  const double lr0 = cfg.real("pretrain.lr"), decay = cfg.real("pretrain.decay");
  Sgd<float> opt(params, lr0, cfg.real("pretrain.momentum"));
  const int epochs = static_cast<int>(cfg.integer("pretrain.epochs"));
  const int bs = static_cast<int>(cfg.integer("pretrain.batch_size"));

  PretrainResult res;
  bool first = true;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    opt.set_lr(exponential_lr(lr0, decay, epoch));
    double total = 0;
    size_t steps = 0;
    for (const auto& b : batches_of(shuffled(train_idx, cfg.seed(), epoch), bs)) {
      auto batch = make_batch(data, b);
      params.zero_grad();
      auto loss = ops::bce_with_logits(da.predict_logits(Var<float>(batch.frames), NormMode::kTrain), batch.attention);
      const double l = loss.value()[0];
      check_finite(l, "pretrain-da");
      if (first) res.initial_loss = l;
      first = false;
      loss.backward();
      opt.step();
      total += l;
      ++steps;
    }
    res.curve.push_back({epoch, opt.lr(), total / static_cast<double>(steps), std::nullopt});
  }
  res.checkpoint = snapshot(params, cfg.to_json(), {{"kind", "da"}, {"epochs", epochs}});
  return res;
}

TrainResult train(const ExperimentConfig& cfg, const std::vector<LabeledSequence>& data, const TrainOptions& opt) {
  const auto mcfg = cfg.model();
  nn::Rng rng(cfg.seed());
  StdaModel<float> model(mcfg, rng);
  auto all = model.parameters();

  int start_epoch = 0;
  if (opt.resume != nullptr) {
    const auto stored = ExperimentConfig::from_json(opt.resume->config);
    require(stored.get("model.preset") == cfg.get("model.preset") && stored.get("backbone") == cfg.get("backbone"),
            ErrorCode::kConfig, "resume checkpoint was trained with a different preset or backbone");
    restore(all, *opt.resume);
    start_epoch = opt.resume->meta.value("epochs", 0);
  } else if (opt.da_init != nullptr && mcfg.da_enabled) {
    const auto stored = ExperimentConfig::from_json(opt.da_init->config);
    require(stored.get("model.preset") == cfg.get("model.preset"), ErrorCode::kConfig,
            "attention checkpoint preset '" + stored.get("model.preset") + "' does not match model.preset '" +
                cfg.get("model.preset") + "'");
    nn::ParamSet<float> da_set;
    model.collect_da(da_set, "");
    restore(da_set, *opt.da_init);
  }

  const bool frozen = mcfg.da_enabled && cfg.flag("da.freeze");
  auto trainable = frozen ? without_da(all) : all;
  std::vector<std::vector<float>> cache;
  if (frozen) cache = cache_attention(model, data);
  const auto* cache_ptr = frozen ? &cache : nullptr;

  const auto train_idx = indices_of_split(data, "train");
  const auto val_idx = indices_of_split(data, "val");
  require(!train_idx.empty(), ErrorCode::kNotFound, "train: no training sequences");
  std::vector<int64_t> counts(kNumBehaviors, 0);
  for (size_t i : train_idx) ++counts[static_cast<int>(data[i].label)];
  const auto& mode = cfg.get("train.cost_mode");
  require(mode == "default" || mode == "uniform", ErrorCode::kConfig, "train.cost_mode must be default or uniform");
  const CostMatrix costs = mode == "default" ? default_cost_matrix(counts) : CostMatrix::uniform(kNumBehaviors);

  Adam<float> adam(trainable, cfg.real("train.lr"));
  const int epochs = static_cast<int>(cfg.integer("train.epochs"));
  const int bs = static_cast<int>(cfg.integer("train.batch_size"));

  TrainResult res;
  bool first = true;
  for (int epoch = start_epoch; epoch < epochs; ++epoch) {
    double total = 0;
    size_t steps = 0;
    for (const auto& b : batches_of(shuffled(train_idx, cfg.seed(), epoch), bs)) {
      auto batch = make_batch(data, b);
      Var<float> frames(batch.frames);
      StdaOutput<float> out;
      if (frozen) {
        Var<float> att(gather_attention(cache, b, batch.frames.shape()));
        out = model.forward(frames, NormMode::kTrain, &att);
      } else {
        out = model.forward(frames, NormMode::kTrain);
      }
      auto loss = cost_sensitive_loss(ops::softmax_lastdim(out.logits), batch.labels, costs);
      const double l = loss.value()[0];
      check_finite(l, "train");
      if (first) res.first_step_loss = l;
      first = false;
      if (opt.on_step) opt.on_step(epoch, steps, l);
      trainable.zero_grad();
      loss.backward();
      adam.step();
      total += l;
      ++steps;
    }
    EpochLog log{epoch, adam.lr(), total / static_cast<double>(steps), std::nullopt};
    if (!val_idx.empty()) log.val = evaluate_impl(model, data, val_idx, cfg, cache_ptr);
    res.curve.push_back(log);
    if (opt.on_epoch) opt.on_epoch(log);
  }
  if (!res.curve.empty()) res.final_val = res.curve.back().val;
  res.checkpoint = snapshot(all, cfg.to_json(), {{"kind", "stda"}, {"epochs", std::max(epochs, start_epoch)}});
  return res;
}

std::unique_ptr<StdaModel<float>> model_from_checkpoint(const Checkpoint& ckpt, ExperimentConfig* cfg_out) {
  const auto cfg = ExperimentConfig::from_json(ckpt.config);
  nn::Rng rng(cfg.seed());
  auto model = std::make_unique<StdaModel<float>>(cfg.model(), rng);
  auto set = model->parameters();
  restore(set, ckpt);
  if (cfg_out != nullptr) *cfg_out = cfg;
  return model;
}

MetricReport evaluate(StdaModel<float>& model, const std::vector<LabeledSequence>& data, const std::string& split,
                      const ExperimentConfig& cfg) {
  const auto idx = indices_of_split(data, split);
  require(!idx.empty(), ErrorCode::kNotFound, "evaluate: split '" + split + "' is absent");
  return evaluate_impl(model, data, idx, cfg, nullptr);
}

MetricReport evaluate(const Checkpoint& ckpt, const std::vector<LabeledSequence>& data, const std::string& split) {
  ExperimentConfig cfg;
  auto model = model_from_checkpoint(ckpt, &cfg);
  return evaluate(*model, data, split, cfg);
}

double g_mean_increase(double base, double cell) {
  require(base > 0.0, ErrorCode::kValue, "G-mean increase: baseline G-mean is zero");
  return (cell - base) / base;
}

std::string format_increase(double fraction) {
  std::ostringstream os;
  os << std::showpos << std::fixed << std::setprecision(1) << fraction * 100.0 << "%";
  return os.str();
}

std::vector<AblationRow> ablate(const ExperimentConfig& cfg, const std::vector<LabeledSequence>& data,
                                const std::vector<std::string>& backbones, const Checkpoint* da_init,
                                const std::function<void(const AblationRow&)>& on_row) {
  require(!backbones.empty(), ErrorCode::kConfig, "ablate: no backbones given");
  for (const auto& name : backbones) {
    require(BackboneRegistry<float>::instance().contains(name), ErrorCode::kNotFound,
            "ablate: unknown backbone '" + name + "'");
  }
  std::vector<AblationRow> rows;
  for (const auto& name : backbones) {
    double base = 0;
    for (int cell = 0; cell < 4; ++cell) {
      const bool da = cell == 1 || cell == 3, temporal = cell >= 2;
      auto c = cfg;
      c.set("backbone", name);
      c.set("da.enabled", da ? "true" : "false");
      c.set("temporal.enabled", temporal ? "true" : "false");
      TrainOptions opt;
      opt.da_init = da_init;
      auto res = train(c, data, opt);
      require(res.final_val.has_value(), ErrorCode::kNotFound, "ablate: validation split is empty");
      AblationRow row{name, da, temporal, *res.final_val, std::nullopt};
      if (cell == 0) base = row.report.average.g_mean;
      else if (base > 0) row.increase = g_mean_increase(base, row.report.average.g_mean);
      if (on_row) on_row(row);
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string ablation_text(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(20) << "backbone" << std::setw(6) << "DA" << std::setw(10) << "temporal" << std::setw(8)
     << "IBA" << std::setw(10) << "G-mean" << "increase\n";
  for (const auto& r : rows) {
    os << std::left << std::setw(20) << r.backbone << std::setw(6) << (r.da ? "on" : "-") << std::setw(10)
       << (r.temporal ? "on" : "-") << std::fixed << std::setprecision(3) << std::setw(8) << r.report.average.iba
       << std::setw(10) << r.report.average.g_mean << (r.increase ? format_increase(*r.increase) : "-") << "\n";
  }
  return os.str();
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "backbone,da,temporal,precision,recall,f1,specificity,iba,g_mean,g_mean_increase\n";
  os.precision(6);
  for (const auto& r : rows) {
    const auto& a = r.report.average;
    os << r.backbone << "," << r.da << "," << r.temporal << "," << a.precision << "," << a.recall << "," << a.f1 << ","
       << a.specificity << "," << a.iba << "," << a.g_mean << "," << (r.increase ? format_increase(*r.increase) : "")
       << "\n";
  }
  return os.str();
}

const std::vector<std::string>& underspecified_components() {
  static const std::vector<std::string> c{
      "attention decoder channel schedule (widths between the recurrent state and the map)",
      "behavior MLP head depth and width",
      "temporal encoder FFN width",
      "cross-attention token width",
  };
  return c;
}

std::string BenchReport::to_text() const {
  std::ostringstream os;
  os.precision(6);
  os << "preset=" << preset << "\n"
     << "batch=" << batch << "\n"
     << "iterations=" << iterations << "\n"
     << "params=" << params << "\n"
     << "params_millions=" << std::fixed << std::setprecision(2) << params / 1e6 << "\n"
     << "reference_params_millions=" << reference_params / 1e6 << "\n"
     << std::defaultfloat << std::setprecision(6)
     << "params_ratio=" << static_cast<double>(params) / reference_params << "\n"
     << "within_band=" << (within_band ? 1 : 0) << "\n"
     << "macs_per_sequence=" << macs_per_sequence << "\n"
     << "images_per_s_mean=" << mean_images_per_s << "\n"
     << "images_per_s_stddev=" << stddev_images_per_s << "\n";
  for (const auto& u : underspecified) os << "underspecified=" << u << "\n";
  if (!error.empty()) os << "error=" << error << "\n";
  return os.str();
}

namespace {

int64_t available_bytes() {
  std::ifstream in("/proc/meminfo");
  std::string key;
  int64_t kb = 0;
  std::string unit;
  while (in >> key >> kb >> unit) {
    if (key == "MemAvailable:") return kb * 1024;
  }
  return -1;
}

int64_t peak_rss_bytes() {
  rusage u{};
  getrusage(RUSAGE_SELF, &u);
  return static_cast<int64_t>(u.ru_maxrss) * 1024;
}

Tensor<float> bench_frames(const StdaConfig& c, int batch, uint64_t seed) {
  Tensor<float> f({batch, c.t_len, 3, c.image_size, c.image_size});
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (auto& v : f.storage()) v = u(rng);
  return f;
}

}  // namespace

BenchReport bench_throughput(StdaModel<float>& model, int batch, int n_iter, int warmup) {
  require(batch >= 1 && n_iter >= 1 && warmup >= 0, ErrorCode::kConfig, "bench: batch and iterations must be positive");
  const auto& c = model.config();
  BenchReport rep;
  rep.preset = c.preset;
  rep.batch = batch;
  rep.iterations = n_iter;
  rep.params = model.parameters().param_count();
  const double ratio = static_cast<double>(rep.params) / rep.reference_params;
  rep.within_band = ratio >= 0.8 && ratio <= 1.2;
  if (!rep.within_band) rep.underspecified = underspecified_components();

  NoGradGuard guard;
  const int64_t before = peak_rss_bytes();
  ops::MacCounter::reset();
  model.forward(Var<float>(bench_frames(c, 1, 0)), NormMode::kEval);
  rep.macs_per_sequence = ops::MacCounter::value();
  const int64_t per_sequence = std::max<int64_t>(peak_rss_bytes() - before,
                                                 int64_t{64} * c.t_len * 3 * c.image_size * c.image_size * 4);
  const int64_t avail = available_bytes();
  if (avail > 0 && per_sequence * batch > avail * 8 / 10) {
    rep.error = "E_RESOURCE batch " + std::to_string(batch) + " needs about " +
                std::to_string(per_sequence * batch >> 20) + " MiB, " + std::to_string(avail >> 20) +
                " MiB available";
    return rep;
  }
  try {
    Var<float> frames(bench_frames(c, batch, 1));
    for (int i = 0; i < warmup; ++i) model.forward(frames, NormMode::kEval);
    std::vector<double> ips;
    for (int i = 0; i < n_iter; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      auto out = model.forward(frames, NormMode::kEval);
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      ips.push_back(batch * c.t_len / std::max(s, 1e-9));
    }
    double mean = 0, var = 0;
    for (double v : ips) mean += v;
    mean /= static_cast<double>(ips.size());
    for (double v : ips) var += (v - mean) * (v - mean);
    rep.mean_images_per_s = mean;
    rep.stddev_images_per_s = ips.size() > 1 ? std::sqrt(var / static_cast<double>(ips.size() - 1)) : 0.0;
  } catch (const std::bad_alloc&) {
    rep.error = "E_RESOURCE batch " + std::to_string(batch) + " exhausted memory";
  }
  return rep;
}

namespace {

std::array<double, 3> jet(double v) {
  auto ch = [](double x) { return std::clamp(1.5 - std::abs(x), 0.0, 1.0); };
  return {ch(4 * v - 3), ch(4 * v - 2), ch(4 * v - 1)};
}

}  // namespace

Image overlay_frame(const float* frame, const float* attention, int height, int width, double beta) {
  require(beta >= 0.0 && beta <= 1.0, ErrorCode::kValue, "overlay: beta must lie in [0,1]");
  const size_t plane = static_cast<size_t>(height) * width;
  const auto [lo, hi] = std::minmax_element(attention, attention + plane);
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  Image img{width, height, 3, std::vector<uint8_t>(3 * plane)};
  for (size_t p = 0; p < plane; ++p) {
    const double norm = range > 0 ? (attention[p] - *lo) / range : 0.0;
    const auto cm = jet(norm);
    for (int c = 0; c < 3; ++c) {
      const double v = (1 - beta) * frame[c * plane + p] + beta * cm[c];
      img.pixels[p * 3 + c] = static_cast<uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
    }
  }
  return img;
}

fs::path emit_overlays(StdaModel<float>& model, const std::vector<LabeledSequence>& data,
                       const std::vector<size_t>& indices, const fs::path& out_dir, double beta) {
  require(!indices.empty(), ErrorCode::kValue, "overlays: no sequences selected");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  require(!ec && fs::is_directory(out_dir), ErrorCode::kIo, "overlays: cannot create " + out_dir.string());
  auto batch = make_batch(data, indices);
  Var<float> maps;
  {
    NoGradGuard guard;
    maps = model.attention_maps(Var<float>(batch.frames), NormMode::kEval);
  }
  const int64_t n = batch.frames.dim(0), t = batch.frames.dim(1), h = batch.frames.dim(3), w = batch.frames.dim(4);
  const size_t plane = static_cast<size_t>(h * w);
  Image grid{static_cast<int>(w * t), static_cast<int>(h * n), 3, std::vector<uint8_t>(3 * plane * n * t)};
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t k = 0; k < t; ++k) {
      const float* frame = batch.frames.data() + (i * t + k) * 3 * plane;
      const float* att = maps.value().data() + (i * t + k) * plane;
      const auto tile = overlay_frame(frame, att, static_cast<int>(h), static_cast<int>(w), beta);
      for (int64_t y = 0; y < h; ++y) {
        const size_t dst = ((i * h + y) * grid.width + k * w) * 3;
        std::copy_n(tile.pixels.begin() + static_cast<int64_t>(y * w * 3), w * 3, grid.pixels.begin() + static_cast<int64_t>(dst));
      }
    }
  }
  const fs::path path = out_dir / "overlay_grid.png";
  write_png(path, grid);
  return path;
}

}  // namespace stda
