#include <filesystem>
#include <iomanip>
#include <iostream>
#include <new>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stda/gradcheck.hpp"
#include "stda/harness.hpp"

namespace fs = std::filesystem;
using namespace stda;

namespace {

struct Common {
  std::string config_path;
};

// defaults < config file < STDA_SEED < --key=value flags
ExperimentConfig resolve_config(const Common& common, const std::vector<std::string>& extras,
                                const ExperimentConfig* base = nullptr) {
  ExperimentConfig cfg = base != nullptr ? *base : ExperimentConfig{};
  if (!common.config_path.empty()) cfg.merge_file(common.config_path);
  cfg.apply_env();
  for (const auto& e : extras) cfg.apply_override(e);
  return cfg;
}

fs::path out_dir(const ExperimentConfig& cfg) {
  fs::path dir = cfg.str("out_dir");
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::kIo, "cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

void print_epoch(const EpochLog& e) {
  std::cout << "epoch " << e.epoch << " lr " << e.lr << " loss " << std::setprecision(6) << e.loss;
  if (e.val) std::cout << " val_g_mean " << e.val->average.g_mean << " val_iba " << e.val->average.iba;
  std::cout << std::endl;
}

void write_report(const fs::path& dir, const std::string& stem, const MetricReport& r) {
  write_text_file(dir / (stem + ".txt"), r.to_text());
  write_text_file(dir / (stem + ".json"), r.to_json());
}

int run_synth(const ExperimentConfig& cfg) {
  auto data = load_data(cfg);
  const auto manifest = save_dataset(data, out_dir(cfg) / "dataset");
  std::cout << "wrote " << data.size() << " sequences to " << manifest.string() << "\n";
  return 0;
}

int run_pretrain(const ExperimentConfig& cfg) {
  auto data = load_data(cfg);
  auto res = pretrain_da(cfg, data);
  for (const auto& e : res.curve) print_epoch(e);
  const auto dir = out_dir(cfg);
  save_checkpoint(dir / "da.ckpt", res.checkpoint);
  write_text_file(dir / "pretrain_loss.csv", loss_curve_csv(res.curve));
  std::cout << "initial loss " << res.initial_loss << ", checkpoint " << (dir / "da.ckpt").string() << "\n";
  return 0;
}

int run_train(const ExperimentConfig& cfg, const std::string& resume_path) {
  auto data = load_data(cfg);
  TrainOptions opt;
  opt.on_epoch = print_epoch;
  Checkpoint da_init, resume;
  if (!cfg.str("da.checkpoint").empty()) {
    da_init = load_checkpoint(cfg.str("da.checkpoint"));
    opt.da_init = &da_init;
  }
  if (!resume_path.empty()) {
    resume = load_checkpoint(resume_path);
    opt.resume = &resume;
  }
  auto res = train(cfg, data, opt);
  const auto dir = out_dir(cfg);
  save_checkpoint(dir / "model.ckpt", res.checkpoint);
  write_text_file(dir / "train_loss.csv", loss_curve_csv(res.curve));
  if (res.final_val) {
    write_report(dir, "val_report", *res.final_val);
    std::cout << res.final_val->to_text();
  }
  std::cout << "checkpoint " << (dir / "model.ckpt").string() << "\n";
  return 0;
}

int run_eval(const Common& common, const std::vector<std::string>& extras, const std::string& ckpt_path,
             std::string split) {
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto stored = ExperimentConfig::from_json(ckpt.config);
  const auto cfg = resolve_config(common, extras, &stored);
  if (split.empty()) split = cfg.str("eval.split");
  auto data = load_data(cfg);
  auto model = model_from_checkpoint(ckpt);
  const auto report = evaluate(*model, data, split, cfg);
  write_report(out_dir(cfg), "eval_" + split, report);
  std::cout << report.to_text();
  return 0;
}

int run_ablate(const ExperimentConfig& cfg, std::vector<std::string> backbones) {
  if (backbones.empty()) backbones = tiny_backbone_names();
  auto data = load_data(cfg);
  Checkpoint da_init;
  if (!cfg.str("da.checkpoint").empty()) {
    da_init = load_checkpoint(cfg.str("da.checkpoint"));
  } else {
    std::cout << "pretraining attention predictor\n";
    da_init = pretrain_da(cfg, data).checkpoint;
  }
  auto rows = ablate(cfg, data, backbones, &da_init, [](const AblationRow& r) {
    std::cout << r.backbone << " da=" << (r.da ? "on" : "off") << " temporal=" << (r.temporal ? "on" : "off")
              << " g_mean " << r.report.average.g_mean << std::endl;
  });
  const auto dir = out_dir(cfg);
  write_text_file(dir / "ablation.txt", ablation_text(rows));
  write_text_file(dir / "ablation.csv", ablation_csv(rows));
  std::cout << ablation_text(rows);
  return 0;
}

int run_bench(const ExperimentConfig& cfg, const std::string& ckpt_path, int batch, int iters) {
  std::unique_ptr<StdaModel<float>> model;
  if (!ckpt_path.empty()) {
    model = model_from_checkpoint(load_checkpoint(ckpt_path));
  } else {
    nn::Rng rng(cfg.seed());
    model = std::make_unique<StdaModel<float>>(cfg.model(), rng);
  }
  const auto report = bench_throughput(*model, batch, iters);
  std::cout << report.to_text();
  write_text_file(out_dir(cfg) / "bench.txt", report.to_text());
  if (!report.error.empty()) fail(ErrorCode::kResource, report.error);
  return 0;
}

int run_overlays(const Common& common, const std::vector<std::string>& extras, const std::string& ckpt_path,
                 int count, double beta) {
  const auto ckpt = load_checkpoint(ckpt_path);
  const auto stored = ExperimentConfig::from_json(ckpt.config);
  const auto cfg = resolve_config(common, extras, &stored);
  auto data = load_data(cfg);
  auto model = model_from_checkpoint(ckpt);
  auto idx = indices_of_split(data, cfg.str("eval.split"));
  if (idx.empty()) {
    for (size_t i = 0; i < data.size(); ++i) idx.push_back(i);
  }
  if (idx.size() > static_cast<size_t>(count)) idx.resize(static_cast<size_t>(count));
  const auto path = emit_overlays(*model, data, idx, cfg.str("out_dir"), beta);
  std::cout << "wrote " << path.string() << "\n";
  return 0;
}

int run_check(int instances, uint64_t seed, double tolerance) {
  bool ok = true;
  for (const auto& op : gradient_suite_ops()) {
    const auto r = check_gradients(op, instances, seed, tolerance);
    std::cout << std::left << std::setw(22) << r.op << " instances " << r.instances << " entries " << r.entries
              << " max_rel_error " << std::scientific << std::setprecision(2) << r.max_rel_error << std::defaultfloat
              << " tol " << r.tolerance << " " << std::fixed << std::setprecision(2) << r.seconds << "s "
              << std::defaultfloat << (r.passed ? "PASS" : "FAIL") << std::endl;
    ok = ok && r.passed;
  }
  if (!ok) fail(ErrorCode::kValue, "gradient check failed for at least one op");
  return 0;
}

int report_error(std::string_view code, const std::string& what) {
  std::string line = what;
  for (char& c : line) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::cerr << code << ": " << line << std::endl;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Driver attention and temporal encoding experiment harness"};
  app.require_subcommand(1);
  Common common;

  auto add = [&](const std::string& name, const std::string& help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", common.config_path, "key=value config file");
    sub->allow_extras();
    return sub;
  };

  auto* synth = add("synth", "Generate a synthetic dataset on disk");
  auto* pretrain = add("pretrain-da", "Pretrain the attention predictor");
  auto* trainc = add("train", "Train the full model");
  std::string resume_path;
  trainc->add_option("--resume", resume_path, "Continue from a model checkpoint");
  auto* evalc = add("eval", "Evaluate a checkpoint on a split");
  std::string ckpt_path, split;
  evalc->add_option("--checkpoint", ckpt_path, "Model checkpoint")->required();
  evalc->add_option("--split", split, "Split name (default eval.split)");
  auto* ablatec = add("ablate", "Attention x temporal ablation grid per backbone");
  std::vector<std::string> backbones;
  ablatec->add_option("--backbones", backbones, "Registered backbone names")->delimiter(',');
  auto* benchc = add("bench", "Throughput and parameter count");
  int batch = 8, iters = 20;
  benchc->add_option("--checkpoint", ckpt_path, "Model checkpoint (default: fresh model from config)");
  benchc->add_option("--batch", batch, "Sequences per forward pass");
  benchc->add_option("--iters", iters, "Timed iterations");
  auto* overlaysc = add("overlays", "Attention overlay grid");
  int count = 2;
  double beta = 0.4;
  overlaysc->add_option("--checkpoint", ckpt_path, "Model checkpoint")->required();
  overlaysc->add_option("--count", count, "Number of sequences");
  overlaysc->add_option("--beta", beta, "Heatmap weight");
  auto* checkc = add("check", "Finite-difference gradient suite");
  int instances = 10;
  uint64_t check_seed = 1;
  double tolerance = 1e-5;
  checkc->add_option("--instances", instances, "Random instances per op");
  checkc->add_option("--seed", check_seed, "Instance seed");
  checkc->add_option("--tolerance", tolerance, "Relative error bound");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error(error_code_name(ErrorCode::kConfig), e.what());
  }

  try {
    auto* sub = app.get_subcommands().front();
    const auto extras = sub->remaining();
    if (sub == evalc) return run_eval(common, extras, ckpt_path, split);
    if (sub == overlaysc) return run_overlays(common, extras, ckpt_path, count, beta);
    if (sub == checkc) return run_check(instances, check_seed, tolerance);
    const auto cfg = resolve_config(common, extras);
    if (sub == synth) return run_synth(cfg);
    if (sub == pretrain) return run_pretrain(cfg);
    if (sub == trainc) return run_train(cfg, resume_path);
    if (sub == ablatec) return run_ablate(cfg, backbones);
    if (sub == benchc) return run_bench(cfg, ckpt_path, batch, iters);
  } catch (const Error& e) {
    return report_error(error_code_name(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return report_error(error_code_name(ErrorCode::kResource), "out of memory");
  } catch (const std::exception& e) {
    return report_error("E_INTERNAL", e.what());
  }
  return 0;
}
