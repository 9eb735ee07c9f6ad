// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// d2etr command line: dataset generation, training, evaluation, FLOP
// reports, attention-by-scale reports and gradient checking.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "d2etr/checkpoint.hpp"
#include "d2etr/complexity.hpp"
#include "d2etr/config.hpp"
#include "d2etr/harness.hpp"

namespace fs = std::filesystem;
using namespace d2etr;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;  ///< empty: data.dir for gen-data, "run" otherwise
};

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? make_config({}) : load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.model.init_seed = *c.seed;
  }
  return cfg;
}

fs::path out_dir(const Common& c) {
  const fs::path dir = c.out_dir.empty() ? fs::path("run") : fs::path(c.out_dir);
  fs::create_directories(dir);
  return dir;
}

std::unique_ptr<Detector> load_model(const RunConfig& cfg, const std::string& checkpoint) {
  auto det = std::make_unique<Detector>(cfg.model);
  if (!checkpoint.empty()) load_checkpoint(det->params(), checkpoint);
  return det;
}

void print_eval(const EvalResult& r, std::ostream& os) {
  os << "images " << r.images << "\nAP " << r.ap << "\nAP50 " << r.ap50 << "\nAP75 " << r.ap75 << '\n';
  for (std::size_t c = 0; c < r.per_class_ap.size(); ++c) {
    os << "AP[" << data::kClassNames[c] << "] " << r.per_class_ap[c] << "  AP50[" << data::kClassNames[c]
       << "] " << r.per_class_ap50[c] << '\n';
  }
  for (int s = 0; s < 3; ++s) os << "AP[" << data::kSizeNames[s] << "] " << r.per_size_ap[s] << '\n';
}

int cmd_gen_data(const Common& c) {
  const RunConfig cfg = resolve(c);
  const fs::path dir = c.out_dir.empty() ? fs::path(cfg.data_dir) : out_dir(c);
  data::save(data::generate(cfg.data_train, cfg.seed, cfg.generator), dir / "train");
  if (cfg.data_val > 0) data::save(data::generate(cfg.data_val, cfg.seed + 1, cfg.generator), dir / "val");
  spdlog::info("wrote {} train / {} val images to {}", cfg.data_train, cfg.data_val, dir.string());
  return kOk;
}

int cmd_train(const Common& c) {
  const RunConfig cfg = resolve(c);
  const fs::path dir = out_dir(c);
  std::ofstream(dir / "config.cfg") << render_config(cfg);
  const data::Dataset train_set = data::load(fs::path(cfg.data_dir) / "train");
  std::optional<data::Dataset> val;
  if (fs::exists(fs::path(cfg.data_dir) / "val" / "images.bin")) val = data::load(fs::path(cfg.data_dir) / "val");
  Detector det(cfg.model);
  spdlog::info("{} parameters ({} values), {} training images", det.params().size(), det.params().total_values(),
               train_set.size());
  TrainOptions opt;
  opt.out_dir = dir;
  opt.val = val ? &*val : nullptr;
  opt.eval_top_k = cfg.eval_top_k;
  const auto t0 = std::chrono::steady_clock::now();
  opt.on_epoch = [&](const EpochLog& r) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    spdlog::info("epoch {:3d} total {:.4f} (cls {:.4f} bbox {:.4f} awr {:.4f} token {:.4f}) lr {:.1e} val AP50 {:.4f} [{:.0f}s]",
                 r.epoch, r.l_total, r.l_cls, r.l_bbox, r.l_awr, r.l_token, r.lr, r.val_ap50, s);
  };
  train(det, train_set, cfg.train, cfg.seed, opt);
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& split) {
  const RunConfig cfg = resolve(c);
  const auto det = load_model(cfg, checkpoint);
  const data::Dataset ds = data::load(fs::path(cfg.data_dir) / split);
  print_eval(evaluate_ap(*det, ds, cfg.eval_top_k, cfg.eval_images), std::cout);
  return kOk;
}

int cmd_flops(const Common& c, int s_min, int s_max) {
  const RunConfig cfg = resolve(c);
  const fs::path dir = out_dir(c);
  complexity::FusionShape shape;
  shape.channels = cfg.model.backbone.fuse_width;
  shape.heads = cfg.model.backbone.fuse_heads;
  shape.pool = cfg.model.backbone.fuse_pool;
  const auto rows = complexity::scaling_report(shape, s_min, s_max);
  std::ofstream csv(dir / "scaling.csv");
  complexity::write_scaling_csv(csv, rows);
  complexity::write_scaling_csv(std::cout, rows);

  Detector det(cfg.model);
  const Tensor image({3, cfg.model.backbone.image_size, cfg.model.backbone.image_size}, 0.5);
  const auto counter = complexity::count_forward([&] {
    ad::Tape tape;
    det.forward(tape, image, false);
  });
  std::ofstream blocks(dir / "flops_by_label.csv");
  blocks << "label,flops\n";
  for (const auto& [label, n] : counter.by_label()) blocks << label << ',' << n << '\n';
  std::cout << "inference forward FLOPs " << counter.total() << " (backbone stages " << counter.total_with_segment("stage1") +
                   counter.total_with_segment("stage2") + counter.total_with_segment("stage3") +
                   counter.total_with_segment("stage4")
            << ", decoder " << counter.total("decoder") << ")\n";
  return kOk;
}

int cmd_report_attn(const Common& c, const std::string& checkpoint, const std::string& split, bool uniform) {
  const RunConfig cfg = resolve(c);
  const auto det = load_model(cfg, checkpoint);
  if (uniform) make_cross_attention_uniform(*det);
  const data::Dataset ds = data::load(fs::path(cfg.data_dir) / split);
  const auto rows = attention_scale_report(*det, ds, cfg.attn_images);
  std::ofstream csv(out_dir(c) / (uniform ? "attention_uniform.csv" : "attention.csv"));
  write_attention_csv(csv, rows);
  write_attention_csv(std::cout, rows);
  return kOk;
}

int cmd_grad_check(const Common& c) {
  const RunConfig cfg = resolve(c);
  Detector det(cfg.model);
  data::GeneratorOptions gen = cfg.generator;
  const data::Dataset ds = data::generate(1, cfg.seed, gen);
  const auto t0 = std::chrono::steady_clock::now();
  const auto checks = grad_check_model(det, ds.samples[0], cfg.gradcheck_h, cfg.gradcheck_coords, cfg.seed);
  const int rc = report_grad_check(checks, cfg.gradcheck_tolerance, std::cout);
  std::cout << "elapsed " << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"d2etr: cross-scale fusing detection transformer, desk-scale toolkit"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "key = value configuration file (defaults when omitted)");
    sub->add_option("--seed", common.seed, "override the configured seed");
    sub->add_option("--out-dir", common.out_dir, "output directory (gen-data: data.dir; others: run)");
  };
  std::string checkpoint, split = "val";
  int s_min = 1, s_max = 5;
  bool uniform = false;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic train/val datasets into --out-dir");
  add_common(gen);
  auto* tr = app.add_subcommand("train", "train a detector; writes log.csv, final.ckpt, best.ckpt");
  add_common(tr);
  auto* ev = app.add_subcommand("eval", "evaluate AP of a checkpoint");
  add_common(ev);
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--split", split, "dataset split under data.dir")->capture_default_str();
  auto* fl = app.add_subcommand("flops", "counted vs formula fusing cost and per-block forward FLOPs");
  add_common(fl);
  fl->add_option("--s-min", s_min, "smallest number of scales")->capture_default_str();
  fl->add_option("--s-max", s_max, "largest number of scales")->capture_default_str();
  auto* ra = app.add_subcommand("report-attn", "cross-attention mass per memory scale by object size");
  add_common(ra);
  ra->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ra->add_option("--split", split, "dataset split under data.dir")->capture_default_str();
  ra->add_flag("--uniform", uniform, "zero cross-attention query/key projections first");
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of the full loss");
  add_common(gc);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen_data(common);
    if (*tr) return cmd_train(common);
    if (*ev) return cmd_eval(common, checkpoint, split);
    if (*fl) return cmd_flops(common, s_min, s_max);
    if (*ra) return cmd_report_attn(common, checkpoint, split, uniform);
    if (*gc) return cmd_grad_check(common);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kInvalid;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kInvalid;
  }
  return kOk;
}
