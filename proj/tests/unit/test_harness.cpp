// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "d2etr/checkpoint.hpp"
#include "d2etr/config.hpp"
#include "d2etr/dataset.hpp"
#include "d2etr/detector.hpp"
#include "d2etr/evaluation.hpp"
#include "d2etr/harness.hpp"
#include "d2etr/optim.hpp"
#include "test_util.hpp"

namespace d2etr {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("d2etr_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------- dataset

TEST(Dataset, GenerationIsDeterministic) {
  const data::Dataset a = data::generate(5, 7), b = data::generate(5, 7), c = data::generate(5, 8);
  ASSERT_EQ(a.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_EQ(a.samples[i].targets.labels, b.samples[i].targets.labels);
  }
  EXPECT_NE(a.samples[0].image, c.samples[0].image);
}

TEST(Dataset, ObjectsRespectGeneratorBounds) {
  const data::GeneratorOptions opt;
  const data::Dataset ds = data::generate(60, 3, opt);
  for (const data::Sample& s : ds.samples) {
    const ImageTargets& t = s.targets;
    ASSERT_GE(t.size(), opt.min_objects);
    ASSERT_LE(t.size(), opt.max_objects);
    ASSERT_EQ(t.masks.shape(), (Shape{data::kNumClasses, 64, 64}));
    for (double v : s.image.data()) ASSERT_TRUE(v >= 0.0 && v <= 1.0);
    for (int i = 0; i < t.size(); ++i) {
      EXPECT_GE(t.boxes[i].w * 64, opt.min_side - 1e-9);
      EXPECT_LE(t.boxes[i].w * 64, opt.max_side + 1e-9);
      for (int j = 0; j < i; ++j) EXPECT_LE(iou(t.boxes[i], t.boxes[j]), opt.max_overlap + 1e-12);
    }
    // Every mask pixel lies inside some box of its class.
    for (int k = 0; k < data::kNumClasses; ++k)
      for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
          if (t.masks.at(k, y, x) == 0.0) continue;
          bool inside = false;
          for (int i = 0; i < t.size(); ++i) {
            const Corners c = t.boxes[i].corners();
            inside = inside || (t.labels[i] == k && (x + 0.5) / 64 >= c.x1 && (x + 0.5) / 64 <= c.x2 &&
                                (y + 0.5) / 64 >= c.y1 && (y + 0.5) / 64 <= c.y2);
          }
          ASSERT_TRUE(inside) << "class " << k << " pixel " << x << "," << y;
        }
  }
}

TEST(Dataset, ClassesAreBalanced) {
  const data::Dataset ds = data::generate(1000, 11);
  int counts[2] = {0, 0};
  for (const data::Sample& s : ds.samples)
    for (int l : s.targets.labels) ++counts[l];
  const double share = static_cast<double>(counts[0]) / (counts[0] + counts[1]);
  EXPECT_GT(share, 0.45);
  EXPECT_LT(share, 0.55);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const fs::path dir = scratch("ds");
  const data::Dataset a = data::generate(4, 2);
  data::save(a, dir);
  const data::Dataset b = data::load(dir);
  ASSERT_EQ(b.size(), 4u);
  EXPECT_EQ(b.image_size, 64);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a.samples[i].image, b.samples[i].image);
    EXPECT_EQ(a.samples[i].targets.masks, b.samples[i].targets.masks);
    EXPECT_EQ(a.samples[i].targets.labels, b.samples[i].targets.labels);
    for (int j = 0; j < a.samples[i].targets.size(); ++j)
      EXPECT_DOUBLE_EQ(a.samples[i].targets.boxes[j].cx, b.samples[i].targets.boxes[j].cx);
  }
  EXPECT_ANY_THROW(data::load(dir / "missing"));
  fs::remove_all(dir);
}

TEST(Dataset, HorizontalFlipMirrorsEverything) {
  const data::Sample s = data::generate(1, 4).samples[0];
  const data::Sample f = data::hflip(s);
  EXPECT_DOUBLE_EQ(f.image.at(1, 10, 0), s.image.at(1, 10, 63));
  EXPECT_DOUBLE_EQ(f.targets.masks.at(0, 5, 2), s.targets.masks.at(0, 5, 61));
  EXPECT_NEAR(f.targets.boxes[0].cx, 1.0 - s.targets.boxes[0].cx, 1e-15);
  EXPECT_DOUBLE_EQ(f.targets.boxes[0].cy, s.targets.boxes[0].cy);
  EXPECT_EQ(data::hflip(f).image, s.image);
}

TEST(Dataset, SizeClassesRescaleWithImage) {
  const data::SizeThresholds t = data::size_thresholds(64);
  EXPECT_DOUBLE_EQ(t.small_max, 64.0);
  EXPECT_DOUBLE_EQ(t.large_min, 576.0);
  EXPECT_EQ(data::size_class(63.0, t), data::SizeClass::kSmall);
  EXPECT_EQ(data::size_class(100.0, t), data::SizeClass::kMedium);
  EXPECT_EQ(data::size_class(577.0, t), data::SizeClass::kLarge);
  EXPECT_DOUBLE_EQ(data::size_thresholds(256).small_max, 1024.0);
}

// ---------------------------------------------------------------- optimizer

TEST(AdamW, FirstStepOracle) {
  ad::ParameterStore store;
  ad::Parameter& p = store.add("p", Tensor({2}, {1.0, -2.0}));
  p.grad = Tensor({2}, {0.5, -3.0});
  optim::AdamW opt(store, {0.1, 0.9, 0.999, 1e-8, 0.01});
  ASSERT_TRUE(opt.step());
  // Bias correction makes the first update lr * sign(g), plus decoupled decay.
  EXPECT_NEAR(p.value[0], 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0), 1e-15);
  EXPECT_NEAR(p.value[1], -2.0 - 0.1 * (-3.0 / (3.0 + 1e-8) + 0.01 * -2.0), 1e-15);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(AdamW, SecondStepOracle) {
  ad::ParameterStore store;
  ad::Parameter& p = store.add("p", Tensor({1}, {0.0}));
  optim::AdamW opt(store, {0.01, 0.9, 0.99, 1e-8, 0.0});
  p.grad = Tensor({1}, {1.0});
  opt.step();
  p.grad = Tensor({1}, {-1.0});
  opt.step();
  const double m = 0.9 * 0.1 - 0.1, v = 0.99 * 0.01 + 0.01;
  const double update = (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.9801)) + 1e-8);
  const double first = -0.01 * (1.0 / (1.0 + 1e-8));
  EXPECT_NEAR(p.value[0], first - 0.01 * update, 1e-15);
}

TEST(AdamW, SkipsNonFiniteGradients) {
  ad::ParameterStore store;
  ad::Parameter& p = store.add("p", Tensor({2}, {1.0, 1.0}));
  p.grad = Tensor({2}, {0.1, std::nan("")});
  optim::AdamW opt(store, {});
  EXPECT_FALSE(opt.step());
  EXPECT_EQ(p.value, Tensor({2}, {1.0, 1.0}));
  EXPECT_EQ(opt.steps(), 0);
  EXPECT_THROW(optim::AdamW(store, {-1.0}), ConfigError);
}

TEST(AdamW, ClipRescalesToMaxNorm) {
  ad::ParameterStore store;
  store.add("a", Tensor({1}, {0.0})).grad = Tensor({1}, {3.0});
  store.add("b", Tensor({1}, {0.0})).grad = Tensor({1}, {4.0});
  EXPECT_DOUBLE_EQ(optim::clip_grad_norm(store, 1.0), 5.0);
  EXPECT_NEAR(store.at("a").grad[0], 0.6, 1e-15);
  EXPECT_NEAR(store.at("b").grad[0], 0.8, 1e-15);
  EXPECT_NEAR(optim::clip_grad_norm(store, 10.0), 1.0, 1e-15);
  EXPECT_NEAR(store.at("b").grad[0], 0.8, 1e-15);
}

TEST(Schedule, LearningRateDropsLate) {
  TrainConfig c;
  c.epochs = 10;
  c.adamw.lr = 1e-3;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 1), 1e-3);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 8), 1e-3);
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 9), 1e-4);
  EXPECT_DOUBLE_EQ(window_mean({1, 2, 3, 4}, 2, 4), 3.0);
  EXPECT_THROW(window_mean({1, 2}, 2, 1), ConfigError);
}

// ---------------------------------------------------------------- checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
  const fs::path dir = scratch("ckpt");
  Detector a(DetectorConfig::toy());
  save_checkpoint(a.params(), dir / "m.ckpt");
  DetectorConfig cfg = DetectorConfig::toy();
  cfg.init_seed = 99;
  Detector b(cfg);
  load_checkpoint(b.params(), dir / "m.ckpt");
  auto ib = b.params().begin();
  for (const ad::Parameter& p : a.params()) {
    EXPECT_EQ(p.name, ib->name);
    EXPECT_EQ(p.value, ib->value) << p.name;
    ++ib;
  }
  const data::Dataset ds = data::generate(3, 5);
  const EvalResult ea = evaluate_ap(a, ds, 100), eb = evaluate_ap(b, ds, 100);
  EXPECT_EQ(ea.ap50, eb.ap50);
  EXPECT_EQ(ea.ap, eb.ap);
  const auto da = a.detect(ds.samples[0].image, 5), db = b.detect(ds.samples[0].image, 5);
  for (std::size_t i = 0; i < da.size(); ++i) EXPECT_EQ(da[i].score, db[i].score);
  fs::remove_all(dir);
}

TEST(Checkpoint, RejectsMismatchAndCorruption) {
  const fs::path dir = scratch("ckpt_bad");
  write_tensors(dir / "t.ckpt", {{"x", Tensor({2}, {1.0, 2.0})}});
  const NamedTensors back = read_tensors(dir / "t.ckpt");
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].second, Tensor({2}, {1.0, 2.0}));
  ad::ParameterStore s;
  s.add("x", Tensor({3}));
  EXPECT_THROW(load_checkpoint(s, dir / "t.ckpt"), ConfigError);
  ad::ParameterStore s2;
  s2.add("y", Tensor({2}));
  EXPECT_THROW(load_checkpoint(s2, dir / "t.ckpt"), ConfigError);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  EXPECT_THROW(read_tensors(dir / "junk.ckpt"), std::runtime_error);
  fs::remove_all(dir);
}

// ---------------------------------------------------------------- AP

ImageResult one_image(std::vector<Detection> dets) {
  ImageResult r;
  r.truth = {{0, {10, 10, 30, 30}}};
  r.detections = std::move(dets);
  return r;
}

TEST(AveragePrecision, PerfectAndEmpty) {
  EXPECT_DOUBLE_EQ(average_precision({one_image({{0, 0, 0.9, {10, 10, 30, 30}}})}, 0, 0.5), 1.0);
  EXPECT_DOUBLE_EQ(average_precision({one_image({})}, 0, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(average_precision({one_image({{0, 1, 0.9, {10, 10, 30, 30}}})}, 0, 0.5), 0.0);
  EXPECT_DOUBLE_EQ(average_precision({one_image({})}, 1, 0.5), -1.0);
}

TEST(AveragePrecision, RankingOfFalsePositives) {
  const Detection tp{0, 0, 0.9, {10, 10, 30, 30}}, fp{1, 0, 0.5, {40, 40, 60, 60}};
  EXPECT_DOUBLE_EQ(average_precision({one_image({tp, fp})}, 0, 0.5), 1.0);
  Detection early_fp = fp;
  early_fp.score = 0.95;
  EXPECT_DOUBLE_EQ(average_precision({one_image({tp, early_fp})}, 0, 0.5), 0.5);
  // A duplicate of a matched box is a false positive.
  Detection dup = tp;
  dup.score = 0.95;
  EXPECT_DOUBLE_EQ(average_precision({one_image({tp, dup})}, 0, 0.5), 1.0);
}

TEST(AveragePrecision, ThresholdAndAreaRange) {
  const Detection shifted{0, 0, 0.9, {14, 10, 34, 30}};  // IoU 16/24 = 2/3
  EXPECT_DOUBLE_EQ(average_precision({one_image({shifted})}, 0, 0.5), 1.0);
  EXPECT_DOUBLE_EQ(average_precision({one_image({shifted})}, 0, 0.75), 0.0);
  // Ground truth outside the range is ignored, and so is its match.
  EXPECT_DOUBLE_EQ(average_precision({one_image({shifted})}, 0, 0.5, {0, 100}), -1.0);
  ImageResult two = one_image({{0, 0, 0.9, {10, 10, 30, 30}}, {1, 0, 0.8, {50, 50, 55, 55}}});
  two.truth.push_back({0, {50, 50, 55, 55}});
  EXPECT_DOUBLE_EQ(average_precision({two}, 0, 0.5, {0, 100}), 1.0);
  const EvalResult e = evaluate({two}, 2, 64);
  EXPECT_DOUBLE_EQ(e.ap50, 1.0);
  EXPECT_DOUBLE_EQ(e.per_class_ap50[1], -1.0);
  EXPECT_DOUBLE_EQ(e.per_size_ap[0], 1.0);
}

// ---------------------------------------------------------------- config

TEST(Config, ParsesKeysAndComments) {
  const KeyValues kv = parse_key_values("# comment\nseed = 3\n\ntrain.epochs=5  # trailing\nbackbone.depths = 1,2,1,1\n");
  EXPECT_EQ(kv.at("seed"), "3");
  EXPECT_EQ(kv.at("train.epochs"), "5");
  const RunConfig c = make_config(kv);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.model.init_seed, 3u);
  EXPECT_EQ(c.train.epochs, 5);
  EXPECT_EQ(c.model.backbone.stages[1].depth, 2);
}

TEST(Config, RenderedDefaultsParseBack) {
  const RunConfig a;
  const RunConfig b = make_config(parse_key_values(render_config(a)));
  EXPECT_EQ(render_config(a), render_config(b));
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(make_config({{"train.epoch", "5"}}), ConfigError);
  EXPECT_THROW(make_config({{"train.epochs", "five"}}), ConfigError);
  EXPECT_THROW(make_config({{"train.epochs", "0"}}), ConfigError);
  EXPECT_THROW(make_config({{"decoder.memory", "all"}}), ConfigError);
  EXPECT_THROW(make_config({{"decoder.alpha", "0.9"}, {"decoder.beta", "0.2"}}), ConfigError);
  EXPECT_THROW(make_config({{"fuse.enabled", "maybe"}}), ConfigError);
  EXPECT_THROW(parse_key_values("seed\n"), ConfigError);
  EXPECT_THROW(parse_key_values("seed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(load_config("/nonexistent/x.cfg"), ConfigError);
}

// ---------------------------------------------------------------- training

data::Dataset tiny_set() { return data::generate(4, 21); }

TrainConfig tiny_train() {
  TrainConfig t;
  t.epochs = 2;
  t.batch_size = 2;
  t.eval_every = 0;
  return t;
}

TEST(Training, SmokeRunWritesArtifacts) {
  const fs::path dir = scratch("train");
  Detector det(DetectorConfig::toy());
  TrainOptions opt;
  opt.out_dir = dir;
  int callbacks = 0;
  opt.on_epoch = [&](const EpochLog&) { ++callbacks; };
  const auto logs = train(det, tiny_set(), tiny_train(), 1, opt);
  ASSERT_EQ(logs.size(), 2u);
  EXPECT_EQ(callbacks, 2);
  for (const EpochLog& l : logs) {
    EXPECT_TRUE(std::isfinite(l.l_total));
    EXPECT_NEAR(l.l_total, l.l_cls + l.l_bbox + l.l_awr + l.l_token, 1e-9 * std::abs(l.l_total));
  }
  EXPECT_TRUE(fs::exists(dir / "final.ckpt"));
  EXPECT_TRUE(fs::exists(dir / "best.ckpt"));
  std::ifstream log(dir / "log.csv");
  std::string header, row;
  std::getline(log, header);
  EXPECT_EQ(header, "epoch,l_cls,l_bbox,l_awr,l_token,l_total,lr");
  int rows = 0;
  while (std::getline(log, row)) ++rows;
  EXPECT_EQ(rows, 2);
  fs::remove_all(dir);
}

TEST(Training, SameSeedIsDeterministic) {
  Detector a(DetectorConfig::toy()), b(DetectorConfig::toy());
  const auto la = train(a, tiny_set(), tiny_train(), 5), lb = train(b, tiny_set(), tiny_train(), 5);
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i].l_total, lb[i].l_total);
  auto ib = b.params().begin();
  for (const ad::Parameter& p : a.params()) {
    EXPECT_EQ(p.value, ib->value) << p.name;
    ++ib;
  }
}

TEST(Training, ReducesLossOnFixedBatch) {
  Detector det(DetectorConfig::toy());
  TrainConfig t = tiny_train();
  t.epochs = 6;
  t.hflip = false;
  t.adamw.lr = 1e-3;
  const auto logs = train(det, tiny_set(), t, 2);
  EXPECT_LT(logs.back().l_total, logs.front().l_total);
}

// ---------------------------------------------------------------- attention report

TEST(AttentionReport, MassesSumToOnePerLayerAndSize) {
  Detector det(DetectorConfig::toy());
  const auto rows = attention_scale_report(det, data::generate(6, 9), 6);
  ASSERT_FALSE(rows.empty());
  std::map<std::pair<std::string, std::string>, double> totals;
  for (const AttentionRow& r : rows) {
    EXPECT_GE(r.mass, 0.0);
    totals[{r.layer, r.size_class}] += r.mass;
  }
  for (const auto& [key, total] : totals) EXPECT_NEAR(total, 1.0, 1e-9) << key.first << "/" << key.second;
  std::ostringstream os;
  write_attention_csv(os, rows);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), "layer,size_class,scale,stride,attention_mass");
}

TEST(AttentionReport, UniformAttentionMatchesTokenShares) {
  Detector det(DetectorConfig::toy());
  make_cross_attention_uniform(det);
  const auto rows = attention_scale_report(det, data::generate(4, 9), 4);
  const std::map<int, double> tokens{{8, 64}, {16, 16}, {32, 4}, {64, 1}};
  for (const AttentionRow& r : rows) EXPECT_NEAR(r.mass, tokens.at(r.stride) / 85.0, 1e-9) << r.layer << " " << r.stride;
}

TEST(AttentionReport, RequiresMultiScaleMemory) {
  DetectorConfig cfg = DetectorConfig::toy();
  cfg.decoder.memory = MemoryMode::kLastScale;
  Detector det(cfg);
  EXPECT_THROW(attention_scale_report(det, data::generate(1, 1), 1), ConfigError);
}

// ---------------------------------------------------------------- gradient check

TEST(GradCheckReport, ExitCodes) {
  std::ostringstream os;
  EXPECT_EQ(report_grad_check({{"a", 1e-8, 3}, {"b", 2e-6, 3}}, 1e-4, os), 0);
  EXPECT_NE(os.str().find("worst relative error"), std::string::npos);
  EXPECT_EQ(report_grad_check({{"a", 1e-8, 3}, {"b", 3e-2, 3}}, 1e-4, os), 2);
  EXPECT_EQ(report_grad_check({}, 1e-4, os), 0);
}

TEST(GradCheckReport, CorruptedGradientIsCaught) {
  ad::ParameterStore store;
  store.add("w", Tensor({3}, {0.3, -0.2, 0.5}));
  auto f = [&](bool with_grad) {
    const Tensor& w = store.at("w").value;
    if (with_grad)
      for (int i = 0; i < 3; ++i) store.at("w").grad[i] = 2 * w[i] + (i == 1 ? 0.5 : 0.0);
    return w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
  };
  std::ostringstream os;
  EXPECT_EQ(report_grad_check(ad::check_parameters(store, f, 1e-6, 3, 1), 1e-4, os), 2);
}

TEST(GradCheckReport, SmallDetectorPasses) {
  DetectorConfig cfg = DetectorConfig::toy();
  cfg.decoder.layers = 1;
  cfg.decoder.queries = 4;
  Detector det(cfg);
  const auto checks = grad_check_model(det, data::generate(1, 3).samples[0], 1e-6, 1, 4);
  std::ostringstream os;
  EXPECT_EQ(report_grad_check(checks, 1e-4, os), 0) << os.str();
  EXPECT_EQ(checks.size(), det.params().size());
}

}  // namespace
}  // namespace d2etr
