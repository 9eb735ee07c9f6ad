// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/harness.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>

#include <spdlog/spdlog.h>

#include "d2etr/checkpoint.hpp"

namespace d2etr {

void write_log_header(std::ostream& os) { os << "epoch,l_cls,l_bbox,l_awr,l_token,l_total,lr\n"; }

void write_log_row(std::ostream& os, const EpochLog& r) {
  const auto old = os.precision(17);
  os << r.epoch << ',' << r.l_cls << ',' << r.l_bbox << ',' << r.l_awr << ',' << r.l_token << ',' << r.l_total << ','
     << r.lr << '\n';
  os.precision(old);
}

double scheduled_lr(const TrainConfig& cfg, int epoch) {
  const int drop_at = static_cast<int>(std::lround(cfg.lr_drop_fraction * cfg.epochs));
  return epoch > drop_at ? cfg.adamw.lr * cfg.lr_drop_factor : cfg.adamw.lr;
}

std::vector<EpochLog> train(Detector& det, const data::Dataset& train_set, const TrainConfig& cfg,
                            std::uint64_t seed, const TrainOptions& opt) {
  cfg.validate();
  if (train_set.samples.empty()) throw ConfigError("train: empty training set");
  if (train_set.image_size != det.config().backbone.image_size) {
    throw ConfigError("train: dataset image size " + std::to_string(train_set.image_size) +
                      " does not match model image size " + std::to_string(det.config().backbone.image_size));
  }
  const std::size_t n = cfg.train_images > 0 ? std::min<std::size_t>(cfg.train_images, train_set.size())
                                             : train_set.size();
  std::ofstream log;
  if (opt.out_dir) {
    std::filesystem::create_directories(*opt.out_dir);
    log.open(*opt.out_dir / "log.csv", std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + (*opt.out_dir / "log.csv").string());
    write_log_header(log);
  }
  ad::ParameterStore& params = det.params();
  optim::AdamW adamw(params, cfg.adamw);
  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ull);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochLog> rows;
  double best = -std::numeric_limits<double>::infinity();
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    adamw.set_lr(scheduled_lr(cfg, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    EpochLog row;
    row.epoch = epoch;
    row.lr = adamw.lr();
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      params.zero_grad();
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const data::Sample& base = train_set.samples[order[i]];
        const bool flip = cfg.hflip && (rng() & 1u);
        const StepResult r = flip ? [&] {
          const data::Sample s = data::hflip(base);
          return det.accumulate(s.image, s.targets, scale);
        }()
                                  : det.accumulate(base.image, base.targets, scale);
        row.l_cls += r.cls;
        row.l_bbox += r.bbox;
        row.l_awr += r.awr;
        row.l_token += r.token;
        row.l_total += r.total;
      }
      optim::clip_grad_norm(params, cfg.clip_max_norm);
      if (!adamw.step()) {
        ++row.skipped_steps;
        spdlog::warn("epoch {}: non-finite gradient, optimizer step skipped", epoch);
      }
    }
    for (double* v : {&row.l_cls, &row.l_bbox, &row.l_awr, &row.l_token, &row.l_total}) *v /= static_cast<double>(n);

    // Best checkpoint: validation AP@0.50 when available, else lowest epoch loss.
    std::optional<double> metric;
    if (opt.val != nullptr && cfg.eval_every > 0) {
      if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
        row.val_ap50 = evaluate_ap(det, *opt.val, opt.eval_top_k).ap50;
        metric = row.val_ap50;
      }
    } else {
      metric = -row.l_total;
    }
    if (metric && *metric > best) {
      best = *metric;
      if (opt.out_dir) save_checkpoint(params, *opt.out_dir / "best.ckpt");
    }
    rows.push_back(row);
    if (log.is_open()) {
      write_log_row(log, row);
      log.flush();
    }
    if (opt.on_epoch) opt.on_epoch(row);
  }
  if (opt.out_dir) save_checkpoint(params, *opt.out_dir / "final.ckpt");
  return rows;
}

double window_mean(const std::vector<double>& values, int first, int last) {
  first = std::max(first, 1);
  last = std::min<int>(last, static_cast<int>(values.size()));
  if (first > last) throw ConfigError("window_mean: empty window");
  double s = 0;
  for (int i = first; i <= last; ++i) s += values[i - 1];
  return s / (last - first + 1);
}

std::vector<AttentionRow> attention_scale_report(const Detector& det, const data::Dataset& ds, int n) {
  const DetectorConfig& cfg = det.config();
  if (cfg.decoder.memory != MemoryMode::kMultiScale) {
    throw ConfigError("report-attn needs a multi-scale memory checkpoint (set decoder.memory = multi)");
  }
  if (ds.samples.empty()) throw ConfigError("report-attn: empty dataset");
  const int layers = cfg.decoder.layers;
  const data::SizeThresholds th = data::size_thresholds(ds.image_size);
  // mass[layer][size][level]
  std::vector<std::vector<std::vector<double>>> mass;
  std::vector<int> count(3, 0);
  std::vector<MemoryLevel> levels;
  const std::size_t limit = std::min<std::size_t>(n, ds.size());
  for (std::size_t i = 0; i < limit; ++i) {
    const data::Sample& s = ds.samples[i];
    ad::Tape tape;
    const DetectorOutput out = det.forward(tape, s.image, false, true);
    if (levels.empty()) {
      levels = out.decoder.memory;
      mass.assign(layers, std::vector<std::vector<double>>(3, std::vector<double>(levels.size(), 0.0)));
    }
    const FrozenTargets frozen = freeze_targets(out.decoder, s.targets, cfg.loss.match);
    for (const auto& [q, t] : frozen.layers.back().match.pairs) {
      const BBox& b = s.targets.boxes[t];
      const int sc = static_cast<int>(data::size_class(b.area() * ds.image_size * ds.image_size, th));
      ++count[sc];
      for (int l = 0; l < layers; ++l) {
        const Tensor& a = out.decoder.cross_attention[l];
        for (std::size_t j = 0; j < levels.size(); ++j) {
          double m = 0;
          for (int k = levels[j].begin; k < levels[j].begin + levels[j].tokens; ++k) m += a.at(q, k);
          mass[l][sc][j] += m;
        }
      }
    }
  }
  std::vector<AttentionRow> rows;
  auto emit = [&](const std::string& layer, int sc, const std::vector<double>& v) {
    for (std::size_t j = 0; j < levels.size(); ++j) {
      rows.push_back({layer, data::kSizeNames[sc], levels[j].scale, levels[j].stride, v[j]});
    }
  };
  for (int sc = 0; sc < 3; ++sc) {
    if (count[sc] == 0) continue;
    std::vector<double> summed(levels.size(), 0.0);
    for (int l = 0; l < layers; ++l) {
      std::vector<double> v(levels.size());
      for (std::size_t j = 0; j < levels.size(); ++j) {
        v[j] = mass[l][sc][j] / count[sc];
        summed[j] += v[j] / layers;
      }
      emit(std::to_string(l + 1), sc, v);
    }
    emit("sum", sc, summed);
  }
  return rows;
}

void write_attention_csv(std::ostream& os, const std::vector<AttentionRow>& rows) {
  const auto old = os.precision(17);
  os << "layer,size_class,scale,stride,attention_mass\n";
  for (const AttentionRow& r : rows) {
    os << r.layer << ',' << r.size_class << ',' << r.scale << ',' << r.stride << ',' << r.mass << '\n';
  }
  os.precision(old);
}

void make_cross_attention_uniform(Detector& det) {
  int touched = 0;
  for (ad::Parameter& p : det.params()) {
    const bool cross = p.name.find(".cross_attn.q.") != std::string::npos ||
                       p.name.find(".cross_attn.k.") != std::string::npos;
    if (!cross) continue;
    p.value.fill(0.0);
    ++touched;
  }
  if (touched == 0) throw ConfigError("model has no cross-attention layers");
}

std::vector<ad::ParamCheck> grad_check_model(Detector& det, const data::Sample& sample, double h, int coords,
                                             std::uint64_t seed) {
  FrozenTargets frozen;
  {
    ad::Tape tape;
    det.loss(tape, sample.image, sample.targets, frozen);
  }
  const ad::ModelObjective f = [&](bool with_grad) {
    ad::Tape tape;
    FrozenTargets fixed = frozen;
    const LossTerms t = det.loss(tape, sample.image, sample.targets, fixed);
    if (with_grad) {
      tape.backward(t.total);
      tape.accumulate_param_grads();
    }
    return t.total.value().item();
  };
  return ad::check_parameters(det.params(), f, h, coords, seed);
}

int report_grad_check(const std::vector<ad::ParamCheck>& checks, double tolerance, std::ostream& os) {
  double worst = 0.0;
  std::string worst_name = "-";
  const auto old = os.precision(3);
  for (const ad::ParamCheck& c : checks) {
    os << std::left << std::setw(48) << c.name << ' ' << std::scientific << c.max_rel_error << std::defaultfloat
       << "  (" << c.coords << " coords)" << (c.max_rel_error < tolerance ? "" : "  FAIL") << '\n';
    if (c.max_rel_error >= worst) {
      worst = c.max_rel_error;
      worst_name = c.name;
    }
  }
  os << "worst relative error " << std::scientific << worst << std::defaultfloat << " at " << worst_name
     << " over " << checks.size() << " parameters (tolerance " << tolerance << ")\n";
  os.precision(old);
  return worst < tolerance ? 0 : 2;
}

}  // namespace d2etr
