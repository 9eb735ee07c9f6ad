// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Training loop, attention-by-scale reporting and the model gradient check.

#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "d2etr/config.hpp"
#include "d2etr/evaluation.hpp"
#include "d2etr/grad_check.hpp"

namespace d2etr {

struct EpochLog {
  int epoch = 0;  ///< 1-based
  double l_cls = 0, l_bbox = 0, l_awr = 0, l_token = 0, l_total = 0;
  double lr = 0;
  int skipped_steps = 0;
  double val_ap50 = -1;  ///< -1 when not evaluated
};

void write_log_header(std::ostream& os);
void write_log_row(std::ostream& os, const EpochLog& row);

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  ///< log.csv, final.ckpt, best.ckpt
  const data::Dataset* val = nullptr;
  int eval_top_k = 100;
  std::function<void(const EpochLog&)> on_epoch;
};

/// Learning rate of a 1-based epoch under the step schedule.
double scheduled_lr(const TrainConfig& cfg, int epoch);

/// Trains in place. Fully determined by `seed` and the data.
std::vector<EpochLog> train(Detector& det, const data::Dataset& train_set, const TrainConfig& cfg,
                            std::uint64_t seed, const TrainOptions& opt = {});

/// Mean of `values[first-1 .. last-1]`, clipped to the available range.
double window_mean(const std::vector<double>& values, int first, int last);

struct AttentionRow {
  std::string layer;  ///< "1".."L" or "sum" (mean over layers)
  std::string size_class;
  int scale = 0;
  int stride = 0;
  double mass = 0;
};

/// Average cross-attention mass per memory scale for queries matched to
/// objects of each size class, over the first `n` images. Requires
/// multi-scale memory (ConfigError otherwise).
std::vector<AttentionRow> attention_scale_report(const Detector& det, const data::Dataset& ds, int n);
void write_attention_csv(std::ostream& os, const std::vector<AttentionRow>& rows);

/// Zeroes the query and key projections of every cross-attention layer so
/// that attention logits are constant.
void make_cross_attention_uniform(Detector& det);

/// Finite-difference check of L_total with respect to every parameter.
/// Matching and awareness targets are frozen at the starting point.
std::vector<ad::ParamCheck> grad_check_model(Detector& det, const data::Sample& sample, double h, int coords,
                                             std::uint64_t seed);

/// Prints worst error per parameter; returns 0 when all are below
/// `tolerance`, else 2.
int report_grad_check(const std::vector<ad::ParamCheck>& checks, double tolerance, std::ostream& os);

}  // namespace d2etr
