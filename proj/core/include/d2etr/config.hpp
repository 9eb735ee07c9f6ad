// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration: "key = value" lines, '#' starts a comment. Every key
// and its default is listed in configs/toy.cfg.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "d2etr/dataset.hpp"
#include "d2etr/detector.hpp"
#include "d2etr/optim.hpp"

namespace d2etr {

struct TrainConfig {
  int epochs = 60;
  int batch_size = 8;
  optim::AdamWConfig adamw;
  double lr_drop_fraction = 0.8;  ///< lr *= lr_drop_factor from this share of epochs on
  double lr_drop_factor = 0.1;
  double clip_max_norm = 0.1;
  bool hflip = true;
  int train_images = 0;  ///< 0 = all
  int eval_every = 1;    ///< validation AP for best-checkpoint selection; 0 disables
  void validate() const;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string data_dir = "data";
  int data_train = 500;
  int data_val = 100;
  data::GeneratorOptions generator;
  DetectorConfig model = DetectorConfig::toy();
  TrainConfig train;
  int eval_top_k = 100;
  int eval_images = 0;  ///< 0 = all
  int attn_images = 100;
  double gradcheck_h = 1e-6;
  int gradcheck_coords = 3;
  double gradcheck_tolerance = 1e-4;

  void validate() const;
};

using KeyValues = std::map<std::string, std::string>;

/// Parses "key = value" text. Throws ConfigError on malformed lines or duplicate keys.
KeyValues parse_key_values(const std::string& text);

/// Applies recognised keys over the defaults; unknown keys are an error.
RunConfig make_config(const KeyValues& kv);
RunConfig load_config(const std::filesystem::path& path);

/// Canonical "key = value" rendering of every key.
std::string render_config(const RunConfig& cfg);

}  // namespace d2etr
