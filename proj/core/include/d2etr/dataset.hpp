// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic shapes detection data: 1 to 3 rectangles or disks per image,
// with per-class pixel masks. On disk a dataset is a directory holding
// images.bin and masks.bin (tensor archives, records "image/<i>" [3,S,S] and
// "mask/<i>" [K,S,S]) and annotations.jsonl (one record per image:
// {"image_id", "boxes": [[cx,cy,w,h], ...] normalized, "labels": [...]}).

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "d2etr/losses.hpp"

namespace d2etr::data {

inline constexpr int kNumClasses = 2;
inline const char* const kClassNames[kNumClasses] = {"rectangle", "disk"};

struct Sample {
  Tensor image;  ///< [3, S, S] in [0, 1]
  ImageTargets targets;
};

struct Dataset {
  int image_size = 0;
  int num_classes = kNumClasses;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
};

struct GeneratorOptions {
  int image_size = 64;
  int min_objects = 1;
  int max_objects = 3;
  double min_side = 6.0;   ///< pixels
  double max_side = 28.0;  ///< pixels
  double max_overlap = 0.3;
  double noise = 0.03;
};

/// Deterministic for a fixed seed. Throws ConfigError when n < 1.
Dataset generate(int n, std::uint64_t seed, const GeneratorOptions& opt = {});

void save(const Dataset& ds, const std::filesystem::path& dir);
Dataset load(const std::filesystem::path& dir);

/// Mirror image, masks and boxes along the horizontal axis.
Sample hflip(const Sample& s);

enum class SizeClass { kSmall = 0, kMedium = 1, kLarge = 2 };
inline const char* const kSizeNames[3] = {"small", "medium", "large"};

struct SizeThresholds {
  double small_max;  ///< area below is small
  double large_min;  ///< area above is large
};

/// COCO area thresholds 32^2 and 96^2 rescaled by (image_size / reference)^2.
SizeThresholds size_thresholds(int image_size, int reference_size = 256);
SizeClass size_class(double area_px, const SizeThresholds& t);

}  // namespace d2etr::data
