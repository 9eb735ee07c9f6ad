// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "d2etr/checkpoint.hpp"

namespace d2etr::data {

namespace {

struct Shape2 {
  int label;
  Corners box;  // pixels
};

bool covers(const Shape2& s, double px, double py) {
  const Corners& b = s.box;
  if (px < b.x1 || px > b.x2 || py < b.y1 || py > b.y2) return false;
  if (s.label == 0) return true;
  const double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2), r = 0.5 * b.width();
  return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
}

}  // namespace

Dataset generate(int n, std::uint64_t seed, const GeneratorOptions& opt) {
  if (n < 1) throw ConfigError("gen-data: number of images must be >= 1");
  const int s = opt.image_size;
  if (s < 8 || opt.max_side > s || opt.min_side <= 0 || opt.min_side > opt.max_side) {
    throw ConfigError("gen-data: object sides must satisfy 0 < min_side <= max_side <= image_size");
  }
  if (opt.min_objects < 1 || opt.max_objects < opt.min_objects) {
    throw ConfigError("gen-data: need 1 <= min_objects <= max_objects");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, opt.noise);
  Dataset ds;
  ds.image_size = s;
  ds.samples.reserve(n);
  for (int i = 0; i < n; ++i) {
    const int count = opt.min_objects + static_cast<int>(rng() % (opt.max_objects - opt.min_objects + 1));
    std::vector<Shape2> shapes;
    for (int attempt = 0; attempt < 100 && static_cast<int>(shapes.size()) < count; ++attempt) {
      const int label = static_cast<int>(rng() % kNumClasses);
      const double w = opt.min_side + (opt.max_side - opt.min_side) * u01(rng);
      const double h = label == 1 ? w : opt.min_side + (opt.max_side - opt.min_side) * u01(rng);
      const double x1 = (s - w) * u01(rng), y1 = (s - h) * u01(rng);
      const Shape2 cand{label, {x1, y1, x1 + w, y1 + h}};
      const bool clear = std::all_of(shapes.begin(), shapes.end(),
                                     [&](const Shape2& o) { return iou(o.box, cand.box) <= opt.max_overlap; });
      if (clear) shapes.push_back(cand);
    }
    Sample smp;
    smp.image = Tensor({3, s, s});
    smp.targets.masks = Tensor({kNumClasses, s, s}, 0.0);
    double bg[3], fg[3][3];
    for (double& c : bg) c = 0.35 * u01(rng);
    for (auto& col : fg)
      for (double& c : col) c = 0.45 + 0.55 * u01(rng);
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        const double* color = bg;
        for (std::size_t k = 0; k < shapes.size(); ++k) {
          if (!covers(shapes[k], px, py)) continue;
          color = fg[k];
          smp.targets.masks.at(shapes[k].label, y, x) = 1.0;
        }
        for (int c = 0; c < 3; ++c) smp.image.at(c, y, x) = std::clamp(color[c] + noise(rng), 0.0, 1.0);
      }
    }
    for (const Shape2& sh : shapes) {
      const Corners& b = sh.box;
      smp.targets.boxes.push_back({0.5 * (b.x1 + b.x2) / s, 0.5 * (b.y1 + b.y2) / s, b.width() / s, b.height() / s});
      smp.targets.labels.push_back(sh.label);
    }
    ds.samples.push_back(std::move(smp));
  }
  return ds;
}

void save(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
  NamedTensors images, masks;
  std::ofstream ann(dir / "annotations.jsonl", std::ios::trunc);
  if (!ann) throw std::runtime_error("cannot write " + (dir / "annotations.jsonl").string());
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    images.emplace_back("image/" + std::to_string(i), s.image);
    masks.emplace_back("mask/" + std::to_string(i), s.targets.masks);
    nlohmann::json rec;
    rec["image_id"] = i;
    rec["boxes"] = nlohmann::json::array();
    for (const BBox& b : s.targets.boxes) rec["boxes"].push_back({b.cx, b.cy, b.w, b.h});
    rec["labels"] = s.targets.labels;
    ann << rec.dump() << '\n';
  }
  write_tensors(dir / "images.bin", images);
  write_tensors(dir / "masks.bin", masks);
}

Dataset load(const std::filesystem::path& dir) {
  const NamedTensors images = read_tensors(dir / "images.bin");
  const NamedTensors masks = read_tensors(dir / "masks.bin");
  std::ifstream ann(dir / "annotations.jsonl");
  if (!ann) throw std::runtime_error("cannot read " + (dir / "annotations.jsonl").string());
  if (images.empty()) throw ConfigError("dataset " + dir.string() + " is empty");
  if (masks.size() != images.size()) throw ConfigError("dataset " + dir.string() + ": image/mask count mismatch");
  Dataset ds;
  ds.image_size = images[0].second.dim(1);
  ds.num_classes = masks[0].second.dim(0);
  std::string line;
  std::size_t i = 0;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    if (i >= images.size()) throw ConfigError("dataset " + dir.string() + ": more annotations than images");
    const auto rec = nlohmann::json::parse(line);
    Sample s;
    s.image = images[i].second;
    s.targets.masks = masks[i].second;
    for (const auto& b : rec.at("boxes")) {
      s.targets.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                                 b.at(3).get<double>()});
    }
    s.targets.labels = rec.at("labels").get<std::vector<int>>();
    if (s.targets.labels.size() != s.targets.boxes.size()) {
      throw ConfigError("dataset " + dir.string() + ": boxes/labels mismatch at image " + std::to_string(i));
    }
    ds.samples.push_back(std::move(s));
    ++i;
  }
  if (ds.samples.size() != images.size()) throw ConfigError("dataset " + dir.string() + ": missing annotations");
  return ds;
}

Sample hflip(const Sample& s) {
  Sample out = s;
  auto flip = [](Tensor& t) {
    const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w / 2; ++x) std::swap(t.at(ch, y, x), t.at(ch, y, w - 1 - x));
  };
  flip(out.image);
  if (out.targets.masks.rank() == 3) flip(out.targets.masks);
  for (BBox& b : out.targets.boxes) b.cx = 1.0 - b.cx;
  return out;
}

SizeThresholds size_thresholds(int image_size, int reference_size) {
  const double f = static_cast<double>(image_size) / reference_size;
  return {32.0 * 32.0 * f * f, 96.0 * 96.0 * f * f};
}

SizeClass size_class(double area_px, const SizeThresholds& t) {
  if (area_px < t.small_max) return SizeClass::kSmall;
  if (area_px > t.large_min) return SizeClass::kLarge;
  return SizeClass::kMedium;
}

}  // namespace d2etr::data
