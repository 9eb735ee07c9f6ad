// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/flops.hpp"

namespace d2etr::flops {
namespace {

thread_local FlopCounter* t_counter = nullptr;
thread_local std::vector<std::string> t_labels;

bool is_below(std::string_view label, std::string_view prefix) {
  if (prefix.empty()) return true;
  if (label.size() < prefix.size() || label.substr(0, prefix.size()) != prefix) return false;
  return label.size() == prefix.size() || label[prefix.size()] == '/';
}

}  // namespace

FlopCounter::Activation::Activation(FlopCounter& counter)
    : previous_(t_counter), saved_labels_(std::move(t_labels)) {
  t_counter = &counter;
  t_labels.clear();
}

FlopCounter::Activation::~Activation() {
  t_counter = previous_;
  t_labels = std::move(saved_labels_);
}

void FlopCounter::add(const std::string& label, std::uint64_t flops) { counts_[label] += flops; }

void FlopCounter::merge(const FlopCounter& other) {
  for (const auto& [label, n] : other.counts_) counts_[label] += n;
}

std::uint64_t FlopCounter::total() const {
  std::uint64_t sum = 0;
  for (const auto& [label, n] : counts_) sum += n;
  return sum;
}

std::uint64_t FlopCounter::total(std::string_view prefix) const {
  std::uint64_t sum = 0;
  for (const auto& [label, n] : counts_) {
    if (is_below(label, prefix)) sum += n;
  }
  return sum;
}

std::uint64_t FlopCounter::total_with_segment(std::string_view segment) const {
  std::uint64_t sum = 0;
  for (const auto& [label, n] : counts_) {
    std::string_view rest = label;
    while (true) {
      const auto cut = rest.find('/');
      if (rest.substr(0, cut) == segment) {
        sum += n;
        break;
      }
      if (cut == std::string_view::npos) break;
      rest.remove_prefix(cut + 1);
    }
  }
  return sum;
}

FlopLabel::FlopLabel(std::string segment) { t_labels.push_back(std::move(segment)); }
FlopLabel::~FlopLabel() { t_labels.pop_back(); }

bool counting_active() { return t_counter != nullptr; }

std::string current_label() {
  std::string out;
  for (const auto& s : t_labels) {
    if (!out.empty()) out += '/';
    out += s;
  }
  return out;
}

void record(std::uint64_t flops) {
  if (t_counter == nullptr || flops == 0) return;
  t_counter->add(current_label(), flops);
}

}  // namespace d2etr::flops
