// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Exact operation counting for forward passes.
//
// Counting convention (fixed so internal comparisons are exact):
//   * one multiply-accumulate is 2 FLOPs (matmul, convolution, pooling-free GEMMs)
//   * softmax, layer norm and GELU cost 5 FLOPs per output element
//   * other elementwise arithmetic costs 1 FLOP per output element
//   * adaptive average pooling costs 1 FLOP per input element, recorded under
//     its own "pool" label
// Only forward computation is counted. Counting is active on a thread while a
// FlopCounter::Activation is alive; labels nest through FlopLabel scopes and
// are joined with '/'.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace d2etr::flops {

class FlopCounter {
 public:
  /// Installs a counter as the thread's active sink for its lifetime.
  class Activation {
   public:
    explicit Activation(FlopCounter& counter);
    ~Activation();
    Activation(const Activation&) = delete;
    Activation& operator=(const Activation&) = delete;

   private:
    FlopCounter* previous_;
    std::vector<std::string> saved_labels_;
  };

  void add(const std::string& label, std::uint64_t flops);
  void merge(const FlopCounter& other);

  std::uint64_t total() const;
  /// Sum over labels equal to `prefix` or nested below it ("a/b" is below "a").
  std::uint64_t total(std::string_view prefix) const;
  /// Sum over labels containing `segment` as one of their path components.
  std::uint64_t total_with_segment(std::string_view segment) const;

  const std::map<std::string, std::uint64_t>& by_label() const { return counts_; }

 private:
  std::map<std::string, std::uint64_t> counts_;
};

/// Pushes a label segment for the current thread while alive.
class FlopLabel {
 public:
  explicit FlopLabel(std::string segment);
  ~FlopLabel();
  FlopLabel(const FlopLabel&) = delete;
  FlopLabel& operator=(const FlopLabel&) = delete;
};

bool counting_active();
/// Called by primitives; no-op when no counter is active.
void record(std::uint64_t flops);
std::string current_label();

constexpr std::uint64_t kFlopsPerMac = 2;
constexpr std::uint64_t kFlopsPerTranscendental = 5;

inline std::uint64_t matmul_flops(std::uint64_t m, std::uint64_t k, std::uint64_t n) {
  return kFlopsPerMac * m * k * n;
}

}  // namespace d2etr::flops
