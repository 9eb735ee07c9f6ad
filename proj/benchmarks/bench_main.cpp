// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Micro benchmarks of the hot paths: GEMM, attention, one fusing layer,
// backbone forward and a detector training step.

#include <benchmark/benchmark.h>

#include <random>

#include "d2etr/attention.hpp"
#include "d2etr/complexity.hpp"
#include "d2etr/dataset.hpp"
#include "d2etr/detector.hpp"
#include "d2etr/ops.hpp"

using namespace d2etr;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : t.data()) v = n(rng);
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Tensor a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) {
    ad::Tape tape;
    benchmark::DoNotOptimize(ad::matmul(tape.constant(a), tape.constant(b)).value().ptr());
  }
  state.SetItemsProcessed(state.iterations() * 2 * static_cast<std::int64_t>(n) * n * n);
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128)->Arg(256);

void BM_Softmax(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Tensor x = random_tensor({n, n}, 3);
  for (auto _ : state) {
    ad::Tape tape;
    benchmark::DoNotOptimize(ad::softmax(tape.constant(x), 1).value().ptr());
  }
}
BENCHMARK(BM_Softmax)->Arg(64)->Arg(256);

void BM_FusingLayerForward(benchmark::State& state) {
  const int scales = static_cast<int>(state.range(0));
  complexity::FusionShape shape;
  for (auto _ : state) benchmark::DoNotOptimize(complexity::counted_ceca(scales, shape));
}
BENCHMARK(BM_FusingLayerForward)->DenseRange(1, 4);

void BM_DetectorForward(benchmark::State& state) {
  const Detector det(DetectorConfig::toy());
  const data::Sample s = data::generate(1, 0).samples[0];
  for (auto _ : state) {
    ad::Tape tape;
    benchmark::DoNotOptimize(det.forward(tape, s.image, false).decoder.layers.size());
  }
}
BENCHMARK(BM_DetectorForward)->Unit(benchmark::kMillisecond);

void BM_DetectorTrainStep(benchmark::State& state) {
  Detector det(DetectorConfig::toy());
  const data::Sample s = data::generate(1, 0).samples[0];
  for (auto _ : state) {
    det.params().zero_grad();
    benchmark::DoNotOptimize(det.accumulate(s.image, s.targets, 1.0).total);
  }
}
BENCHMARK(BM_DetectorTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
