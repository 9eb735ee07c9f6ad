// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Differentiable primitives. Every function records one node on the tape of
// its inputs and counts its forward cost with the active FlopCounter.
//
// Layout conventions: token sequences are [L, C]; feature maps are [C, H, W];
// linear weights are stored [in, out] so that y = x W + b.

#pragma once

#include <vector>

#include "d2etr/tape.hpp"

namespace d2etr::ad {

// Linear algebra.
Var matmul(Var a, Var b);     ///< [m,k] x [k,n] -> [m,n]
Var matmul_nt(Var a, Var b);  ///< [m,k] x [n,k]^T -> [m,n]
/// x[L,in] W[in,out] + b[out]; pass an invalid Var to skip the bias.
Var linear(Var x, Var weight, Var bias);

// Elementwise, identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var minimum(Var a, Var b);
Var maximum(Var a, Var b);
/// x[L,C] + row[C] broadcast over rows.
Var add_row(Var x, Var row);

Var scale(Var x, double s);
Var add_scalar(Var x, double s);
Var exp(Var x);
Var log(Var x);
Var sigmoid(Var x);
Var abs(Var x);
Var square(Var x);
Var clamp(Var x, double lo, double hi);

// Reductions.
Var sum(Var x);   ///< -> [1]
Var mean(Var x);  ///< -> [1]

// Normalization and activations.
/// Max-subtracted softmax along `axis` (negative counts from the back).
Var softmax(Var x, int axis);
/// Normalizes over the last axis; gamma and beta have that axis' size.
Var layer_norm(Var x, Var gamma, Var beta, double eps);
/// x * Phi(x) with the exact Gaussian CDF.
Var gelu(Var x);

// Shape manipulation.
Var reshape(Var x, Shape shape);
Var transpose(Var x);  ///< 2-D only
Var slice_cols(Var x, int begin, int end);
Var slice_rows(Var x, int begin, int end);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(Var x, const std::vector<int>& rows);
Var map_to_tokens(Var x);                 ///< [C,H,W] -> [H*W,C]
Var tokens_to_map(Var x, int h, int w);  ///< [H*W,C] -> [C,H,W]

// Spatial operators on [C,H,W].
/// Bin i spans [floor(i*H/P), ceil((i+1)*H/P)); output cells are bin means.
Var adaptive_avg_pool2d(Var x, int out_h, int out_w);
/// Half-pixel (align_corners=false) bilinear resize.
Var interpolate_bilinear(Var x, int out_h, int out_w);
/// Per-channel 3x3 correlation, zero padding 1, stride 1; kernel [C,3,3].
Var depthwise_conv3x3(Var x, Var kernel);
/// Dense 2-D correlation; weight [Cout,Cin,k,k], bias [Cout] or invalid.
Var conv2d(Var x, Var weight, Var bias, int stride, int padding);

// Fused losses over logits, summed over all elements. Targets are constants.
/// -alpha * |t - p|^gamma * (t log p + (1 - t) log(1 - p)), p = clamp(sigmoid(z)).
Var sigmoid_focal_loss(Var logits, const Tensor& targets, double gamma, double alpha,
                       double eps = 1e-8);
/// Binary cross-entropy with soft targets, computed stably from logits.
Var bce_with_logits(Var logits, const Tensor& targets);

// Non-differentiable helpers shared with the tape ops.
double gelu_value(double x);
double sigmoid_value(double z);
struct PoolBin {
  int begin;
  int end;
};
/// Plain-tensor version of interpolate_bilinear on [C,H,W].
Tensor resize_bilinear(const Tensor& x, int out_h, int out_w);

/// Adaptive pooling bin for output index i of `out` over an input extent `in`.
PoolBin adaptive_bin(int i, int in, int out);

}  // namespace d2etr::ad
