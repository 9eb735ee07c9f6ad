// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

// Binary tensor archives. Layout: magic "D2ETR1", then until end of file one
// record per tensor: u32 name length, name bytes, u32 rank, u32 dims[rank],
// fp64 payload. All integers and doubles little-endian.

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "d2etr/tape.hpp"

namespace d2etr {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void write_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_tensors(const std::filesystem::path& path);

/// Writes every parameter of `store` in store order.
void save_checkpoint(const ad::ParameterStore& store, const std::filesystem::path& path);

/// Loads values by name; every parameter must be present with its shape.
void load_checkpoint(ad::ParameterStore& store, const std::filesystem::path& path);

}  // namespace d2etr
