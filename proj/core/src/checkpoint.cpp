// Copyright 2026 The d2etr Authors
// SPDX-License-Identifier: Apache-2.0

#include "d2etr/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace d2etr {

namespace {

static_assert(std::endian::native == std::endian::little, "archives are written in host order");

constexpr char kMagic[] = {'D', '2', 'E', 'T', 'R', '1'};

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

bool get_u32(std::istream& is, std::uint32_t& v) {
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return static_cast<bool>(is);
}

std::runtime_error corrupt(const std::filesystem::path& path, const std::string& what) {
  return std::runtime_error("corrupt archive " + path.string() + ": " + what);
}

}  // namespace

void write_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(kMagic, sizeof kMagic);
  for (const auto& [name, t] : tensors) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

NamedTensors read_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  char magic[sizeof kMagic];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw corrupt(path, "bad magic");
  }
  NamedTensors out;
  std::uint32_t len = 0;
  while (get_u32(is, len)) {
    if (len > (1u << 16)) throw corrupt(path, "implausible name length");
    std::string name(len, '\0');
    std::uint32_t rank = 0;
    if (!is.read(name.data(), len) || !get_u32(is, rank) || rank > 8) throw corrupt(path, "truncated header");
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint32_t v = 0;
      if (!get_u32(is, v) || v == 0 || v > (1u << 28)) throw corrupt(path, "bad dimension in '" + name + "'");
      d = static_cast<int>(v);
    }
    Tensor t(shape, 0.0);
    if (!is.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * sizeof(double)))) {
      throw corrupt(path, "truncated payload of '" + name + "'");
    }
    out.emplace_back(std::move(name), std::move(t));
  }
  if (!is.eof()) throw corrupt(path, "read error");
  return out;
}

void save_checkpoint(const ad::ParameterStore& store, const std::filesystem::path& path) {
  NamedTensors all;
  all.reserve(store.size());
  for (const ad::Parameter& p : store) all.emplace_back(p.name, p.value);
  write_tensors(path, all);
}

void load_checkpoint(ad::ParameterStore& store, const std::filesystem::path& path) {
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : read_tensors(path)) by_name.emplace(std::move(name), std::move(t));
  for (ad::Parameter& p : store) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw ConfigError("checkpoint " + path.string() + " lacks parameter '" + p.name + "'");
    if (it->second.shape() != p.value.shape()) {
      throw ConfigError("checkpoint parameter '" + p.name + "' has shape " + to_string(it->second.shape()) +
                        ", model expects " + to_string(p.value.shape()));
    }
    p.value = std::move(it->second);
  }
}

}  // namespace d2etr
