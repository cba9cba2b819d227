#pragma once

// SCLR weight container. Layout, all integers little-endian:
//   "SCLR" | version u32 | tensor count u32 | tensors... | checksum u64
// per tensor:
//   name length u32 | name bytes | dtype u8 (0=f32, 1=f64) | rank u8 |
//   dims u64 x rank | raw values (little-endian IEEE)
// The trailing checksum is FNV-1a over every preceding byte; any single-byte
// change is guaranteed to be detected. Duplicate names are rejected on both
// save and load.

#include <cstdint>
#include <string>
#include <vector>

#include "sclr/tensor.hpp"

namespace sclr {

constexpr std::uint32_t kSclrVersion = 1;

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

struct NamedTensor {
  std::string name;
  Dtype dtype = Dtype::F32;
  std::vector<std::uint64_t> dims;
  std::vector<float> f32;
  std::vector<double> f64;

  std::uint64_t numel() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

struct SclrContainer {
  std::vector<NamedTensor> tensors;

  const NamedTensor& find(const std::string& name) const;
  bool contains(const std::string& name) const;
};

std::vector<unsigned char> serialize_container(const SclrContainer& c);
SclrContainer parse_container(const unsigned char* data, std::size_t size);

void save_container(const std::string& path, const SclrContainer& c);
SclrContainer load_container(const std::string& path);

// ---------------------------------------------------------------------------
// Tensor bridging. Loading a tensor whose stored precision differs from the
// run precision is an explicit error; nothing is silently cast.
// ---------------------------------------------------------------------------

template <typename S>
NamedTensor to_named(const std::string& name, const Tensor<S>& t) {
  NamedTensor n;
  n.name = name;
  for (long d : t.shape()) n.dims.push_back(std::uint64_t(d));
  if constexpr (std::is_same_v<S, float>) {
    n.dtype = Dtype::F32;
    n.f32 = t.values();
  } else {
    n.dtype = Dtype::F64;
    n.f64 = t.values();
  }
  return n;
}

template <typename S>
Tensor<S> from_named(const NamedTensor& n, bool requires_grad = false) {
  constexpr Dtype expect = std::is_same_v<S, float> ? Dtype::F32 : Dtype::F64;
  require(n.dtype == expect,
          "tensor '" + n.name + "' stored with a different precision than this run");
  Shape shape;
  for (auto d : n.dims) shape.push_back(long(d));
  if constexpr (std::is_same_v<S, float>)
    return Tensor<S>::from(shape, n.f32, requires_grad);
  else
    return Tensor<S>::from(shape, n.f64, requires_grad);
}

}  // namespace sclr
