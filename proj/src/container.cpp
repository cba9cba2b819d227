#include "sclr/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "sclr/rng.hpp"

namespace sclr {

namespace {

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back((unsigned char)(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back((unsigned char)(v >> (8 * i)));
}

struct Reader {
  const unsigned char* p;
  std::size_t size;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    require(pos + n <= size, "SCLR container truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return p[pos++];
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

const NamedTensor& SclrContainer::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  fail("tensor '" + name + "' not found in container");
}

bool SclrContainer::contains(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::vector<unsigned char> serialize_container(const SclrContainer& c) {
  std::set<std::string> seen;
  for (const auto& t : c.tensors)
    require(seen.insert(t.name).second,
            "duplicate tensor name '" + t.name + "'");

  std::vector<unsigned char> out;
  out.insert(out.end(), {'S', 'C', 'L', 'R'});
  put_u32(out, kSclrVersion);
  put_u32(out, std::uint32_t(c.tensors.size()));
  for (const auto& t : c.tensors) {
    put_u32(out, std::uint32_t(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    out.push_back((unsigned char)t.dtype);
    out.push_back((unsigned char)t.dims.size());
    for (auto d : t.dims) put_u64(out, d);
    if (t.dtype == Dtype::F32) {
      require(t.f32.size() == t.numel(), "tensor data does not match dims");
      for (float v : t.f32) put_u32(out, std::bit_cast<std::uint32_t>(v));
    } else {
      require(t.f64.size() == t.numel(), "tensor data does not match dims");
      for (double v : t.f64) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  put_u64(out, fnv1a64(out.data(), out.size()));
  return out;
}

SclrContainer parse_container(const unsigned char* data, std::size_t size) {
  require(size >= 12 + 8, "SCLR container truncated");
  const std::uint64_t computed = fnv1a64(data, size - 8);
  Reader tail{data, size, size - 8};
  require(tail.u64() == computed, "SCLR checksum mismatch");

  Reader r{data, size - 8};
  require(r.bytes(4) == "SCLR", "bad SCLR magic");
  const std::uint32_t version = r.u32();
  require(version == kSclrVersion,
          "unknown SCLR version " + std::to_string(version));
  const std::uint32_t count = r.u32();

  SclrContainer c;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint32_t name_len = r.u32();
    t.name = r.bytes(name_len);
    require(seen.insert(t.name).second,
            "duplicate tensor name '" + t.name + "'");
    const std::uint8_t dtype = r.u8();
    require(dtype <= 1, "bad dtype code");
    t.dtype = Dtype(dtype);
    const std::uint8_t rank = r.u8();
    for (std::uint8_t k = 0; k < rank; ++k) t.dims.push_back(r.u64());
    const std::uint64_t n = t.numel();
    require(n <= (std::uint64_t(1) << 40), "tensor too large");
    if (t.dtype == Dtype::F32) {
      t.f32.resize(std::size_t(n));
      for (auto& v : t.f32) v = std::bit_cast<float>(r.u32());
    } else {
      t.f64.resize(std::size_t(n));
      for (auto& v : t.f64) v = std::bit_cast<double>(r.u64());
    }
    c.tensors.push_back(std::move(t));
  }
  require(r.pos == size - 8, "trailing bytes in SCLR container");
  return c;
}

void save_container(const std::string& path, const SclrContainer& c) {
  const std::vector<unsigned char> bytes = serialize_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(bool(out), "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            std::streamsize(bytes.size()));
  require(bool(out), "failed writing '" + path + "'");
}

SclrContainer load_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), "cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return parse_container(bytes.data(), bytes.size());
}

}  // namespace sclr
