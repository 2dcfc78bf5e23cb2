// Copyright 2026 the invvc authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "invvc/error.hpp"
#include "invvc/tensor.hpp"

// The on-disk tensor-table container shared by checkpoints, feature files,
// aligned pairs, and imported embeddings:
//
//   magic "IVVC" | u32-LE version=1 | u32-LE config length | UTF-8 JSON
//   config | u32-LE tensor count | per tensor: u16-LE name length, name,
//   u8 rank, rank x u32-LE dims, float32-LE row-major data.
namespace invvc::container {

inline constexpr char kMagic[4] = {'I', 'V', 'V', 'C'};
inline constexpr std::uint32_t kVersion = 1;

struct TensorEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct TensorTable {
  std::vector<TensorEntry> entries;

  const TensorEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  void add(std::string name, const Tensor<float>& t) {
    entries.push_back({std::move(name), t.shape(),
                       std::vector<float>(t.data(), t.data() + t.numel())});
  }

  Tensor<float> tensor(const std::string& name,
                       const std::string& context) const {
    const TensorEntry* e = find(name);
    if (!e)
      throw FormatError("tensor \"" + name + "\" missing from " + context);
    return Tensor<float>(e->shape, e->data);
  }
};

struct Container {
  std::string config_json;
  TensorTable tensors;
};

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class Reader {
public:
  Reader(const std::string& bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }

  const unsigned char* take(std::size_t n) {
    if (remaining() < n)
      throw FormatError("truncated file: " + context_);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data()) + pos_;
    pos_ += n;
    return p;
  }

  std::uint16_t u16() {
    const auto* p = take(2);
    return std::uint16_t(p[0]) | std::uint16_t(p[1]) << 8;
  }
  std::uint32_t u32() {
    const auto* p = take(4);
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 |
           std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
  }
  std::uint8_t u8() { return *take(1); }
  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str(std::size_t n) {
    const auto* p = take(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }

private:
  const std::string& bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

} // namespace detail

inline std::string serialize(const Container& c) {
  std::string out;
  out.append(kMagic, 4);
  detail::put_u32(out, kVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(c.config_json.size()));
  out += c.config_json;
  detail::put_u32(out, static_cast<std::uint32_t>(c.tensors.entries.size()));
  for (const auto& e : c.tensors.entries) {
    if (e.name.size() > 0xffff)
      throw FormatError("tensor name too long: " + e.name);
    if (e.shape.empty() || e.shape.size() > 8)
      throw FormatError("tensor rank out of range for \"" + e.name + "\"");
    detail::put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    out.push_back(char(e.shape.size()));
    std::size_t numel = 1;
    for (std::size_t d : e.shape) {
      detail::put_u32(out, static_cast<std::uint32_t>(d));
      numel *= d;
    }
    if (numel != e.data.size())
      throw FormatError("tensor data/shape mismatch for \"" + e.name + "\"");
    for (float v : e.data) detail::put_f32(out, v);
  }
  return out;
}

inline Container deserialize(const std::string& bytes,
                             const std::string& context) {
  detail::Reader r(bytes, context);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("bad magic in " + context);
  r.take(4);
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw FormatError("unsupported container version " +
                      std::to_string(version) + " in " + context);
  const std::uint32_t json_len = r.u32();
  Container c;
  c.config_json = r.str(json_len);
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorEntry e;
    e.name = r.str(r.u16());
    const std::uint8_t rank = r.u8();
    if (rank == 0 || rank > 8)
      throw FormatError("integrity error in " + context + ": tensor \"" +
                        e.name + "\" has rank " + std::to_string(rank));
    std::size_t numel = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = r.u32();
      if (dim == 0)
        throw FormatError("integrity error in " + context +
                          ": zero dimension in tensor \"" + e.name + "\"");
      e.shape.push_back(dim);
      if (numel > (std::size_t(1) << 40) / dim)
        throw FormatError("integrity error in " + context +
                          ": tensor \"" + e.name + "\" is implausibly large");
      numel *= dim;
    }
    if (numel * 4 > r.remaining())
      throw FormatError("truncated file: " + context);
    e.data.resize(numel);
    for (std::size_t k = 0; k < numel; ++k) e.data[k] = r.f32();
    c.tensors.entries.push_back(std::move(e));
  }
  if (r.remaining() != 0)
    throw FormatError("integrity error in " + context + ": " +
                      std::to_string(r.remaining()) +
                      " trailing bytes after the declared tensor table");
  return c;
}

inline void write_file(const std::filesystem::path& path, const Container& c) {
  const std::string bytes = serialize(c);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

inline Container read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  return deserialize(bytes, path.string());
}

} // namespace invvc::container
