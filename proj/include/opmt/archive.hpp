/* Copyright 2026 The OPMT Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef OPMT_ARCHIVE_HPP_
#define OPMT_ARCHIVE_HPP_

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "opmt/errors.hpp"
#include "opmt/tensor.hpp"

namespace opmt {

// Layout (all integers little-endian):
//   "OPMT" | u32 version | u32 count |
//   count x { u16 name_len | name | u8 dtype | u8 ndim | ndim x u64 | data } |
//   u32 CRC-32 of every preceding byte
inline constexpr char kArchiveMagic[4] = {'O', 'P', 'M', 'T'};
inline constexpr std::uint32_t kArchiveVersion = 1;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct ArchiveEntry {
  std::string name;
  AnyTensor tensor;
};

struct TensorArchive {
  std::vector<ArchiveEntry> entries;

  const ArchiveEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

inline DType any_dtype(const AnyTensor& t) {
  return std::holds_alternative<Tensor<float>>(t) ? DType::kFloat32 : DType::kFloat64;
}

inline const Shape& any_shape(const AnyTensor& t) {
  return std::visit([](const auto& x) -> const Shape& { return x.shape(); }, t);
}

namespace detail {

class ByteWriter {
 public:
  template <std::unsigned_integral U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i)
      bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}

  template <std::unsigned_integral U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("archive truncated while reading ") + what);
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> b) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes a uInt length; feed large buffers in pieces
  std::size_t off = 0;
  while (off < b.size()) {
    const std::size_t n = std::min<std::size_t>(b.size() - off, 1u << 30);
    crc = ::crc32(crc, b.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

template <Scalar T>
void put_scalars(ByteWriter& w, const Tensor<T>& t) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : t.data()) w.put(std::bit_cast<Bits>(v));
}

template <Scalar T>
Tensor<T> get_scalars(ByteReader& r, Shape shape) {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  Tensor<T> t(std::move(shape));
  if (r.remaining() / sizeof(T) < t.size()) throw FormatError("archive truncated in tensor data");
  for (T& v : t.data()) v = std::bit_cast<T>(r.get<Bits>("tensor data"));
  return t;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_archive(const TensorArchive& archive) {
  if (archive.entries.size() > UINT32_MAX) throw ArgumentError("too many archive entries");
  detail::ByteWriter w;
  w.put_bytes(kArchiveMagic, 4);
  w.put(kArchiveVersion);
  w.put(static_cast<std::uint32_t>(archive.entries.size()));
  std::set<std::string> seen;
  for (const auto& e : archive.entries) {
    if (e.name.empty() || e.name.size() > UINT16_MAX) {
      throw ArgumentError("archive entry name must have 1..65535 bytes");
    }
    if (!seen.insert(e.name).second) throw ArgumentError("duplicate archive entry '" + e.name + "'");
    const Shape& shape = any_shape(e.tensor);
    if (shape.size() > UINT8_MAX) throw ArgumentError("tensor rank above 255: " + e.name);
    w.put(static_cast<std::uint16_t>(e.name.size()));
    w.put_bytes(e.name.data(), e.name.size());
    w.put(static_cast<std::uint8_t>(any_dtype(e.tensor)));
    w.put(static_cast<std::uint8_t>(shape.size()));
    for (std::size_t d : shape) w.put(static_cast<std::uint64_t>(d));
    std::visit([&](const auto& t) { detail::put_scalars(w, t); }, e.tensor);
  }
  w.put(detail::crc32_of(w.bytes));
  return std::move(w.bytes);
}

inline TensorArchive decode_archive(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) throw FormatError("archive too short (" + std::to_string(bytes.size()) + " bytes)");
  if (std::memcmp(bytes.data(), kArchiveMagic, 4) != 0) throw FormatError("bad archive magic");
  const auto body = bytes.first(bytes.size() - 4);
  detail::ByteReader trailer(bytes.last(4));
  const std::uint32_t stored = trailer.get<std::uint32_t>("checksum");
  const std::uint32_t actual = detail::crc32_of(body);
  if (stored != actual) {
    throw FormatError("archive checksum mismatch (stored " + std::to_string(stored) +
                      ", computed " + std::to_string(actual) + ")");
  }
  detail::ByteReader r(body);
  r.take(4, "magic");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kArchiveVersion) {
    throw FormatError("unsupported archive version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("entry count");
  TensorArchive out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("name length");
    const auto name_bytes = r.take(len, "name");
    std::string name(name_bytes.begin(), name_bytes.end());
    if (!seen.insert(name).second) throw FormatError("duplicate archive entry '" + name + "'");
    const auto dtype = r.get<std::uint8_t>("dtype");
    const auto ndim = r.get<std::uint8_t>("ndim");
    Shape shape(ndim);
    std::size_t numel = 1;
    for (auto& d : shape) {
      const auto v = r.get<std::uint64_t>("dims");
      d = static_cast<std::size_t>(v);
      if (d != 0 && numel > SIZE_MAX / d) throw FormatError("tensor '" + name + "' too large");
      numel *= d;
    }
    const std::size_t width = dtype == 0 ? 4 : 8;
    if (dtype > 1) throw FormatError("unknown dtype code " + std::to_string(dtype) + " for '" + name + "'");
    if (numel > r.remaining() / width) {
      throw FormatError("tensor '" + name + "' declares " + std::to_string(numel) +
                        " scalars but the archive is shorter");
    }
    if (dtype == 0) out.entries.push_back({name, detail::get_scalars<float>(r, shape)});
    else out.entries.push_back({name, detail::get_scalars<double>(r, shape)});
  }
  if (r.remaining() != 0) {
    throw FormatError(std::to_string(r.remaining()) + " trailing bytes after the last entry");
  }
  return out;
}

inline void save_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  const auto bytes = encode_archive(archive);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing '" + path.string() + "'");
}

inline TensorArchive load_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open archive '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

}  // namespace opmt

#endif  // OPMT_ARCHIVE_HPP_
