#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fscl/error.hpp"

namespace fscl::io {

// Little-endian primitive encoding, independent of host byte order.

template <typename U>
void put_le(std::ostream& out, U value) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  }
  out.write(bytes.data(), bytes.size());
}

inline void put_u32(std::ostream& out, std::uint32_t v) { put_le(out, v); }
inline void put_u64(std::ostream& out, std::uint64_t v) { put_le(out, v); }
inline void put_f32(std::ostream& out, float v) { put_le(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

inline void read_exact(std::istream& in, char* dst, std::size_t n, const std::string& what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    fail(ErrorCode::kTruncated, "truncated payload while reading " + what);
  }
}

template <typename U>
U get_le(std::istream& in, const std::string& what) {
  std::array<unsigned char, sizeof(U)> bytes{};
  read_exact(in, reinterpret_cast<char*>(bytes.data()), bytes.size(), what);
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    value |= static_cast<U>(bytes[i]) << (8 * i);
  }
  return value;
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
  return get_le<std::uint32_t>(in, what);
}
inline std::uint64_t get_u64(std::istream& in, const std::string& what) {
  return get_le<std::uint64_t>(in, what);
}
inline double get_f64(std::istream& in, const std::string& what) {
  return std::bit_cast<double>(get_le<std::uint64_t>(in, what));
}

/// Decodes `count` little-endian float32 values from a contiguous read.
inline void get_f32_array(std::istream& in, float* dst, std::size_t count, const std::string& what) {
  std::vector<unsigned char> raw(count * 4);
  read_exact(in, reinterpret_cast<char*>(raw.data()), raw.size(), what);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, raw.data(), raw.size());
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(raw[4 * i + b]) << (8 * b);
      dst[i] = std::bit_cast<float>(bits);
    }
  }
}

inline void put_f32_array(std::ostream& out, const float* src, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(src), static_cast<std::streamsize>(count * 4));
  } else {
    for (std::size_t i = 0; i < count; ++i) put_f32(out, src[i]);
  }
}

inline void expect_magic(std::istream& in, const char (&magic)[5]) {
  std::array<char, 4> got{};
  in.read(got.data(), 4);
  if (in.gcount() != 4 || std::memcmp(got.data(), magic, 4) != 0) {
    fail(ErrorCode::kBadMagic, std::string("expected magic \"") + magic + "\"");
  }
}

inline void expect_end(std::istream& in, const std::string& what) {
  if (in.peek() != std::char_traits<char>::eof()) {
    fail(ErrorCode::kInvalidValue, "trailing bytes after " + what);
  }
}

inline std::ofstream open_for_write(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot open for writing: " + path);
  return out;
}

inline std::ifstream open_for_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open for reading: " + path);
  return in;
}

// ---------------------------------------------------------------------------
// "FSCM" container: named, shape-tagged float64 tensors in declaration order.
//
//   magic "FSCM" | version u32 | tensor_count u32 |
//   per tensor: name_len u32 | name bytes | rows u32 | cols u32 |
//               rows*cols f64 little-endian, row-major
// ---------------------------------------------------------------------------

inline constexpr char kContainerMagic[5] = "FSCM";
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Eigen::MatrixXd value;
};

inline void write_container(const std::string& path, const std::vector<NamedTensor>& tensors) {
  auto out = open_for_write(path);
  out.write(kContainerMagic, 4);
  put_u32(out, kContainerVersion);
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.value.rows()));
    put_u32(out, static_cast<std::uint32_t>(t.value.cols()));
    for (Eigen::Index r = 0; r < t.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < t.value.cols(); ++c) put_f64(out, t.value(r, c));
    }
  }
  if (!out) fail(ErrorCode::kIo, "write failed: " + path);
}

inline std::vector<NamedTensor> read_container(const std::string& path) {
  auto in = open_for_read(path);
  expect_magic(in, kContainerMagic);
  const auto version = get_u32(in, "container version");
  if (version != kContainerVersion) {
    fail(ErrorCode::kUnsupportedVersion, "unsupported container version " + std::to_string(version));
  }
  const auto count = get_u32(in, "tensor count");
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto name_len = get_u32(in, "tensor name length");
    t.name.resize(name_len);
    read_exact(in, t.name.data(), name_len, "tensor name");
    const auto rows = get_u32(in, t.name + " rows");
    const auto cols = get_u32(in, t.name + " cols");
    t.value.resize(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r) {
      for (std::uint32_t c = 0; c < cols; ++c) t.value(r, c) = get_f64(in, t.name);
    }
    tensors.push_back(std::move(t));
  }
  expect_end(in, "container");
  return tensors;
}

}  // namespace fscl::io
