#pragma once

// PQT1 tensor container.
//
//   "PQT1" | u8 dtype (0 = f64, 1 = i64) | u8 rank | rank x u64 extent | payload
//
// All multi-byte fields are little-endian regardless of host byte order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <iterator>
#include <ostream>
#include <string>
#include <variant>
#include <vector>

#include "po2q/error.hpp"
#include "po2q/tensor.hpp"

namespace po2q {

enum class DType : std::uint8_t { f64 = 0, i64 = 1 };

using AnyTensor = std::variant<RealTensor, CodeTensor>;

namespace detail {

inline constexpr std::array<char, 4> kMagic{'P', 'Q', 'T', '1'};

inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

template <typename T>
std::vector<unsigned char> encode(const Tensor<T>& t, DType dtype) {
  std::vector<unsigned char> out(kMagic.begin(), kMagic.end());
  out.push_back(static_cast<unsigned char>(dtype));
  if (t.rank() > 255) throw FormatError("tensor rank exceeds 255");
  out.push_back(static_cast<unsigned char>(t.rank()));
  for (std::size_t e : t.shape()) put_u64(out, e);
  out.reserve(out.size() + 8 * t.size());
  for (T x : t) put_u64(out, std::bit_cast<std::uint64_t>(x));
  return out;
}

}  // namespace detail

inline std::vector<unsigned char> encode_tensor(const RealTensor& t) {
  return detail::encode(t, DType::f64);
}

inline std::vector<unsigned char> encode_tensor(const CodeTensor& t) {
  return detail::encode(t, DType::i64);
}

inline AnyTensor decode_tensor(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 6 || std::memcmp(bytes.data(), detail::kMagic.data(), 4) != 0) {
    throw FormatError("not a PQT1 tensor (bad magic)");
  }
  const auto dtype = bytes[4];
  const std::size_t rank = bytes[5];
  std::size_t pos = 6;
  if (bytes.size() < pos + 8 * rank) throw FormatError("truncated PQT1 header");
  Shape shape(rank);
  for (std::size_t d = 0; d < rank; ++d, pos += 8) {
    shape[d] = static_cast<std::size_t>(detail::get_u64(bytes.data() + pos));
    if (shape[d] == 0) throw FormatError("PQT1 extent must be positive");
  }
  const std::size_t n = shape_size(shape);
  if (bytes.size() != pos + 8 * n) {
    throw FormatError("PQT1 payload has " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                      std::to_string(8 * n));
  }
  if (dtype == static_cast<unsigned char>(DType::f64)) {
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i, pos += 8) {
      data[i] = std::bit_cast<double>(detail::get_u64(bytes.data() + pos));
    }
    return RealTensor(shape, std::move(data));
  }
  if (dtype == static_cast<unsigned char>(DType::i64)) {
    std::vector<std::int64_t> data(n);
    for (std::size_t i = 0; i < n; ++i, pos += 8) {
      data[i] = std::bit_cast<std::int64_t>(detail::get_u64(bytes.data() + pos));
    }
    return CodeTensor(shape, std::move(data));
  }
  throw FormatError("unknown PQT1 dtype tag " + std::to_string(dtype));
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline AnyTensor read_tensor(const std::filesystem::path& path) {
  return decode_tensor(read_file_bytes(path));
}

/// Read a tensor that must hold reals; integer payloads are converted.
inline RealTensor read_real_tensor(const std::filesystem::path& path) {
  AnyTensor t = read_tensor(path);
  if (auto* r = std::get_if<RealTensor>(&t)) return std::move(*r);
  const auto& c = std::get<CodeTensor>(t);
  std::vector<double> data(c.begin(), c.end());
  return RealTensor(c.shape(), std::move(data));
}

inline CodeTensor read_code_tensor(const std::filesystem::path& path) {
  AnyTensor t = read_tensor(path);
  if (auto* c = std::get_if<CodeTensor>(&t)) return std::move(*c);
  throw FormatError(path.string() + ": expected an i64 tensor");
}

template <typename T>
void write_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace po2q
