#pragma once

// Tensor binary record, little-endian throughout:
//
//   u8  dtype tag (0 = f32, 1 = f64)
//   u32 rank
//   u64 extent[rank]
//   f32|f64 data[prod(extent)]   (row-major)

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "xrestormer/tensor.hpp"

namespace xrestormer {

static_assert(std::endian::native == std::endian::little,
              "tensor serialization assumes a little-endian host");

namespace io {

template <class U>
void write_pod(std::ostream& os, U value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(U));
}

template <class U>
U read_pod(std::istream& is) {
  U value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(U))) {
    throw IoError("unexpected end of tensor stream");
  }
  return value;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::uint64_t limit = 1u << 30) {
  const auto n = read_pod<std::uint64_t>(is);
  if (n > limit) throw IoError("string record too long");
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw IoError("unexpected end of string record");
  }
  return s;
}

}  // namespace io

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  io::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  io::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) io::write_pod<std::uint64_t>(os, e);
  auto d = t.data();
  os.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
  if (!os) throw IoError("failed writing tensor record");
}

/// Reads one record; a record stored in the other precision is converted.
template <class T>
Tensor<T> read_tensor(std::istream& is) {
  const auto tag = io::read_pod<std::uint8_t>(is);
  if (tag > 1) throw IoError("unknown dtype tag " + std::to_string(tag));
  const auto rank = io::read_pod<std::uint32_t>(is);
  if (rank > 16) throw IoError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::size_t>(io::read_pod<std::uint64_t>(is));
  const std::size_t n = numel(shape);
  auto read_as = [&]<class Stored>() {
    std::vector<Stored> raw(n);
    if (n && !is.read(reinterpret_cast<char*>(raw.data()),
                      static_cast<std::streamsize>(n * sizeof(Stored)))) {
      throw IoError("truncated tensor payload");
    }
    std::vector<T> values(raw.begin(), raw.end());
    return Tensor<T>(shape, std::move(values));
  };
  if (tag == static_cast<std::uint8_t>(DType::f32)) return read_as.template operator()<float>();
  return read_as.template operator()<double>();
}

}  // namespace xrestormer
