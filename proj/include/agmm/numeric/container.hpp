#pragma once

// Binary tensor container ("AGMT").
//
//   magic   4 bytes  "AGMT"
//   version u16 LE   1
//   dtype   u8       0 = f64, 1 = f32
//   rank    u8
//   extents rank x u64 LE
//   payload row-major, little-endian values of dtype

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "agmm/numeric/tensor.hpp"

namespace agmm {

enum class DType : std::uint8_t { f64 = 0, f32 = 1 };

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <class T>
T take(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("truncated tensor container");
  return v;
}

}  // namespace detail

template <class Real>
void write_tensor(std::ostream& os, const Tensor<Real>& t, DType dtype) {
  os.write("AGMT", 4);
  detail::put<std::uint16_t>(os, 1);
  detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
  detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) detail::put<std::uint64_t>(os, e);
  for (auto v : t.data()) {
    if (dtype == DType::f64)
      detail::put<double>(os, double(v));
    else
      detail::put<float>(os, float(v));
  }
}

template <class Real>
void write_tensor(std::ostream& os, const Tensor<Real>& t) {
  write_tensor(os, t, std::is_same_v<Real, float> ? DType::f32 : DType::f64);
}

template <class Real>
Tensor<Real> read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "AGMT", 4) != 0) throw FormatError("bad tensor container magic");
  const auto version = detail::take<std::uint16_t>(is);
  if (version != 1) throw FormatError("unsupported tensor container version " + std::to_string(version));
  const auto dtype = detail::take<std::uint8_t>(is);
  if (dtype > 1) throw FormatError("unknown dtype code " + std::to_string(dtype));
  const auto rank = detail::take<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& e : shape) e = static_cast<std::size_t>(detail::take<std::uint64_t>(is));
  std::vector<Real> data(numel(shape));
  for (auto& v : data)
    v = dtype == 0 ? Real(detail::take<double>(is)) : Real(detail::take<float>(is));
  return Tensor<Real>::from(std::move(shape), std::move(data));
}

template <class Real>
void save_tensor(const std::string& path, const Tensor<Real>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_tensor(os, t);
}

template <class Real>
Tensor<Real> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  return read_tensor<Real>(is);
}

}  // namespace agmm
