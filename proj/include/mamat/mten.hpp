#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include "mamat/tensor.hpp"

// MTEN tensor blobs:
//   "MTEN" | version u8 = 1 | dtype u8 | ndim u8 | pad u8 = 0
//   | ndim x u64 LE extents | row-major LE payload
namespace mamat {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

class FormatError : public std::runtime_error {
 public:
  enum class Kind { bad_magic, unsupported_version, unsupported_dtype, truncated, invalid };

  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }
template <>
constexpr DType dtype_of<std::uint8_t>() { return DType::u8; }

template <class T>
void mten_write(const Tensor<T>& t, std::ostream& sink);

// The stored dtype must match T.
template <class T>
Tensor<T> mten_read(std::istream& source);

// Little-endian primitives shared with the other binary containers.
namespace le {
void write_u8(std::ostream& os, std::uint8_t v);
void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
std::uint8_t read_u8(std::istream& is);
std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
void read_exact(std::istream& is, char* dst, std::size_t n);
}  // namespace le

}  // namespace mamat
