#include "mamat/mten.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace mamat {

static_assert(std::endian::native == std::endian::little, "payload copy assumes a little-endian host");

namespace le {

namespace {
template <class U>
void write_uint(std::ostream& os, U v) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes, sizeof(U));
}

template <class U>
U read_uint(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  read_exact(is, reinterpret_cast<char*>(bytes), sizeof(U));
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}
}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { write_uint(os, v); }
void write_u16(std::ostream& os, std::uint16_t v) { write_uint(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { write_uint(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_uint(os, v); }
std::uint8_t read_u8(std::istream& is) { return read_uint<std::uint8_t>(is); }
std::uint16_t read_u16(std::istream& is) { return read_uint<std::uint16_t>(is); }
std::uint32_t read_u32(std::istream& is) { return read_uint<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_uint<std::uint64_t>(is); }

void read_exact(std::istream& is, char* dst, std::size_t n) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError(FormatError::Kind::truncated, "truncated stream");
}

}  // namespace le

namespace {
constexpr char kMagic[4] = {'M', 'T', 'E', 'N'};
constexpr std::uint8_t kVersion = 1;
}  // namespace

template <class T>
void mten_write(const Tensor<T>& t, std::ostream& sink) {
  if (t.rank() > 255) throw ShapeError("MTEN supports at most 255 dimensions");
  if (!t.all_finite()) throw DomainError("refusing to serialize non-finite values");
  sink.write(kMagic, 4);
  le::write_u8(sink, kVersion);
  le::write_u8(sink, static_cast<std::uint8_t>(dtype_of<T>()));
  le::write_u8(sink, static_cast<std::uint8_t>(t.rank()));
  le::write_u8(sink, 0);
  for (auto e : t.shape()) le::write_u64(sink, e);
  sink.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!sink) throw std::runtime_error("write failed");
}

template <class T>
Tensor<T> mten_read(std::istream& source) {
  char magic[4];
  le::read_exact(source, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(FormatError::Kind::bad_magic, "bad MTEN magic");
  const auto version = le::read_u8(source);
  if (version != kVersion) {
    throw FormatError(FormatError::Kind::unsupported_version, "unsupported MTEN version " + std::to_string(version));
  }
  const auto dtype = le::read_u8(source);
  if (dtype > static_cast<std::uint8_t>(DType::u8)) {
    throw FormatError(FormatError::Kind::unsupported_dtype, "unsupported MTEN dtype " + std::to_string(dtype));
  }
  if (dtype != static_cast<std::uint8_t>(dtype_of<T>())) {
    throw FormatError(FormatError::Kind::unsupported_dtype,
                      "MTEN dtype " + std::to_string(dtype) + " does not match the requested element type");
  }
  const auto ndim = le::read_u8(source);
  if (ndim == 0) throw FormatError(FormatError::Kind::invalid, "MTEN tensor with zero dimensions");
  le::read_u8(source);
  Shape shape(ndim);
  std::size_t count = 1;
  for (auto& e : shape) {
    e = le::read_u64(source);
    if (e == 0) throw FormatError(FormatError::Kind::invalid, "MTEN zero extent");
    if (count > (std::size_t{1} << 40) / e) throw FormatError(FormatError::Kind::invalid, "MTEN tensor too large");
    count *= e;
  }
  std::vector<T> data(count);
  le::read_exact(source, reinterpret_cast<char*>(data.data()), count * sizeof(T));
  return Tensor<T>(std::move(shape), std::move(data));
}

template void mten_write(const Tensor<float>&, std::ostream&);
template void mten_write(const Tensor<double>&, std::ostream&);
template void mten_write(const Tensor<std::uint8_t>&, std::ostream&);
template Tensor<float> mten_read<float>(std::istream&);
template Tensor<double> mten_read<double>(std::istream&);
template Tensor<std::uint8_t> mten_read<std::uint8_t>(std::istream&);

}  // namespace mamat
