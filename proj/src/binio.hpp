#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

// Little-endian primitives shared by the binary file formats.
namespace pointforge::binio {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <typename T>
inline void write_le(std::ostream& os, T v) {
  static_assert(std::is_arithmetic_v<T>);
  unsigned char b[sizeof(T)];
  std::uint64_t u = 0;
  std::memcpy(&u, &v, sizeof(T));
  for (size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  write_bytes(os, b, sizeof(T));
}

template <typename T>
inline T read_le(std::istream& is, const char* what) {
  unsigned char b[sizeof(T)];
  is.read(reinterpret_cast<char*>(b), sizeof(T));
  if (!is) throw std::runtime_error(std::string(what) + ": truncated file");
  std::uint64_t u = 0;
  for (size_t i = 0; i < sizeof(T); ++i) u |= std::uint64_t(b[i]) << (8 * i);
  T v;
  std::memcpy(&v, &u, sizeof(T));
  return v;
}

inline void write_u32(std::ostream& os, std::uint32_t v) { write_le<std::uint32_t>(os, v); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_le<std::uint64_t>(os, v); }
inline void write_f32(std::ostream& os, float v) { write_le<float>(os, v); }
inline void write_f64(std::ostream& os, double v) { write_le<double>(os, v); }
inline void write_u8(std::ostream& os, std::uint8_t v) { write_le<std::uint8_t>(os, v); }

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  return read_le<std::uint32_t>(is, what);
}
inline std::uint64_t read_u64(std::istream& is, const char* what) {
  return read_le<std::uint64_t>(is, what);
}
inline float read_f32(std::istream& is, const char* what) { return read_le<float>(is, what); }
inline double read_f64(std::istream& is, const char* what) { return read_le<double>(is, what); }
inline std::uint8_t read_u8(std::istream& is, const char* what) {
  return read_le<std::uint8_t>(is, what);
}

}  // namespace pointforge::binio
