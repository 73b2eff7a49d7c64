#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "pop/errors.hpp"

// Little-endian primitive encoding shared by the on-disk containers.
namespace pop::binio {

template <typename U>
U byteswap(U v) {
  static_assert(std::is_unsigned_v<U>);
  U out = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out = static_cast<U>((out << 8) | (v & 0xFF));
    v = static_cast<U>(v >> 8);
  }
  return out;
}

template <typename U>
U to_le(U v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return byteswap(v);
}

template <typename V>
void write(std::ostream& os, V value) {
  static_assert(std::is_arithmetic_v<V>);
  using U = std::conditional_t<sizeof(V) == 1, std::uint8_t,
                               std::conditional_t<sizeof(V) == 2, std::uint16_t,
                                                  std::conditional_t<sizeof(V) == 4, std::uint32_t, std::uint64_t>>>;
  U bits = std::bit_cast<U>(value);
  bits = to_le(bits);
  os.write(reinterpret_cast<const char*>(&bits), sizeof(bits));
}

template <typename V>
V read(std::istream& is) {
  static_assert(std::is_arithmetic_v<V>);
  using U = std::conditional_t<sizeof(V) == 1, std::uint8_t,
                               std::conditional_t<sizeof(V) == 2, std::uint16_t,
                                                  std::conditional_t<sizeof(V) == 4, std::uint32_t, std::uint64_t>>>;
  U bits = 0;
  is.read(reinterpret_cast<char*>(&bits), sizeof(bits));
  if (!is) throw DataError("unexpected end of file");
  return std::bit_cast<V>(to_le(bits));
}

inline void write_string(std::ostream& os, const std::string& s) {
  write<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, std::size_t max_len = 1u << 24) {
  const auto n = read<std::uint32_t>(is);
  if (n > max_len) throw DataError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw DataError("unexpected end of file");
  return s;
}

inline void write_magic(std::ostream& os, const char (&magic)[9]) { os.write(magic, 8); }

inline void expect_magic(std::istream& is, const char (&magic)[9], const std::string& what) {
  char buf[8] = {};
  is.read(buf, 8);
  if (!is || std::memcmp(buf, magic, 8) != 0) throw DataError(what + ": bad magic header");
}

}  // namespace pop::binio
