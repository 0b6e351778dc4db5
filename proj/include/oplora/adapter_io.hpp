#pragma once

// Binary adapter record.
//
// Layout, all integers and doubles little-endian regardless of host:
//
//   bytes 0..7   magic "OPLORA01"
//   u32          kind (0 = LoRA, 1 = DoRA)
//   u32          rank
//   f64          alpha
//   u32          array count N
//   N times:
//     u32        name length L, then L bytes of ASCII name
//     u64 rows, u64 cols
//     rows*cols  f64 values, row-major
//
// Arrays are "A" (r x d_in), "B" (d_out x r) and, for DoRA, "m" (d_in x 1).

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "oplora/errors.hpp"
#include "oplora/models.hpp"

namespace oplora {

inline constexpr std::string_view kAdapterMagic = "OPLORA01";

namespace detail {

inline void put_le(std::ostream& os, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint64_t get_le(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw ConfigError("adapter record: truncated input");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}
inline void put_f64(std::ostream& os, double d) { put_le(os, std::bit_cast<std::uint64_t>(d), 8); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_le(is, 8)); }

inline void put_array(std::ostream& os, std::string_view name, const Matrix& m) {
  put_le(os, name.size(), 4);
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_le(os, static_cast<std::uint64_t>(m.rows()), 8);
  put_le(os, static_cast<std::uint64_t>(m.cols()), 8);
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) put_f64(os, m(i, j));
}

}  // namespace detail

inline void write_adapter(std::ostream& os, const AdapterExport& e) {
  os.write(kAdapterMagic.data(), static_cast<std::streamsize>(kAdapterMagic.size()));
  detail::put_le(os, e.dora ? 1 : 0, 4);
  detail::put_le(os, static_cast<std::uint64_t>(e.rank), 4);
  detail::put_f64(os, e.alpha);
  detail::put_le(os, e.dora ? 3 : 2, 4);
  detail::put_array(os, "A", e.a);
  detail::put_array(os, "B", e.b);
  if (e.dora) detail::put_array(os, "m", e.m);
}

inline AdapterExport read_adapter(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::string_view(magic, 8) != kAdapterMagic) {
    throw ConfigError("adapter record: bad magic");
  }
  AdapterExport e;
  const auto kind = detail::get_le(is, 4);
  if (kind > 1) throw ConfigError("adapter record: unknown kind " + std::to_string(kind));
  e.dora = kind == 1;
  e.rank = static_cast<Index>(detail::get_le(is, 4));
  e.alpha = detail::get_f64(is);
  const auto count = detail::get_le(is, 4);
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = detail::get_le(is, 4);
    if (len > 64) throw ConfigError("adapter record: implausible name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw ConfigError("adapter record: truncated name");
    const auto rows = static_cast<Index>(detail::get_le(is, 8));
    const auto cols = static_cast<Index>(detail::get_le(is, 8));
    if (rows < 0 || cols < 0 || rows * cols > (Index{1} << 28)) throw ConfigError("adapter record: implausible shape");
    Matrix m(rows, cols);
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) m(i, j) = detail::get_f64(is);
    if (name == "A") e.a = std::move(m);
    else if (name == "B") e.b = std::move(m);
    else if (name == "m") e.m = std::move(m);
    else throw ConfigError("adapter record: unknown array '" + name + "'");
  }
  if (e.a.size() == 0 || e.b.size() == 0 || (e.dora && e.m.size() == 0)) {
    throw ConfigError("adapter record: missing arrays");
  }
  return e;
}

inline void save_adapter(const std::string& path, const AdapterExport& e) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open '" + path + "' for writing");
  write_adapter(os, e);
  if (!os) throw ConfigError("write to '" + path + "' failed");
}

inline AdapterExport load_adapter(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open '" + path + "'");
  return read_adapter(is);
}

}  // namespace oplora
