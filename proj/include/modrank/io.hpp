#pragma once

// Small binary/text I/O helpers shared by the artifact formats.
// All multi-byte values are written little-endian; doubles as raw IEEE-754
// bit patterns so that round trips are bit-exact.

#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace modrank::io {

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void f64s(std::span<const double> vs);
  void str(std::string_view s);
  void magic(std::string_view m);

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  BinaryReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::vector<double> f64s(std::size_t n);
  std::string str();
  /// Throws IoError naming the source when the next bytes differ from `m`.
  void expect_magic(std::string_view m);

 private:
  void read(char* dst, std::size_t n);
  std::istream& in_;
  std::string source_;
};

/// Writes `contents` to a sibling temp file and renames it over `path`.
void write_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

/// Lower-case hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);

/// Shortest text form that parses back to the identical double.
std::string format_exact(double v);
double parse_double(std::string_view text);

}  // namespace modrank::io
