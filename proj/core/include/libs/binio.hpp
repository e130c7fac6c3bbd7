#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace libs {

// Little-endian byte buffer writer.
class BinaryWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void raw(std::string_view bytes) { buf_.append(bytes); }
  // u32 length prefix + bytes.
  void block(std::string_view bytes);

  const std::string& bytes() const { return buf_; }
  void write_file(const std::filesystem::path& path) const;

 private:
  std::string buf_;
};

// Little-endian reader over an in-memory file image. Every failure is a
// FormatError naming the file and byte offset.
class BinaryReader {
 public:
  BinaryReader(std::string bytes, std::string source);
  static BinaryReader from_file(const std::filesystem::path& path);

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::string raw(std::size_t n);
  std::string block();
  void expect_magic(std::string_view magic);

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const;

 private:
  void need(std::size_t n);

  std::string bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

// Flat `key = value` text with `#` comments; later keys override earlier.
std::map<std::string, std::string> parse_key_values(std::string_view text,
                                                    const std::string& source);
std::string format_key_values(const std::map<std::string, std::string>& kv);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

// Typed value parsing for key/value maps; ConfigError names the key.
double parse_real(const std::string& key, const std::string& value);
std::uint64_t parse_uint(const std::string& key, const std::string& value);
bool parse_bool(const std::string& key, const std::string& value);

// Shortest decimal form that parses back to the same double.
std::string format_real(double v);

}  // namespace libs
