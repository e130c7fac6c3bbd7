#include "libs/binio.hpp"

#include <bit>
#include <charconv>
#include <fstream>
#include <sstream>

#include "libs/error.hpp"

namespace libs {

void BinaryWriter::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void BinaryWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void BinaryWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void BinaryWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void BinaryWriter::block(std::string_view bytes) {
  u32(static_cast<std::uint32_t>(bytes.size()));
  raw(bytes);
}

void BinaryWriter::write_file(const std::filesystem::path& path) const {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

BinaryReader::BinaryReader(std::string bytes, std::string source)
    : bytes_(std::move(bytes)), source_(std::move(source)) {}

BinaryReader BinaryReader::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return BinaryReader(ss.str(), path.string());
}

void BinaryReader::fail(const std::string& what) const {
  throw FormatError(source_ + ": " + what + " at offset " +
                    std::to_string(pos_));
}

void BinaryReader::need(std::size_t n) {
  if (bytes_.size() - pos_ < n) {
    fail("unexpected end of file (need " + std::to_string(n) + " bytes)");
  }
}

std::uint8_t BinaryReader::u8() {
  need(1);
  return static_cast<std::uint8_t>(bytes_[pos_++]);
}

std::uint16_t BinaryReader::u16() {
  need(2);
  std::uint16_t v = 0;
  for (int i = 0; i < 2; ++i) {
    v |= static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes_[pos_++]))
         << (8 * i);
  }
  return v;
}

std::uint32_t BinaryReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[pos_++]))
         << (8 * i);
  }
  return v;
}

std::uint64_t BinaryReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[pos_++]))
         << (8 * i);
  }
  return v;
}

float BinaryReader::f32() { return std::bit_cast<float>(u32()); }

std::string BinaryReader::raw(std::size_t n) {
  need(n);
  std::string out = bytes_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::string BinaryReader::block() {
  const std::size_t start = pos_;
  const std::uint32_t n = u32();
  if (bytes_.size() - pos_ < n) {
    pos_ = start;
    fail("block length " + std::to_string(n) + " exceeds file size");
  }
  return raw(n);
}

void BinaryReader::expect_magic(std::string_view magic) {
  const std::size_t start = pos_;
  if (bytes_.size() - pos_ < magic.size() ||
      std::string_view(bytes_).substr(pos_, magic.size()) != magic) {
    pos_ = start;
    fail("bad magic (expected \"" + std::string(magic) + "\")");
  }
  pos_ += magic.size();
}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

std::map<std::string, std::string> parse_key_values(std::string_view text,
                                                    const std::string& source) {
  std::map<std::string, std::string> kv;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    ++line_no;
    pos = end + 1;
    if (auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) {
      if (end == text.size()) break;
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(source + ":" + std::to_string(line_no) +
                        ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) {
      throw ConfigError(source + ":" + std::to_string(line_no) +
                        ": empty key");
    }
    kv[std::string(key)] = std::string(trim(line.substr(eq + 1)));
    if (end == text.size()) break;
  }
  return kv;
}

std::string format_key_values(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

double parse_real(const std::string& key, const std::string& value) {
  double v = 0;
  const char* end = value.data() + value.size();
  auto res = std::from_chars(value.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ConfigError("'" + key + "': expected a number, got '" + value + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const char* end = value.data() + value.size();
  auto res = std::from_chars(value.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ConfigError("'" + key + "': expected a non-negative integer, got '" +
                      value + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true" || value == "yes") return true;
  if (value == "0" || value == "false" || value == "no") return false;
  throw ConfigError("'" + key + "': expected a boolean, got '" + value + "'");
}

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace libs
