#include "vqtok/binary_io.hpp"

#include "vqtok/errors.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace vqtok::io {

namespace {

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw FormatError("unexpected end of binary stream");
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

void write_u32(std::ostream& out, uint32_t v) { put_le(out, v); }
void write_u64(std::ostream& out, uint64_t v) { put_le(out, v); }
void write_i64(std::ostream& out, int64_t v) { put_le(out, static_cast<uint64_t>(v)); }
void write_i32(std::ostream& out, int32_t v) { put_le(out, static_cast<uint32_t>(v)); }

void write_string(std::ostream& out, std::string_view s) {
  write_u32(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void append_f32s(std::vector<unsigned char>& buffer, std::span<const float> values) {
  const size_t offset = buffer.size();
  buffer.resize(offset + 4 * values.size());
  for (size_t i = 0; i < values.size(); ++i) {
    const uint32_t bits = std::bit_cast<uint32_t>(values[i]);
    for (size_t k = 0; k < 4; ++k) buffer[offset + 4 * i + k] = static_cast<unsigned char>((bits >> (8 * k)) & 0xff);
  }
}

void write_f32s(std::ostream& out, std::span<const float> values) {
  std::vector<unsigned char> buf;
  append_f32s(buf, values);
  write_bytes(out, buf);
}

void write_bytes(std::ostream& out, std::span<const unsigned char> bytes) {
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

uint32_t read_u32(std::istream& in) { return get_le<uint32_t>(in); }
uint64_t read_u64(std::istream& in) { return get_le<uint64_t>(in); }
int64_t read_i64(std::istream& in) { return static_cast<int64_t>(get_le<uint64_t>(in)); }
int32_t read_i32(std::istream& in) { return static_cast<int32_t>(get_le<uint32_t>(in)); }

std::string read_string(std::istream& in, uint32_t max_len) {
  const uint32_t n = read_u32(in);
  if (n > max_len) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), n)) throw FormatError("unexpected end of binary stream");
  return s;
}

std::vector<unsigned char> read_bytes(std::istream& in, size_t count) {
  std::vector<unsigned char> bytes(count);
  if (count > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(count))) {
    throw FormatError("unexpected end of binary stream");
  }
  return bytes;
}

std::vector<float> read_f32s(std::istream& in, size_t count) {
  auto bytes = read_bytes(in, 4 * count);
  std::vector<float> values(count);
  for (size_t i = 0; i < count; ++i) {
    uint32_t bits = 0;
    for (size_t k = 0; k < 4; ++k) bits |= static_cast<uint32_t>(bytes[4 * i + k]) << (8 * k);
    values[i] = std::bit_cast<float>(bits);
  }
  return values;
}

void Fnv1a::update(const void* data, size_t size) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < size; ++i) {
    state_ ^= p[i];
    state_ *= 0x100000001b3ull;
  }
}

uint64_t fnv1a(std::string_view s) {
  Fnv1a h;
  h.update(s);
  return h.digest();
}

void atomic_write(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace vqtok::io
