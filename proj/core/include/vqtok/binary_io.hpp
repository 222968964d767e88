#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vqtok::io {

/// Little-endian primitives over std streams. Readers throw FormatError on
/// truncated input.
void write_u32(std::ostream& out, uint32_t v);
void write_u64(std::ostream& out, uint64_t v);
void write_i64(std::ostream& out, int64_t v);
void write_i32(std::ostream& out, int32_t v);
void write_string(std::ostream& out, std::string_view s);
void write_f32s(std::ostream& out, std::span<const float> values);
void write_bytes(std::ostream& out, std::span<const unsigned char> bytes);

uint32_t read_u32(std::istream& in);
uint64_t read_u64(std::istream& in);
int64_t read_i64(std::istream& in);
int32_t read_i32(std::istream& in);
std::string read_string(std::istream& in, uint32_t max_len = 1u << 20);
std::vector<float> read_f32s(std::istream& in, size_t count);
std::vector<unsigned char> read_bytes(std::istream& in, size_t count);

/// Appends the little-endian encoding of `values` to `buffer`.
void append_f32s(std::vector<unsigned char>& buffer, std::span<const float> values);

/// 64-bit FNV-1a.
class Fnv1a {
 public:
  void update(const void* data, size_t size);
  void update(std::string_view s) { update(s.data(), s.size()); }
  uint64_t digest() const { return state_; }

 private:
  uint64_t state_ = 0xcbf29ce484222325ull;
};

uint64_t fnv1a(std::string_view s);

/// Writes via a sibling temp file and an atomic rename.
void atomic_write(const std::filesystem::path& path, const std::string& contents);

std::string read_file(const std::filesystem::path& path);

std::string hex64(uint64_t v);

}  // namespace vqtok::io
