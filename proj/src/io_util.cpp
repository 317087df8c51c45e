#include "miqrec/io_util.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace miqrec::io {

void append_bytes(std::string& buf, const void* p, size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

namespace {
template <typename T>
void append_le(std::string& buf, T v) {
  unsigned char bytes[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) bytes[i] = (unsigned char)((v >> (8 * i)) & 0xff);
  buf.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}
}  // namespace

void append_u16(std::string& buf, uint16_t v) { append_le(buf, v); }
void append_u32(std::string& buf, uint32_t v) { append_le(buf, v); }
void append_u64(std::string& buf, uint64_t v) { append_le(buf, v); }
void append_f64(std::string& buf, double v) { append_u64(buf, std::bit_cast<uint64_t>(v)); }

void append_str(std::string& buf, const std::string& s) {
  append_u32(buf, (uint32_t)s.size());
  buf.append(s);
}

void Reader::bytes(void* out, size_t n) {
  if (pos_ + n > buf_.size()) throw data_error(origin_ + ": truncated file");
  std::memcpy(out, buf_.data() + pos_, n);
  pos_ += n;
}

namespace {
template <typename T>
T read_le(Reader& r) {
  unsigned char bytes[sizeof(T)];
  r.bytes(bytes, sizeof(T));
  T v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= (T)bytes[i] << (8 * i);
  return v;
}
}  // namespace

uint16_t Reader::u16() { return read_le<uint16_t>(*this); }
uint32_t Reader::u32() { return read_le<uint32_t>(*this); }
uint64_t Reader::u64() { return read_le<uint64_t>(*this); }
double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::str() {
  const uint32_t n = u32();
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open file: " + path);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return content;
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot write file: " + tmp);
    out.write(content.data(), (std::streamsize)content.size());
    if (!out) throw data_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, target);
}

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw numeric_error("fmt_double failed");
  return std::string(buf, p);
}

}  // namespace miqrec::io
