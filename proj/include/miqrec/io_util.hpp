#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>

#include "miqrec/matrix.hpp"

namespace miqrec::io {

// Little-endian binary packing helpers shared by the dataset cache and the
// checkpoint format.
void append_bytes(std::string& buf, const void* p, size_t n);
void append_u16(std::string& buf, uint16_t v);
void append_u32(std::string& buf, uint32_t v);
void append_u64(std::string& buf, uint64_t v);
void append_f64(std::string& buf, double v);
void append_str(std::string& buf, const std::string& s);  // u32 length + bytes

struct Reader {
  Reader(const std::string& buf, std::string origin) : buf_(buf), origin_(std::move(origin)) {}
  void bytes(void* out, size_t n);
  uint16_t u16();
  uint32_t u32();
  uint64_t u64();
  double f64();
  std::string str();
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  std::string origin_;
  size_t pos_ = 0;
};

std::string read_file(const std::string& path);
// Writes to a temp file in the same directory, then renames over the target.
void write_file_atomic(const std::string& path, const std::string& content);

// Locale-independent shortest round-trip formatting (period decimal separator).
std::string fmt_double(double v);

}  // namespace miqrec::io
