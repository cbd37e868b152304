#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace driveweave {

// Little-endian binary blob helpers. The host is assumed little-endian
// (checked once at startup of any writer) so vectors map directly.
class BlobWriter {
 public:
  void put_bytes(const void* data, size_t n);
  void put_u8(const std::vector<uint8_t>& v);
  void put_f32(const std::vector<float>& v);
  size_t size() const { return buf_.size(); }
  const std::vector<uint8_t>& bytes() const { return buf_; }
  void save(const std::string& path) const;

 private:
  std::vector<uint8_t> buf_;
};

class BlobReader {
 public:
  explicit BlobReader(const std::string& path);
  std::vector<uint8_t> get_u8(size_t offset, size_t count) const;
  std::vector<float> get_f32(size_t offset, size_t count) const;
  size_t size() const { return buf_.size(); }

 private:
  std::vector<uint8_t> buf_;
};

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace driveweave
