#include "driveweave/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "driveweave/common.hpp"

namespace driveweave {

static_assert(std::endian::native == std::endian::little,
              "blob formats are little-endian; big-endian hosts are unsupported");

void BlobWriter::put_bytes(const void* data, size_t n) {
  const auto* p = static_cast<const uint8_t*>(data);
  buf_.insert(buf_.end(), p, p + n);
}

void BlobWriter::put_u8(const std::vector<uint8_t>& v) { put_bytes(v.data(), v.size()); }

void BlobWriter::put_f32(const std::vector<float>& v) {
  put_bytes(v.data(), v.size() * sizeof(float));
}

void BlobWriter::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
  if (!f) throw DataError("write failed: " + path);
}

BlobReader::BlobReader(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("cannot open: " + path);
  auto n = f.tellg();
  f.seekg(0);
  buf_.resize(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(buf_.data()), n);
  if (!f) throw DataError("read failed: " + path);
}

std::vector<uint8_t> BlobReader::get_u8(size_t offset, size_t count) const {
  if (offset + count > buf_.size()) throw DataError("blob read out of range");
  return {buf_.begin() + static_cast<ptrdiff_t>(offset),
          buf_.begin() + static_cast<ptrdiff_t>(offset + count)};
}

std::vector<float> BlobReader::get_f32(size_t offset, size_t count) const {
  if (offset + count * sizeof(float) > buf_.size()) throw DataError("blob read out of range");
  std::vector<float> out(count);
  std::memcpy(out.data(), buf_.data() + offset, count * sizeof(float));
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open for write: " + path);
  f << content;
  if (!f) throw DataError("write failed: " + path);
}

}  // namespace driveweave
