#include "hatnet/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

namespace hatnet {

namespace {

constexpr unsigned char kVersion = 0x01;
constexpr unsigned char kDtypeF32 = 0x00;

void put_u32_le(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32_le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void write_htnt(const std::filesystem::path& path, const Tensor& t) {
  if (t.rank() > 255) throw IoError("htnt: rank " + std::to_string(t.rank()) + " exceeds format limit");
  std::string buf;
  buf.reserve(7 + 4 * t.rank() + 4 * t.numel());
  buf.append("HTNT");
  buf.push_back(static_cast<char>(kVersion));
  buf.push_back(static_cast<char>(kDtypeF32));
  buf.push_back(static_cast<char>(t.rank()));
  for (std::size_t e : t.dims()) {
    if (e > 0xffffffffull) throw IoError("htnt: extent does not fit in u32");
    put_u32_le(buf, static_cast<std::uint32_t>(e));
  }
  for (float v : t.values()) put_u32_le(buf, std::bit_cast<std::uint32_t>(v));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("htnt: cannot open for write: " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("htnt: short write: " + path.string());
}

Tensor read_htnt(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("htnt: cannot open for read: " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 7 || std::memcmp(buf.data(), "HTNT", 4) != 0)
    throw IoError("htnt: bad magic in " + path.string());
  if (buf[4] != kVersion)
    throw IoError("htnt: unsupported version " + std::to_string(buf[4]) + " in " + path.string());
  if (buf[5] != kDtypeF32)
    throw IoError("htnt: unsupported dtype " + std::to_string(buf[5]) + " in " + path.string());
  const std::size_t rank = buf[6];
  std::size_t pos = 7;
  if (buf.size() < pos + 4 * rank) throw IoError("htnt: truncated header in " + path.string());
  Dims dims(rank);
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = get_u32_le(buf.data() + pos);
    pos += 4;
    count *= dims[i];
  }
  if (buf.size() != pos + 4 * count)
    throw IoError("htnt: payload size mismatch in " + path.string() + " (dims " +
                  dims_to_string(dims) + ", " + std::to_string(buf.size() - pos) + " payload bytes)");
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(get_u32_le(buf.data() + pos));
    pos += 4;
  }
  return Tensor::from_data(std::move(dims), std::move(data));
}

}  // namespace hatnet
