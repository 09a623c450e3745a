#include "cod2/npz.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <regex>
#include <sstream>
#include <stdexcept>

namespace cod2::npz {
namespace {

constexpr uint32_t kLocalHeaderSig = 0x04034b50;
constexpr uint32_t kCentralHeaderSig = 0x02014b50;
constexpr uint32_t kEndOfCentralSig = 0x06054b50;
constexpr uint16_t kDosDate1980 = 0x0021;

void put16(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

void put32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint16_t get16(const std::string& in, size_t pos) {
  if (pos + 2 > in.size()) throw std::runtime_error("npz: truncated archive");
  return static_cast<uint16_t>(static_cast<uint8_t>(in[pos]) | (static_cast<uint8_t>(in[pos + 1]) << 8));
}

uint32_t get32(const std::string& in, size_t pos) {
  return static_cast<uint32_t>(get16(in, pos)) | (static_cast<uint32_t>(get16(in, pos + 2)) << 16);
}

uint64_t get64(const std::string& in, size_t pos) {
  return static_cast<uint64_t>(get32(in, pos)) | (static_cast<uint64_t>(get32(in, pos + 4)) << 32);
}

std::string npy_bytes(const Array& array) {
  std::ostringstream dict;
  dict << "{'descr': '<f4', 'fortran_order': False, 'shape': (";
  for (size_t i = 0; i < array.shape.size(); ++i) {
    dict << array.shape[i];
    if (array.shape.size() == 1 || i + 1 < array.shape.size()) dict << ",";
    if (i + 1 < array.shape.size()) dict << " ";
  }
  dict << "), }";
  std::string header = dict.str();
  // magic(6) + version(2) + len(2) + header + '\n' must be a multiple of 64
  const size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');

  std::string out("\x93NUMPY\x01\x00", 8);
  put16(out, static_cast<uint16_t>(header.size()));
  out += header;
  const char* raw = reinterpret_cast<const char*>(array.data.data());
  out.append(raw, array.data.size() * sizeof(float));
  return out;
}

std::string deflate_raw(const std::string& in) {
  z_stream zs{};
  if (deflateInit2(&zs, 6, Z_DEFLATED, -15, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    throw std::runtime_error("npz: deflateInit2 failed");
  std::string out(deflateBound(&zs, in.size()), '\0');
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw std::runtime_error("npz: deflate failed");
  out.resize(zs.total_out);
  return out;
}

std::string inflate_raw(const std::string& in, size_t expected) {
  z_stream zs{};
  if (inflateInit2(&zs, -15) != Z_OK) throw std::runtime_error("npz: inflateInit2 failed");
  std::string out(expected, '\0');
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&zs, Z_FINISH);
  inflateEnd(&zs);
  if (rc != Z_STREAM_END || zs.total_out != expected) throw std::runtime_error("npz: corrupt deflate stream");
  return out;
}

Array parse_npy(const std::string& bytes) {
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0)
    throw std::runtime_error("npz: entry is not an .npy array");
  const int major = static_cast<uint8_t>(bytes[6]);
  size_t header_len = 0;
  size_t offset = 0;
  if (major == 1) {
    header_len = get16(bytes, 8);
    offset = 10;
  } else {
    header_len = get32(bytes, 8);
    offset = 12;
  }
  const std::string header = bytes.substr(offset, header_len);
  if (header.find("'descr': '<f4'") == std::string::npos)
    throw std::runtime_error("npz: only little-endian float32 arrays are supported");
  if (header.find("'fortran_order': False") == std::string::npos)
    throw std::runtime_error("npz: fortran-ordered arrays are not supported");

  std::smatch match;
  if (!std::regex_search(header, match, std::regex(R"('shape':\s*\(([^)]*)\))")))
    throw std::runtime_error("npz: malformed .npy header");
  Array array;
  const std::string dims = match[1].str();
  std::regex number(R"(\d+)");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), number); it != std::sregex_iterator(); ++it)
    array.shape.push_back(std::stoll(it->str()));

  const size_t payload = offset + header_len;
  const size_t count = static_cast<size_t>(array.numel());
  if (bytes.size() != payload + count * sizeof(float))
    throw std::runtime_error("npz: payload size does not match header shape");
  array.data.resize(count);
  std::memcpy(array.data.data(), bytes.data() + payload, count * sizeof(float));
  return array;
}

}  // namespace

int64_t Array::numel() const {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

void write(const std::filesystem::path& path, const std::string& name, const Array& array) {
  if (array.numel() != static_cast<int64_t>(array.data.size()))
    throw std::invalid_argument("npz: shape does not match data size");

  const std::string entry = name + ".npy";
  const std::string raw = npy_bytes(array);
  const std::string packed = deflate_raw(raw);
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(raw.data()), static_cast<uInt>(raw.size())));

  std::string out;
  put32(out, kLocalHeaderSig);
  put16(out, 20);
  put16(out, 0);
  put16(out, 8);
  put16(out, 0);
  put16(out, kDosDate1980);
  put32(out, crc);
  put32(out, static_cast<uint32_t>(packed.size()));
  put32(out, static_cast<uint32_t>(raw.size()));
  put16(out, static_cast<uint16_t>(entry.size()));
  put16(out, 0);
  out += entry;
  out += packed;

  const uint32_t central_offset = static_cast<uint32_t>(out.size());
  put32(out, kCentralHeaderSig);
  put16(out, 20);
  put16(out, 20);
  put16(out, 0);
  put16(out, 8);
  put16(out, 0);
  put16(out, kDosDate1980);
  put32(out, crc);
  put32(out, static_cast<uint32_t>(packed.size()));
  put32(out, static_cast<uint32_t>(raw.size()));
  put16(out, static_cast<uint16_t>(entry.size()));
  put16(out, 0);
  put16(out, 0);
  put16(out, 0);
  put16(out, 0);
  put32(out, 0);
  put32(out, 0);
  out += entry;
  const uint32_t central_size = static_cast<uint32_t>(out.size()) - central_offset;

  put32(out, kEndOfCentralSig);
  put16(out, 0);
  put16(out, 0);
  put16(out, 1);
  put16(out, 1);
  put32(out, central_size);
  put32(out, central_offset);
  put16(out, 0);

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("npz: cannot open " + path.string() + " for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw std::runtime_error("npz: write failed for " + path.string());
}

Array read(const std::filesystem::path& path, const std::string& name) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("npz: cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());

  if (bytes.size() < 22) throw std::runtime_error("npz: " + path.string() + " is not a zip archive");
  size_t eocd = std::string::npos;
  for (size_t pos = bytes.size() - 22 + 1; pos-- > 0;) {
    if (get32(bytes, pos) == kEndOfCentralSig) {
      eocd = pos;
      break;
    }
  }
  if (eocd == std::string::npos) throw std::runtime_error("npz: missing end-of-central-directory in " + path.string());

  const uint16_t entries = get16(bytes, eocd + 10);
  size_t pos = get32(bytes, eocd + 16);
  const std::string wanted = name + ".npy";
  for (uint16_t i = 0; i < entries; ++i) {
    if (get32(bytes, pos) != kCentralHeaderSig) throw std::runtime_error("npz: corrupt central directory");
    const uint16_t method = get16(bytes, pos + 10);
    uint64_t packed_size = get32(bytes, pos + 20);
    uint64_t raw_size = get32(bytes, pos + 24);
    const uint16_t name_len = get16(bytes, pos + 28);
    const uint16_t extra_len = get16(bytes, pos + 30);
    const uint16_t comment_len = get16(bytes, pos + 32);
    uint64_t local_offset = get32(bytes, pos + 42);
    const std::string entry = bytes.substr(pos + 46, name_len);

    // zip64 extended sizes (numpy forces zip64 on its entries)
    size_t extra = pos + 46 + name_len;
    const size_t extra_end = extra + extra_len;
    while (extra + 4 <= extra_end) {
      const uint16_t id = get16(bytes, extra);
      const uint16_t size = get16(bytes, extra + 2);
      if (id == 0x0001) {
        size_t field = extra + 4;
        if (raw_size == 0xffffffffu) raw_size = get64(bytes, field), field += 8;
        if (packed_size == 0xffffffffu) packed_size = get64(bytes, field), field += 8;
        if (local_offset == 0xffffffffu) local_offset = get64(bytes, field);
      }
      extra += 4 + size;
    }

    if (entry == wanted) {
      if (get32(bytes, local_offset) != kLocalHeaderSig) throw std::runtime_error("npz: corrupt local header");
      const size_t data = local_offset + 30 + get16(bytes, local_offset + 26) + get16(bytes, local_offset + 28);
      const std::string payload = bytes.substr(data, packed_size);
      if (method == 0) return parse_npy(payload);
      if (method == 8) return parse_npy(inflate_raw(payload, raw_size));
      throw std::runtime_error("npz: unsupported compression method " + std::to_string(method));
    }
    pos += 46 + name_len + extra_len + comment_len;
  }
  throw std::runtime_error("npz: entry '" + wanted + "' not found in " + path.string());
}

}  // namespace cod2::npz
