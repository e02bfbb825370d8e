#include "snaplab/npy.hpp"

#include <cstring>
#include <fstream>
#include <regex>
#include <string>

#include "snaplab/error.hpp"

namespace snaplab {

namespace {
constexpr char kMagic[] = "\x93NUMPY";
}

void write_npy(const std::filesystem::path& path, const Tensor& t) {
  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (" + std::to_string(t.rows()) + ", " +
                       std::to_string(t.cols()) + "), }";
  // magic(6) + version(2) + len(2) + header + '\n' must be a multiple of 64
  const std::size_t base = 10 + header.size() + 1;
  header.append((64 - base % 64) % 64, ' ');
  header.push_back('\n');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(kMagic, 6);
  const char version[2] = {1, 0};
  out.write(version, 2);
  const auto len = static_cast<std::uint16_t>(header.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!out) throw Error("short write to " + path.string());
}

Tensor read_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, kMagic, 6) != 0) throw Error(path.string() + ": not an npy file");
  char version[2];
  in.read(version, 2);
  std::uint32_t header_len = 0;
  if (version[0] == 1) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    header_len = b[0] | (b[1] << 8);
  } else {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    header_len = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  std::string header(header_len, '\0');
  in.read(header.data(), header_len);
  if (header.find("'<f8'") == std::string::npos) throw Error(path.string() + ": only <f8 arrays are supported");
  if (header.find("'fortran_order': True") != std::string::npos)
    throw Error(path.string() + ": fortran order not supported");

  std::smatch m;
  static const std::regex shape_re(R"('shape':\s*\(\s*(\d*)\s*,?\s*(\d*)\s*,?\s*\))");
  if (!std::regex_search(header, m, shape_re)) throw Error(path.string() + ": malformed shape");
  Eigen::Index rows = m[1].length() ? std::stoll(m[1]) : 1;
  Eigen::Index cols = m[2].length() ? std::stoll(m[2]) : 1;
  if (m[1].length() && !m[2].length()) {  // 1-D array -> column vector
    cols = 1;
  }
  Tensor t(rows, cols);
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!in) throw Error(path.string() + ": truncated data");
  return t;
}

}  // namespace snaplab
