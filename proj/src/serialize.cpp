#include "vea/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vea/errors.hpp"

namespace vea {

void write_tensor(std::ostream& os, const Tensor& t) {
  os << "shape:";
  for (int64_t d : t.shape()) os << " " << d;
  os << "\n";
  const double* p = t.data();
  int64_t n = t.numel();
  std::vector<unsigned char> buf(static_cast<size_t>(n) * 8);
  for (int64_t i = 0; i < n; ++i) {
    uint64_t bits = std::bit_cast<uint64_t>(p[i]);
    for (int b = 0; b < 8; ++b) {
      buf[static_cast<size_t>(i * 8 + b)] = static_cast<unsigned char>(bits >> (8 * b));
    }
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("write_tensor: stream failure");
}

Tensor read_tensor(std::istream& is) {
  std::string header;
  if (!std::getline(is, header)) throw IoError("read_tensor: missing header");
  std::istringstream hs(header);
  std::string tag;
  hs >> tag;
  if (tag != "shape:") throw IoError("read_tensor: bad header '" + header + "'");
  Shape shape;
  int64_t d;
  while (hs >> d) shape.push_back(d);
  if (shape.empty()) throw IoError("read_tensor: empty shape");
  int64_t n = shape_numel(shape);
  std::vector<unsigned char> buf(static_cast<size_t>(n) * 8);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size())) {
    throw IoError("read_tensor: truncated payload (expected " +
                  std::to_string(n * 8) + " bytes)");
  }
  std::vector<double> data(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) {
      bits |= static_cast<uint64_t>(buf[static_cast<size_t>(i * 8 + b)]) << (8 * b);
    }
    data[static_cast<size_t>(i)] = std::bit_cast<double>(bits);
  }
  return Tensor::from_vector(std::move(shape), std::move(data));
}

void atomic_write_file(const std::string& path, const std::string& contents) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp + " for writing");
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) throw IoError("write failure on " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename " + tmp + " -> " + path + ": " + ec.message());
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

bool file_exists(const std::string& path) {
  return std::filesystem::exists(path);
}

}  // namespace vea
