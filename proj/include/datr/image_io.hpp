#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

// Binary PPM (P6) and PGM (P5) readers/writers, maxval 255. Chosen for
// bit-exact dependency-free round trips.
namespace datr::io {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline int read_pnm_token(std::istream& in, const std::string& path) {
  // skips whitespace and '#' comments
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#')
      while (c != EOF && c != '\n') c = in.get();
    c = in.get();
  }
  if (c == EOF) throw IoError("truncated header in " + path);
  int value = 0;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    c = in.get();
  }
  return value;
}

}  // namespace detail

inline void write_pnm(const std::string& path, int h, int w, int channels,
                      const std::vector<std::uint8_t>& data) {
  if (channels != 1 && channels != 3) throw IoError("pnm supports 1 or 3 channels");
  if (data.size() != static_cast<std::size_t>(h) * w * channels)
    throw IoError("pnm data size mismatch for " + path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << (channels == 3 ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline std::vector<std::uint8_t> read_pnm(const std::string& path, int& h, int& w,
                                          int& channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic == "P6")
    channels = 3;
  else if (magic == "P5")
    channels = 1;
  else
    throw IoError("unsupported magic '" + magic + "' in " + path);
  w = detail::read_pnm_token(in, path);
  h = detail::read_pnm_token(in, path);
  const int maxval = detail::read_pnm_token(in, path);
  if (maxval != 255) throw IoError("unsupported maxval in " + path);
  std::vector<std::uint8_t> data(static_cast<std::size_t>(h) * w * channels);
  in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (in.gcount() != static_cast<std::streamsize>(data.size()))
    throw IoError("truncated pixel data in " + path);
  return data;
}

}  // namespace datr::io
