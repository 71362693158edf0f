#include "evtrack/image.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace evtrack {

void write_ppm(const std::string& path, const NdArray<double>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw ShapeError("write_ppm: image must be [3,H,W], got " +
                     shape_str(image.shape()));
  }
  const std::size_t H = image.dim(1), W = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("write_ppm: cannot open " + path);
  out << "P6\n" << W << " " << H << "\n255\n";
  std::vector<unsigned char> row(W * 3);
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(image.at(c, i, j), 0.0, 1.0);
        row[j * 3 + c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw InputError("write_ppm: short write to " + path);
}

namespace {

int next_token(std::istream& in) {
  // Skips whitespace and '#' comments per the PPM grammar.
  for (;;) {
    int c = in.get();
    if (c == '#') {
      while (c != '\n' && c != EOF) c = in.get();
    } else if (!std::isspace(c)) {
      in.unget();
      break;
    }
  }
  int value = 0;
  in >> value;
  return value;
}

}  // namespace

NdArray<double> read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("read_ppm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw InputError("read_ppm: " + path + " is not P6");
  const int W = next_token(in);
  const int H = next_token(in);
  const int maxval = next_token(in);
  if (W <= 0 || H <= 0 || maxval != 255) {
    throw InputError("read_ppm: unsupported header in " + path);
  }
  in.get();  // single whitespace after maxval
  NdArray<double> image({3, static_cast<std::size_t>(H),
                         static_cast<std::size_t>(W)});
  std::vector<unsigned char> row(static_cast<std::size_t>(W) * 3);
  for (std::size_t i = 0; i < static_cast<std::size_t>(H); ++i) {
    in.read(reinterpret_cast<char*>(row.data()),
            static_cast<std::streamsize>(row.size()));
    if (!in) throw InputError("read_ppm: truncated data in " + path);
    for (std::size_t j = 0; j < static_cast<std::size_t>(W); ++j)
      for (std::size_t c = 0; c < 3; ++c)
        image.at(c, i, j) = row[j * 3 + c] / 255.0;
  }
  return image;
}

}  // namespace evtrack
